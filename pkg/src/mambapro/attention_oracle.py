"""Dense "attention view" of the scans, built entry by entry.

Every scan variant is linear in the tokens once the discretized steps are
fixed, so it can be written as ``h_i = sum_j M[i, j] x_j`` with an S-vector
block ``M[i, j]`` per token pair, and ``y_i = sum_j G[i, j] x_j`` with scalar
weights ``G[i, j] = cbar_i . M[i, j]``. The builders here construct those
matrices by explicit products and element recurrences, independently of the
sequential kernels in :mod:`mambapro.ssm_scan`, so the two can check each other.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .ssm_scan import DiscretizedStep
from .tensor_core import ShapeError, as_f64, matmul, softmax_rows


@dataclass(frozen=True)
class SimilarityMatrix:
    """Hidden-state blocks ``(N, N, S)`` and read-out weights ``(N, N)``."""

    blocks: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    def hidden(self, x) -> np.ndarray:
        """``(N, S, D)`` hidden states ``sum_j M[i, j] x_j``."""
        return np.einsum("ijk,jd->ikd", self.blocks, as_f64(x))

    def apply(self, x) -> np.ndarray:
        """``(N, D)`` outputs ``G X``."""
        return self.weights @ as_f64(x)

    def __add__(self, other: "SimilarityMatrix") -> "SimilarityMatrix":
        return SimilarityMatrix(self.blocks + other.blocks, self.weights + other.weights)


def _check(steps: Sequence[DiscretizedStep]):
    if len(steps) == 0:
        raise ShapeError("need at least one discretized step")
    S = steps[0].bbar.shape[0]
    for s in steps:
        if s.bbar.shape != (S,) or s.cbar.shape != (S,) or s.abar.shape not in ((S,), (S, S)):
            raise ShapeError("discretized steps have inconsistent shapes")
    return len(steps), S


def _evolve(abar, v):
    return abar @ v if abar.ndim == 2 else abar * v


def _ones_like_term(abar):
    # the additive residual term: abar_i applied to the all-ones state vector
    return abar.sum(axis=1) if abar.ndim == 2 else abar


def _readout(steps, blocks):
    C = np.stack([s.cbar for s in steps])
    return np.einsum("ik,ijk->ij", C, blocks)


def build_M_forward(steps: Sequence[DiscretizedStep]) -> SimilarityMatrix:
    """``M[i, j] = abar_i abar_{i-1} ... abar_{j+1} bbar_j`` for j <= i, else 0."""
    N, S = _check(steps)
    blocks = np.zeros((N, N, S))
    for i in range(N):
        for j in range(i + 1):
            v = steps[j].bbar.copy()
            for k in range(j + 1, i + 1):
                v = _evolve(steps[k].abar, v)
            blocks[i, j] = v
    return SimilarityMatrix(blocks, _readout(steps, blocks))


def build_M_residual(steps: Sequence[DiscretizedStep]) -> SimilarityMatrix:
    """``m_jj = bbar_j`` and ``m_ij = abar_i m_{i-1,j} + abar_i`` for i > j."""
    N, S = _check(steps)
    blocks = np.zeros((N, N, S))
    for j in range(N):
        blocks[j, j] = steps[j].bbar
        for i in range(j + 1, N):
            a = steps[i].abar
            blocks[i, j] = _evolve(a, blocks[i - 1, j]) + _ones_like_term(a)
    return SimilarityMatrix(blocks, _readout(steps, blocks))


def _mirror(m: SimilarityMatrix) -> SimilarityMatrix:
    return SimilarityMatrix(m.blocks[::-1, ::-1].copy(), m.weights[::-1, ::-1].copy())


def build_M_backward(steps_b: Sequence[DiscretizedStep], residual: bool = False) -> SimilarityMatrix:
    """Backward-direction matrix in forward positions (upper triangular).

    ``steps_b[i]`` is the step derived from token ``x_i``; the forward builder
    is applied to the reversed list and the result mirrored back.
    """
    build = build_M_residual if residual else build_M_forward
    return _mirror(build(list(steps_b)[::-1]))


def mask_diagonal(m: SimilarityMatrix) -> SimilarityMatrix:
    idx = np.arange(m.n)
    blocks = m.blocks.copy()
    weights = m.weights.copy()
    blocks[idx, idx] = 0.0
    weights[idx, idx] = 0.0
    return SimilarityMatrix(blocks, weights)


def build_M_bidirectional(steps_f: Sequence[DiscretizedStep], steps_b: Sequence[DiscretizedStep],
                          masked: bool = False, residual: bool = False) -> SimilarityMatrix:
    """``f_ij`` below the diagonal, ``b_ij`` above, ``f_ii (+ b_ii unless masked)`` on it."""
    if len(steps_f) != len(steps_b):
        raise ShapeError(f"direction lengths differ: {len(steps_f)} vs {len(steps_b)}")
    fwd = (build_M_residual if residual else build_M_forward)(steps_f)
    bwd = build_M_backward(steps_b, residual=residual)
    if masked:
        bwd = mask_diagonal(bwd)
    return fwd + bwd


def build_M_block(steps_f, steps_b) -> SimilarityMatrix:
    """Forward residual plus masked backward residual."""
    return build_M_bidirectional(steps_f, steps_b, masked=True, residual=True)


@dataclass(frozen=True)
class AttentionRef:
    W_Q: np.ndarray  # (Dk, Dx)
    W_K: np.ndarray  # (Dk, Dx)
    W_V: np.ndarray  # (Dv, Dx)

    @property
    def key_depth(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def random(cls, rng, depth: int, key_depth: int, value_depth: int):
        s = 1.0 / np.sqrt(depth)
        return cls(
            rng.normal(scale=s, size=(key_depth, depth)),
            rng.normal(scale=s, size=(key_depth, depth)),
            rng.normal(scale=s, size=(value_depth, depth)),
        )


def attention_scores(ref: AttentionRef, x) -> np.ndarray:
    x = as_f64(x)
    if ref.W_K.shape != ref.W_Q.shape:
        raise ShapeError(f"W_Q {ref.W_Q.shape} and W_K {ref.W_K.shape} differ")
    Q = matmul(x, ref.W_Q.T)
    K = matmul(x, ref.W_K.T)
    return softmax_rows(Q @ K.T / np.sqrt(ref.key_depth))


def self_attention(ref: AttentionRef, x):
    """Return ``(Y, S)`` with ``S = softmax(Q K^T / sqrt(Dk))`` and ``Y = S V``."""
    x = as_f64(x)
    S = attention_scores(ref, x)
    V = matmul(x, ref.W_V.T)
    return S @ V, S


def self_attention_sum_form(ref: AttentionRef, x) -> np.ndarray:
    """``y_i = sum_j s_ij v_j`` evaluated with explicit loops."""
    x = as_f64(x)
    S = attention_scores(ref, x)
    V = matmul(x, ref.W_V.T)
    N = x.shape[0]
    Y = np.zeros((N, V.shape[1]))
    for i in range(N):
        for j in range(N):
            Y[i] += S[i, j] * V[j]
    return Y


@dataclass(frozen=True)
class StructureReport:
    """Shape statistics of a scalar coefficient matrix.

    ``historical_mass[i]`` is the share of row i's absolute weight sitting on
    tokens j < i; ``diagonal_ratio[i]`` the share on j == i. The scan matrix and
    the attention matrix are reported side by side.
    """

    n: int
    zero_count: int
    upper_violations: int
    upper_max_abs: float
    diagonal_ratio: list
    historical_mass: list
    future_mass: list
    attention_diagonal_ratio: list
    attention_historical_mass: list

    def to_dict(self) -> dict:
        return asdict(self)


def _masses(G):
    a = np.abs(G)
    total = a.sum(axis=1)
    total = np.where(total > 0, total, 1.0)
    diag = np.diag(a) / total
    hist = np.tril(a, -1).sum(axis=1) / total
    fut = np.triu(a, 1).sum(axis=1) / total
    return diag, hist, fut


def compare_structures(M: SimilarityMatrix, S) -> StructureReport:
    S = as_f64(S)
    if S.shape != (M.n, M.n):
        raise ShapeError(f"attention matrix {S.shape} does not match N={M.n}")
    G = M.weights
    upper = np.triu(G, 1)
    d, h, f = _masses(G)
    sd, sh, _ = _masses(S)
    return StructureReport(
        n=M.n,
        zero_count=int(G.size - np.count_nonzero(G)),
        upper_violations=int(np.count_nonzero(upper)),
        upper_max_abs=float(np.abs(upper).max(initial=0.0)),
        diagonal_ratio=d.tolist(),
        historical_mass=h.tolist(),
        future_mass=f.tolist(),
        attention_diagonal_ratio=sd.tolist(),
        attention_historical_mass=sh.tolist(),
    )
