"""Selective state-space scan: ZOH discretization and the sequential recurrences.

Conventions
-----------
A token sequence ``x`` has shape ``(..., N, D)``. Every one of the D channels
runs the same S-dimensional recurrence, so hidden states have shape
``(..., N, S, D)`` and outputs ``(..., N, D)``. Per token ``i`` the selective
projections give a positive step ``delta_i``, an input vector ``B_i`` and a
readout vector ``C_i`` (both length S)::

    delta_i = softplus(w_delta . x_i + b_delta)
    B_i     = W_B x_i
    C_i     = W_C x_i

``A`` is either a length-S vector (diagonal mode, the default) or an S x S
matrix (dense mode, meant for small S in tests). Discretized steps are stacked
as ``abar (..., N, S)`` or ``(..., N, S, S)``, ``bbar (..., N, S)`` and
``cbar (..., N, S)``.

The recurrences (forward-time indexing, ``h_0 = r_0 = 0``)::

    h_i = abar_i h_{i-1} + bbar_i x_i
    r_i = abar_i (r_{i-1} + 1 * sum_{j<i} x_j)       # residual variant only
    y_i = cbar_i . (h_i + r_i)

so the coefficient on ``x_j`` (j < i) obeys ``m_ij = abar_i m_{i-1,j} + abar_i 1``
while the diagonal stays ``bbar_i``. With ``exclude_diagonal`` the current
token's own term ``bbar_i x_i`` is left out of the read-out state (the carried
state still includes it), which is how the masked backward pass is realized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .tensor_core import DomainError, ShapeError, as_f64, make_rng


class ConditioningError(DomainError):
    """``delta * A`` is too close to singular for the exact ZOH input formula."""


SERIES_THRESHOLD = 1e-6
# (delta A) is refused as numerically singular above this condition number
MAX_CONDITION = 1e12


def softplus(z):
    """``log(1 + exp(z))``, evaluated without overflow."""
    return np.logaddexp(0.0, z)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class SsmParams:
    """Continuous SSM parameters plus the selective projection weights."""

    A: np.ndarray        # (S,) diagonal entries or (S, S)
    W_B: np.ndarray      # (S, D)
    W_C: np.ndarray      # (S, D)
    w_delta: np.ndarray  # (D,)
    b_delta: float = 0.0

    def __post_init__(self):
        for name in ("A", "W_B", "W_C", "w_delta"):
            object.__setattr__(self, name, as_f64(getattr(self, name)))
        object.__setattr__(self, "b_delta", float(self.b_delta))
        S = self.A.shape[0]
        if self.A.ndim == 2 and self.A.shape != (S, S) or self.A.ndim not in (1, 2):
            raise ShapeError(f"A must be (S,) or (S, S), got {self.A.shape}")
        D = self.w_delta.shape[0]
        if self.W_B.shape != (S, D) or self.W_C.shape != (S, D) or self.w_delta.ndim != 1:
            raise ShapeError(
                f"inconsistent shapes A={self.A.shape} W_B={self.W_B.shape} "
                f"W_C={self.W_C.shape} w_delta={self.w_delta.shape}"
            )
        if not np.all(np.isfinite(self.A)):
            raise DomainError("A must be finite")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def depth(self) -> int:
        return self.w_delta.shape[0]

    @property
    def dense(self) -> bool:
        return self.A.ndim == 2

    @classmethod
    def random(cls, rng: np.random.Generator, state_dim: int, depth: int, dense: bool = False):
        """Random well-conditioned parameters with a stable A."""
        if dense:
            Q, _ = np.linalg.qr(rng.normal(size=(state_dim, state_dim)))
            lam = -rng.uniform(0.2, 2.0, size=state_dim)
            A = Q @ np.diag(lam) @ Q.T + 0.1 * rng.normal(size=(state_dim, state_dim))
        else:
            A = -rng.uniform(0.2, 2.0, size=state_dim)
        scale = 1.0 / np.sqrt(depth)
        return cls(
            A=A,
            W_B=rng.normal(scale=scale, size=(state_dim, depth)),
            W_C=rng.normal(scale=scale, size=(state_dim, depth)),
            w_delta=rng.normal(scale=0.5 * scale, size=depth),
            b_delta=float(rng.uniform(-2.0, 0.5)),
        )

    def selective(self, x):
        """Per-token ``(delta, B, C)`` for tokens ``x`` of shape ``(..., N, D)``."""
        x = as_f64(x)
        if x.shape[-1] != self.depth:
            raise ShapeError(f"token depth {x.shape[-1]} does not match parameters ({self.depth})")
        pre = (x @ self.w_delta[:, None])[..., 0] + self.b_delta
        return softplus(pre), x @ self.W_B.T, x @ self.W_C.T


@dataclass(frozen=True)
class DiscretizedStep:
    abar: np.ndarray  # (S,) or (S, S)
    bbar: np.ndarray  # (S,)
    cbar: np.ndarray  # (S,)
    delta: float


@dataclass(frozen=True)
class ScanOutput:
    """Scan result in forward positions.

    ``h`` is the plain recurrence state that is read out (diagonal term removed
    when masked), ``r`` the residual accumulator (zeros when unused) and
    ``y = cbar . (h + r)`` per direction.
    """

    h: np.ndarray  # (..., N, S, D)
    r: np.ndarray  # (..., N, S, D)
    y: np.ndarray  # (..., N, D)

    @property
    def state(self) -> np.ndarray:
        return self.h + self.r


def phi1(z):
    """``(exp(z) - 1) / z`` with the two-term series below the threshold."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def phi1_grad(z):
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < 1e-3
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z**3 / 30.0
    return np.where(small, series, exact)


def zoh(delta, A, B):
    """Zero-order-hold discretization for a stack of steps.

    ``delta`` has shape ``(..., N)`` and ``B`` shape ``(..., N, S)``. Returns
    ``(abar, bbar)``.
    """
    delta = as_f64(delta)
    A = as_f64(A)
    B = as_f64(B)
    if np.any(delta <= 0):
        raise DomainError("delta must be positive")
    if A.ndim == 1:
        z = delta[..., None] * A
        abar = np.exp(z)
        bbar = phi1(z) * delta[..., None] * B
        return abar, bbar
    S = A.shape[0]
    flat_d = delta.reshape(-1)
    flat_B = B.reshape(-1, S)
    abar = np.empty((flat_d.size, S, S))
    bbar = np.empty((flat_d.size, S))
    eye = np.eye(S)
    for n, (d, b) in enumerate(zip(flat_d, flat_B)):
        dA = d * A
        abar[n] = scipy.linalg.expm(dA)
        if np.max(np.abs(dA)) < SERIES_THRESHOLD:
            bbar[n] = d * b + 0.5 * dA @ (d * b)
            continue
        if np.linalg.cond(dA) > MAX_CONDITION:
            raise ConditioningError(f"delta*A is numerically singular (step {n}, delta={d:.3g})")
        bbar[n] = np.linalg.solve(dA, (abar[n] - eye) @ (d * b))
    return abar.reshape(delta.shape + (S, S)), bbar.reshape(B.shape)


def zoh_vjp(delta, A, B, g_abar, g_bbar):
    """Adjoint of :func:`zoh` in diagonal mode: ``(g_delta, g_A, g_B)``."""
    z = delta[..., None] * A
    abar = np.exp(z)
    p = phi1(z)
    g_z = g_abar * abar + g_bbar * delta[..., None] * B * phi1_grad(z)
    g_delta = (g_z * A).sum(-1) + (g_bbar * p * B).sum(-1)
    g_A = (g_z * delta[..., None]).reshape(-1, A.shape[0]).sum(0)
    g_B = g_bbar * p * delta[..., None]
    return g_delta, g_A, g_B


def discretize(params: SsmParams, token) -> DiscretizedStep:
    token = as_f64(token)
    if token.shape != (params.depth,):
        raise ShapeError(f"token shape {token.shape} does not match depth {params.depth}")
    delta, B, C = params.selective(token[None])
    abar, bbar = zoh(delta, params.A, B)
    return DiscretizedStep(abar=abar[0], bbar=bbar[0], cbar=C[0], delta=float(delta[0]))


def discretize_sequence(params: SsmParams, x) -> list[DiscretizedStep]:
    """Discretize every token of a single ``(N, D)`` sequence."""
    x = as_f64(x)
    if x.ndim != 2:
        raise ShapeError(f"expected a single (N, D) sequence, got {x.shape}")
    delta, B, C = params.selective(x)
    abar, bbar = zoh(delta, params.A, B)
    return [DiscretizedStep(abar[i], bbar[i], C[i], float(delta[i])) for i in range(x.shape[0])]


def stack_steps(steps):
    abar = np.stack([s.abar for s in steps])
    bbar = np.stack([s.bbar for s in steps])
    cbar = np.stack([s.cbar for s in steps])
    return abar, bbar, cbar


def _evolve(abar_i, v, dense):
    # abar_i: (..., S) or (..., S, S); v: (..., S, D)
    if dense:
        return abar_i @ v
    return abar_i[..., :, None] * v


def _check_steps(abar, bbar, cbar, x):
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("scan needs a sequence of at least one token")
    N = x.shape[-2]
    dense = abar.ndim == bbar.ndim + 1
    if bbar.shape[-2] != N or cbar.shape != bbar.shape or abar.shape[-2 - dense] != N:
        raise ShapeError(
            f"steps abar={abar.shape} bbar={bbar.shape} cbar={cbar.shape} do not match x={x.shape}"
        )
    return dense


def run_scan(abar, bbar, cbar, x, *, residual=False, exclude_diagonal=False, reverse=False) -> ScanOutput:
    """Sequential scan over precomputed discretized steps.

    With ``reverse`` the recurrence runs over ``x_N, ..., x_1`` and the result
    is re-indexed to forward positions.
    """
    abar, bbar, cbar, x = (as_f64(t) for t in (abar, bbar, cbar, x))
    dense = _check_steps(abar, bbar, cbar, x)
    if reverse:
        ax = -3 if dense else -2
        out = run_scan(
            np.flip(abar, ax), np.flip(bbar, -2), np.flip(cbar, -2), np.flip(x, -2),
            residual=residual, exclude_diagonal=exclude_diagonal,
        )
        return ScanOutput(np.flip(out.h, -3).copy(), np.flip(out.r, -3).copy(), np.flip(out.y, -2).copy())

    N, D = x.shape[-2:]
    S = bbar.shape[-1]
    batch = x.shape[:-2]
    hs = np.zeros(batch + (N, S, D))
    rs = np.zeros(batch + (N, S, D))
    h = np.zeros(batch + (S, D))
    r = np.zeros(batch + (S, D))
    prefix = np.zeros(batch + (D,))
    for i in range(N):
        a_i = abar[..., i, :, :] if dense else abar[..., i, :]
        carried = _evolve(a_i, h, dense)
        h = carried + bbar[..., i, :, None] * x[..., i, None, :]
        if residual:
            r = _evolve(a_i, r + prefix[..., None, :], dense)
            prefix = prefix + x[..., i, :]
        hs[..., i, :, :] = carried if exclude_diagonal else h
        rs[..., i, :, :] = r
    y = np.einsum("...nk,...nkd->...nd", cbar, hs + rs)
    return ScanOutput(hs, rs, y)


def run_scan_vjp(abar, bbar, cbar, x, gy, *, residual=False, exclude_diagonal=False, reverse=False):
    """Reverse-mode adjoint of :func:`run_scan` (diagonal ``abar`` only).

    Returns ``(g_abar, g_bbar, g_cbar, g_x)`` for the output cotangent ``gy``.
    """
    if reverse:
        grads = run_scan_vjp(
            *(np.flip(t, -2) for t in (abar, bbar, cbar, x, gy)),
            residual=residual, exclude_diagonal=exclude_diagonal,
        )
        return tuple(np.flip(g, -2).copy() for g in grads)
    if abar.ndim != bbar.ndim:
        raise NotImplementedError("analytic scan gradients cover diagonal A only")

    N, D = x.shape[-2:]
    S = bbar.shape[-1]
    batch = x.shape[:-2]
    h_prev = np.zeros(batch + (N, S, D))
    r_prev = np.zeros(batch + (N, S, D))
    p_prev = np.zeros(batch + (N, D))
    outs = np.zeros(batch + (N, S, D))
    h = np.zeros(batch + (S, D))
    r = np.zeros(batch + (S, D))
    prefix = np.zeros(batch + (D,))
    for i in range(N):
        a_i = abar[..., i, :, None]
        h_prev[..., i, :, :] = h
        r_prev[..., i, :, :] = r
        p_prev[..., i, :] = prefix
        carried = a_i * h
        h = carried + bbar[..., i, :, None] * x[..., i, None, :]
        if residual:
            r = a_i * (r + prefix[..., None, :])
            prefix = prefix + x[..., i, :]
        outs[..., i, :, :] = (carried if exclude_diagonal else h) + r

    g_cbar = np.einsum("...nkd,...nd->...nk", outs, gy)
    g_abar = np.zeros_like(abar)
    g_bbar = np.zeros_like(bbar)
    g_x = np.zeros_like(x)
    gh = np.zeros(batch + (S, D))
    gr = np.zeros(batch + (S, D))
    gp = np.zeros(batch + (D,))
    for i in range(N - 1, -1, -1):
        a_i = abar[..., i, :, None]
        go = cbar[..., i, :, None] * gy[..., i, None, :]
        gh_i = gh if exclude_diagonal else gh + go
        ga = (gh_i * h_prev[..., i, :, :]).sum(-1)
        g_bbar[..., i, :] = (gh_i * x[..., i, None, :]).sum(-1)
        gx = (gh_i * bbar[..., i, :, None]).sum(-2)
        gh = a_i * gh_i
        if exclude_diagonal:
            ga = ga + (go * h_prev[..., i, :, :]).sum(-1)
            gh = gh + a_i * go
        if residual:
            gr_i = gr + go
            ga = ga + (gr_i * (r_prev[..., i, :, :] + p_prev[..., i, None, :])).sum(-1)
            gx = gx + gp
            gp = gp + (a_i * gr_i).sum(-2)
            gr = a_i * gr_i
        g_abar[..., i, :] = ga
        g_x[..., i, :] = gx
    return g_abar, g_bbar, g_cbar, g_x


def _steps(params: SsmParams, x):
    delta, B, C = params.selective(x)
    abar, bbar = zoh(delta, params.A, B)
    return abar, bbar, C


def _check_nonempty(x):
    x = as_f64(x)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ValueError("scan needs a sequence of at least one token")
    return x


def scan_forward(params: SsmParams, x) -> ScanOutput:
    x = _check_nonempty(x)
    return run_scan(*_steps(params, x), x)


def scan_backward(params: SsmParams, x) -> ScanOutput:
    x = _check_nonempty(x)
    return run_scan(*_steps(params, x), x, reverse=True)


def scan_forward_residual(params: SsmParams, x) -> ScanOutput:
    x = _check_nonempty(x)
    return run_scan(*_steps(params, x), x, residual=True)


def _check_pair(params_f: SsmParams, params_b: SsmParams):
    if params_f.state_dim != params_b.state_dim or params_f.depth != params_b.depth:
        raise ShapeError(
            f"direction parameters disagree: S={params_f.state_dim}/{params_b.state_dim}, "
            f"D={params_f.depth}/{params_b.depth}"
        )


def _combine(fwd: ScanOutput, bwd: ScanOutput) -> ScanOutput:
    return ScanOutput(fwd.h + bwd.h, fwd.r + bwd.r, fwd.y + bwd.y)


def scan_bidirectional(params_f: SsmParams, params_b: SsmParams, x, masked: bool = False,
                       residual: bool = False) -> ScanOutput:
    """Forward plus backward scan, hidden states and outputs summed per token.

    ``masked`` drops the backward direction's diagonal (self) term so each
    token's self-similarity is counted once, by the forward direction.
    """
    _check_pair(params_f, params_b)
    x = _check_nonempty(x)
    fwd = run_scan(*_steps(params_f, x), x, residual=residual)
    bwd = run_scan(*_steps(params_b, x), x, residual=residual, exclude_diagonal=masked, reverse=True)
    return _combine(fwd, bwd)


def scan_block(params_f: SsmParams, params_b: SsmParams, x, *, masked: bool = True,
               residual: bool = True) -> np.ndarray:
    """Forward residual scan plus masked backward residual scan, summed per token.

    The toggles exist for ablations; with both off this is the plain
    bidirectional combination.
    """
    return scan_bidirectional(params_f, params_b, x, masked=masked, residual=residual).y


def random_instance(seed: int, max_len: int = 8, max_state: int = 4, max_depth: int = 4,
                    dense: bool = False):
    """Random ``(params_f, params_b, x)`` with N <= max_len, S <= max_state, D <= max_depth."""
    rng = make_rng(seed, stream=1)
    N = int(rng.integers(1, max_len + 1))
    S = int(rng.integers(1, max_state + 1))
    D = int(rng.integers(1, max_depth + 1))
    params_f = SsmParams.random(rng, S, D, dense=dense)
    params_b = SsmParams.random(rng, S, D, dense=dense)
    x = rng.normal(size=(N, D))
    return params_f, params_b, x
