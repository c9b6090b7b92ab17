"""Verification suites behind the ``verify``, ``structure`` and fixture commands.

Each check records its worst observed error next to its tolerance. A tolerance
of ``0.0`` means exact (bitwise) agreement is required.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np

from . import attention_oracle as O
from . import ssm_scan as K
from .tensor_core import make_rng, read_tensor, write_tensor

SCAN_TOL = 1e-8
EXPM_TOL = 1e-10
CONTINUITY_TOL = 1e-9
ATTENTION_TOL = 1e-12
DECAY_TOL = 1e-10
RESIDUAL_LAW_RTOL = 1e-12


@dataclass
class Check:
    tolerance: float
    max_error: float = 0.0
    cases: int = 0

    def update(self, err: float) -> None:
        self.cases += 1
        if not err <= self.max_error:  # also catches NaN
            self.max_error = float(err)

    @property
    def passed(self) -> bool:
        return self.cases > 0 and self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "max_error": self.max_error,
                "cases": self.cases, "passed": self.passed}


@dataclass
class Suite:
    checks: dict = field(default_factory=dict)

    def record(self, name: str, err: float, tolerance: float) -> None:
        self.checks.setdefault(name, Check(tolerance)).update(float(err))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": {k: c.to_dict() for k, c in self.checks.items()}}


def _maxabs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))


def _mismatch(a, b) -> float:
    """0.0 when bitwise equal, otherwise the max-abs difference (or inf)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return float("inf")
    return 0.0 if np.array_equal(a, b) else max(_maxabs(a, b), np.finfo(float).tiny)


SCAN_VARIANTS = ("forward", "backward", "bidirectional", "bidirectional_masked", "forward_residual", "block")


def scan_and_oracle(variant: str, pf: K.SsmParams, pb: K.SsmParams, x):
    """``(scan output y, scan state or None, oracle matrix)`` for one variant."""
    sf = K.discretize_sequence(pf, x)
    sb = K.discretize_sequence(pb, x)
    if variant == "forward":
        out = K.scan_forward(pf, x)
        return out.y, out.state, O.build_M_forward(sf)
    if variant == "backward":
        out = K.scan_backward(pb, x)
        return out.y, out.state, O.build_M_backward(sb)
    if variant == "bidirectional":
        out = K.scan_bidirectional(pf, pb, x)
        return out.y, out.state, O.build_M_bidirectional(sf, sb)
    if variant == "bidirectional_masked":
        out = K.scan_bidirectional(pf, pb, x, masked=True)
        return out.y, out.state, O.build_M_bidirectional(sf, sb, masked=True)
    if variant == "forward_residual":
        out = K.scan_forward_residual(pf, x)
        return out.y, out.state, O.build_M_residual(sf)
    if variant == "block":
        return K.scan_block(pf, pb, x), None, O.build_M_block(sf, sb)
    raise ValueError(f"unknown scan variant {variant!r}")


def probe_matrix(steps, residual: bool = False, reverse: bool = False, masked: bool = False) -> np.ndarray:
    """Recover the ``(N, N, S)`` coefficient blocks of the sequential scan.

    Runs the scan with frozen steps on the identity sequence (D = N), so
    channel j of the read-out state at position i is the coefficient on x_j.
    """
    abar, bbar, cbar = K.stack_steps(steps)
    N = bbar.shape[0]
    out = K.run_scan(abar, bbar, cbar, np.eye(N), residual=residual, exclude_diagonal=masked, reverse=reverse)
    return np.transpose(out.state, (0, 2, 1))


def check_oracle_equivalence(suite: Suite, pf, pb, x) -> None:
    for variant in SCAN_VARIANTS:
        y, state, M = scan_and_oracle(variant, pf, pb, x)
        err = _maxabs(y, M.apply(x))
        if state is not None:
            err = max(err, _maxabs(state, M.hidden(x)))
        suite.record(f"oracle.{variant}", err, SCAN_TOL)


def check_structure_laws(suite: Suite, pf, pb, x) -> None:
    sf = K.discretize_sequence(pf, x)
    sb = K.discretize_sequence(pb, x)
    Mf = O.build_M_forward(sf)
    N = Mf.n
    upper = np.triu(np.ones((N, N), dtype=bool), 1)
    suite.record("law.forward_strictly_lower", float(np.abs(Mf.blocks[upper]).max(initial=0.0)), 0.0)
    masked = O.build_M_bidirectional(sf, sb, masked=True)
    plain = O.build_M_bidirectional(sf, sb, masked=False)
    idx = np.arange(N)
    off = ~np.eye(N, dtype=bool)
    suite.record("law.masked_diag_equals_forward_diag",
                 max(_mismatch(masked.blocks[idx, idx], Mf.blocks[idx, idx]),
                     _mismatch(masked.weights[idx, idx], Mf.weights[idx, idx])), 0.0)
    suite.record("law.masked_offdiag_equals_unmasked",
                 max(_mismatch(masked.blocks[off], plain.blocks[off]),
                     _mismatch(masked.weights[off], plain.weights[off])), 0.0)
    # sequential masked scan: probed diagonal must be the forward diagonal
    probed = probe_matrix(sf) + probe_matrix(sb, reverse=True, masked=True)
    suite.record("law.masked_scan_probe_matches_oracle", _maxabs(probed, masked.blocks), SCAN_TOL)
    x1 = x[:1]
    single = K.scan_bidirectional(pf, pb, x1, masked=True)
    suite.record("law.single_token_masked_equals_forward", _mismatch(single.y, K.scan_forward(pf, x1).y), 0.0)
    # causality: changing x_j leaves every y_i with i < j untouched
    j = N - 1
    xp = x.copy()
    xp[j] += 1.0
    suite.record("law.forward_causality",
                 _mismatch(K.scan_forward(pf, xp).y[:j], K.scan_forward(pf, x).y[:j]), 0.0)


def _residual_law_error(blocks, steps) -> float:
    worst = 0.0
    N = blocks.shape[0]
    for j in range(N):
        for i in range(j + 1, N):
            a = steps[i].abar
            a_vec = a.sum(axis=1) if a.ndim == 2 else a
            evolved = a @ blocks[i - 1, j] if a.ndim == 2 else a * blocks[i - 1, j]
            expected = evolved + a_vec
            scale = np.maximum(1.0, np.abs(blocks[i, j]))
            worst = max(worst, float(np.max(np.abs(blocks[i, j] - expected) / scale)))
    return worst


def check_residual_law(suite: Suite, pf, x) -> None:
    steps = K.discretize_sequence(pf, x)
    M = O.build_M_residual(steps)
    suite.record("law.residual_recurrence_oracle", _residual_law_error(M.blocks, steps), RESIDUAL_LAW_RTOL)
    probed = probe_matrix(steps, residual=True)
    suite.record("law.residual_recurrence_scan", _residual_law_error(probed, steps), RESIDUAL_LAW_RTOL)
    idx = np.arange(M.n)
    suite.record("law.residual_diagonal_is_bbar",
                 _mismatch(M.blocks[idx, idx], np.stack([s.bbar for s in steps])), 0.0)


def mp_expm(a) -> np.ndarray:
    """Matrix exponential in 40-digit arithmetic, independent of scipy."""
    with mpmath.workdps(40):
        e = mpmath.expm(mpmath.matrix(np.atleast_2d(a).tolist()))
        return np.array(e.tolist(), dtype=np.float64)


def zoh_input_reference(dA, dB) -> np.ndarray:
    """``bbar`` from the top-right block of ``expm([[dA, dB], [0, 0]])``."""
    S = dA.shape[0]
    aug = np.zeros((S + 1, S + 1))
    aug[:S, :S] = dA
    aug[:S, S] = dB
    return mp_expm(aug)[:S, S]


def check_discretization(suite: Suite, rng) -> None:
    for dense in (False, True):
        S = int(rng.integers(1, 5))
        D = int(rng.integers(1, 5))
        params = K.SsmParams.random(rng, S, D, dense=dense)
        token = rng.normal(size=D)
        step = K.discretize(params, token)
        A = params.A if dense else np.diag(params.A)
        ref_abar = mp_expm(step.delta * A)
        got = step.abar if dense else np.diag(step.abar)
        suite.record("discretize.abar_vs_expm", _maxabs(got, ref_abar), EXPM_TOL)
        _, B, _ = params.selective(token[None])
        ref_bbar = zoh_input_reference(step.delta * A, step.delta * B[0])
        suite.record("discretize.bbar_vs_augmented_expm", _maxabs(step.bbar, ref_bbar), EXPM_TOL)
    # branch continuity on both sides of the series threshold
    t = K.SERIES_THRESHOLD
    for z in (t * (1 - 1e-9), t * (1 + 1e-9), -t * (1 - 1e-9), -t * (1 + 1e-9)):
        dB = float(rng.uniform(-1.0, 1.0))
        below = dB * (1.0 + 0.5 * z)
        above = dB * np.expm1(z) / z
        diag = K.phi1(np.array([z]))[0] * dB
        dense_abar, dense_bbar = K.zoh(np.array([1.0]), np.array([[z]]), np.array([[dB]]))
        suite.record("discretize.series_continuity",
                     max(abs(below - above), abs(diag - above), abs(dense_bbar[0, 0] - above)), CONTINUITY_TOL)


def check_decay(suite: Suite, rng) -> None:
    N = int(rng.integers(2, 9))
    S = int(rng.integers(1, 5))
    c = float(rng.uniform(0.05, 0.95))
    b1 = rng.normal(size=S)
    steps = [K.DiscretizedStep(np.full(S, c), b1 if i == 0 else rng.normal(size=S), rng.normal(size=S), 0.1)
             for i in range(N)]
    M = O.build_M_forward(steps)
    probed = probe_matrix(steps)
    for i in range(N):
        expected = c**i * np.linalg.norm(b1)
        suite.record("law.historical_decay",
                     max(abs(np.linalg.norm(M.blocks[i, 0]) - expected),
                         abs(np.linalg.norm(probed[i, 0]) - expected)), DECAY_TOL)


def check_attention(suite: Suite, rng) -> None:
    N = int(rng.integers(1, 9))
    Dx = int(rng.integers(1, 5))
    ref = O.AttentionRef.random(rng, Dx, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    x = rng.normal(size=(N, Dx))
    Y, S = O.self_attention(ref, x)
    suite.record("attention.sum_form_equals_matrix_form", _maxabs(O.self_attention_sum_form(ref, x), Y),
                 ATTENTION_TOL)
    suite.record("attention.rows_sum_to_one", _maxabs(S.sum(axis=1), 1.0), ATTENTION_TOL)
    suite.record("attention.left_right_commutation", _maxabs((S @ x) @ ref.W_V.T, S @ (x @ ref.W_V.T)),
                 ATTENTION_TOL)


def run_verify(cases: int = 1000, seed: int = 0) -> Suite:
    """Oracle-equivalence and invariant suite over ``cases`` random instances."""
    suite = Suite()
    seeds = make_rng(seed, stream=100).integers(0, 2**63, size=cases)
    rng = make_rng(seed, stream=101)
    for n, s in enumerate(seeds):
        pf, pb, x = K.random_instance(int(s), dense=(n % 4 == 3))
        check_oracle_equivalence(suite, pf, pb, x)
        check_structure_laws(suite, pf, pb, x)
        if n < 100:
            check_residual_law(suite, pf, x)
        if n < 50:
            check_discretization(suite, rng)
            check_decay(suite, rng)
            check_attention(suite, rng)
    return suite


# --- structure report ----------------------------------------------------------

def structure_report(seed: int = 0, n: int = 8, state_dim: int = 2, depth: int = 3):
    """Coefficient matrices of every variant on one instance, plus their statistics.

    Returns ``(report_dict, matrices)`` where ``matrices`` maps names to arrays.
    """
    rng = make_rng(seed, stream=110)
    pf = K.SsmParams.random(rng, state_dim, depth)
    pb = K.SsmParams.random(rng, state_dim, depth)
    x = rng.normal(size=(n, depth))
    ref = O.AttentionRef.random(rng, depth, depth, depth)
    _, S = O.self_attention(ref, x)
    sf = K.discretize_sequence(pf, x)
    sb = K.discretize_sequence(pb, x)
    variants = {
        "M_forward": O.build_M_forward(sf),
        "M_backward": O.build_M_backward(sb),
        "M_bi": O.build_M_bidirectional(sf, sb),
        "M_bi_masked": O.build_M_bidirectional(sf, sb, masked=True),
        "M_residual": O.build_M_residual(sf),
        "M_block": O.build_M_block(sf, sb),
    }
    report = {"seed": seed, "n": n, "state_dim": state_dim, "depth": depth,
              "variants": {k: O.compare_structures(m, S).to_dict() for k, m in variants.items()}}
    matrices = {"S_attention": S}
    for k, m in variants.items():
        matrices[f"{k}_weights"] = m.weights
        matrices[f"{k}_blocks"] = m.blocks
    return report, matrices


# --- fixtures ------------------------------------------------------------------

PARAM_FIELDS = ("A", "W_B", "W_C", "w_delta", "b_delta")


def write_fixtures(directory, seed: int = 0, count: int = 8) -> list:
    """One sub-directory per case: inputs, parameters and oracle outputs (MPTENSOR)."""
    directory = Path(directory)
    seeds = make_rng(seed, stream=120).integers(0, 2**63, size=count)
    written = []
    for n, s in enumerate(seeds):
        pf, pb, x = K.random_instance(int(s))
        case = directory / f"case_{n:03d}"
        case.mkdir(parents=True, exist_ok=True)
        write_tensor(case / "x.mpt", x)
        for tag, p in (("fwd", pf), ("bwd", pb)):
            for f in PARAM_FIELDS:
                write_tensor(case / f"{tag}.{f}.mpt", np.atleast_1d(getattr(p, f)))
        for variant in SCAN_VARIANTS:
            _, _, M = scan_and_oracle(variant, pf, pb, x)
            write_tensor(case / f"expected.{variant}.mpt", M.apply(x))
        written.append(case)
    return written


def _load_params(case: Path, tag: str) -> K.SsmParams:
    vals = {f: read_tensor(case / f"{tag}.{f}.mpt") for f in PARAM_FIELDS}
    vals["b_delta"] = float(vals["b_delta"][0])
    return K.SsmParams(**vals)


def check_fixtures(directory) -> dict:
    """Worst max-abs error per scan variant over every case in ``directory``."""
    worst = {v: 0.0 for v in SCAN_VARIANTS}
    cases = sorted(p for p in Path(directory).iterdir() if p.is_dir())
    if not cases:
        raise FileNotFoundError(f"no fixture cases under {directory}")
    for case in cases:
        x = read_tensor(case / "x.mpt")
        pf, pb = _load_params(case, "fwd"), _load_params(case, "bwd")
        outs = {
            "forward": K.scan_forward(pf, x).y,
            "backward": K.scan_backward(pb, x).y,
            "bidirectional": K.scan_bidirectional(pf, pb, x).y,
            "bidirectional_masked": K.scan_bidirectional(pf, pb, x, masked=True).y,
            "forward_residual": K.scan_forward_residual(pf, x).y,
            "block": K.scan_block(pf, pb, x),
        }
        for v, y in outs.items():
            worst[v] = max(worst[v], _maxabs(y, read_tensor(case / f"expected.{v}.mpt")))
    return worst
