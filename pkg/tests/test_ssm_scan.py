import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambapro import attention_oracle as O
from mambapro.ssm_scan import (
    SERIES_THRESHOLD,
    ConditioningError,
    SsmParams,
    discretize,
    discretize_sequence,
    phi1,
    random_instance,
    run_scan,
    scan_backward,
    scan_bidirectional,
    scan_block,
    scan_forward,
    scan_forward_residual,
    softplus,
    softplus_inverse,
    stack_steps,
    zoh,
)
from mambapro.tensor_core import DomainError, ShapeError, make_rng

seeds = st.integers(0, 2**63 - 1)


def scalar_params(delta, A=-1.0, B=1.0, C=1.0):
    """One-channel parameters whose step size is ``delta`` for the token x = 1."""
    return SsmParams(A=[A], W_B=[[B]], W_C=[[C]], w_delta=[0.0], b_delta=float(softplus_inverse(delta)))


def test_discretize_scalar_closed_form():
    step = discretize(scalar_params(0.1), np.array([1.0]))
    assert step.delta == pytest.approx(0.1, abs=1e-15)
    assert step.abar[0] == pytest.approx(math.exp(-0.1), abs=1e-15)
    assert step.bbar[0] == pytest.approx(1.0 - math.exp(-0.1), abs=1e-15)
    assert round(step.abar[0], 7) == 0.9048374
    assert round(step.bbar[0], 7) == 0.0951626


def test_zoh_zero_A_gives_identity():
    B = np.array([[0.3, -1.2]])
    abar, bbar = zoh(np.array([0.25]), np.zeros(2), B)
    np.testing.assert_array_equal(abar, np.ones((1, 2)))
    np.testing.assert_array_equal(bbar, 0.25 * B)
    abar, bbar = zoh(np.array([0.25]), np.zeros((2, 2)), B)
    np.testing.assert_array_equal(abar[0], np.eye(2))
    np.testing.assert_array_equal(bbar, 0.25 * B)


@pytest.mark.parametrize("dense", [False, True])
def test_zoh_small_delta_approaches_identity(dense):
    A = np.diag([-0.5, -2.0]) if dense else np.array([-0.5, -2.0])
    for d in (1e-2, 1e-4, 1e-6, 1e-8):
        abar, _ = zoh(np.array([d]), A, np.ones((1, 2)))
        eye = np.eye(2) if dense else np.ones(2)
        assert np.max(np.abs(abar[0] - eye)) <= 2.0 * d


def test_zoh_dense_matches_diagonal_for_diagonal_A():
    rng = make_rng(3)
    A = -rng.uniform(0.2, 2.0, size=3)
    delta = rng.uniform(0.01, 1.0, size=4)
    B = rng.normal(size=(4, 3))
    a1, b1 = zoh(delta, A, B)
    a2, b2 = zoh(delta, np.diag(A), B)
    np.testing.assert_allclose(np.diagonal(a2, axis1=1, axis2=2), a1, atol=1e-14)
    np.testing.assert_allclose(b2, b1, atol=1e-14)


def test_zoh_dense_singular_raises_conditioning_error():
    with pytest.raises(ConditioningError):
        zoh(np.array([0.5]), np.array([[-1.0, 0.0], [0.0, 0.0]]), np.ones((1, 2)))


def test_zoh_diagonal_handles_zero_entry_per_channel():
    abar, bbar = zoh(np.array([0.5]), np.array([-1.0, 0.0]), np.ones((1, 2)))
    assert abar[0, 1] == 1.0 and bbar[0, 1] == 0.5
    assert bbar[0, 0] == pytest.approx(1.0 - math.exp(-0.5), abs=1e-15)


def test_zoh_rejects_non_positive_delta():
    with pytest.raises(DomainError):
        zoh(np.array([0.0]), np.array([-1.0]), np.ones((1, 1)))


def test_phi1_continuous_across_threshold():
    t = SERIES_THRESHOLD
    z = np.array([t * (1 - 1e-12), t * (1 + 1e-12), -t * (1 - 1e-12), -t * (1 + 1e-12)])
    exact = np.expm1(z) / z
    assert np.max(np.abs(phi1(z) - exact)) <= 1e-9


def test_softplus_inverse_round_trip():
    y = np.array([1e-4, 0.01, 0.1, 1.0, 30.0])
    np.testing.assert_allclose(softplus(softplus_inverse(y)), y, rtol=1e-13)


def _manual_steps(params, x):
    steps = discretize_sequence(params, x)
    return [(s.abar, s.bbar, s.cbar) for s in steps]


def test_forward_single_token():
    pf, _, x = random_instance(11)
    x1 = x[:1]
    out = scan_forward(pf, x1)
    (a1, b1, c1), = _manual_steps(pf, x1)
    np.testing.assert_allclose(out.h[0], np.outer(b1, x1[0]), atol=1e-15)
    np.testing.assert_allclose(out.y[0], c1 @ np.outer(b1, x1[0]), atol=1e-15)


def test_forward_two_tokens_unrolled():
    rng = make_rng(12)
    p = SsmParams.random(rng, 3, 2)
    x = rng.normal(size=(2, 2))
    (a1, b1, c1), (a2, b2, c2) = _manual_steps(p, x)
    h2 = a2[:, None] * np.outer(b1, x[0]) + np.outer(b2, x[1])
    out = scan_forward(p, x)
    np.testing.assert_allclose(out.h[1], h2, atol=1e-14)
    np.testing.assert_allclose(out.y[1], c2 @ h2, atol=1e-14)


def test_dense_forward_two_tokens_unrolled():
    rng = make_rng(13)
    p = SsmParams.random(rng, 3, 2, dense=True)
    x = rng.normal(size=(2, 2))
    (a1, b1, c1), (a2, b2, c2) = _manual_steps(p, x)
    h2 = a2 @ np.outer(b1, x[0]) + np.outer(b2, x[1])
    np.testing.assert_allclose(scan_forward(p, x).h[1], h2, atol=1e-14)


def _instance(seed, n, s, d, dense=False):
    rng = make_rng(seed, stream=7)
    return (SsmParams.random(rng, s, d, dense=dense), SsmParams.random(rng, s, d, dense=dense),
            rng.normal(size=(n, d)))


def test_forward_matches_oracle_random():
    pf, _, x = _instance(0, 4, 2, 3)
    M = O.build_M_forward(discretize_sequence(pf, x))
    out = scan_forward(pf, x)
    assert np.max(np.abs(out.y - M.apply(x))) <= 1e-10
    assert np.max(np.abs(out.h - M.hidden(x))) <= 1e-10


def test_backward_single_token_equals_forward():
    pf, _, x = random_instance(21)
    np.testing.assert_array_equal(scan_backward(pf, x[:1]).y, scan_forward(pf, x[:1]).y)


def test_backward_palindrome_mirrors_forward():
    rng = make_rng(22)
    p = SsmParams.random(rng, 3, 2)
    half = rng.normal(size=(3, 2))
    x = np.concatenate([half, half[-2::-1]])  # length 5, x[i] == x[4 - i]
    fwd = scan_forward(p, x).y
    bwd = scan_backward(p, x).y
    np.testing.assert_allclose(bwd, fwd[::-1], atol=1e-14)


def test_backward_matches_oracle_random():
    _, pb, x = _instance(1, 3, 2, 2)
    M = O.build_M_backward(discretize_sequence(pb, x))
    assert np.max(np.abs(scan_backward(pb, x).y - M.apply(x))) <= 1e-10


def test_bidirectional_single_token_masked_is_forward():
    for seed in range(20):
        pf, pb, x = random_instance(seed)
        np.testing.assert_array_equal(scan_bidirectional(pf, pb, x[:1], masked=True).y,
                                      scan_forward(pf, x[:1]).y)


def test_bidirectional_three_tokens_explicit():
    pf, pb, x = _instance(2, 3, 2, 2)
    out = scan_bidirectional(pf, pb, x)
    hf = scan_forward(pf, x).h
    hb = scan_backward(pb, x).h
    np.testing.assert_array_equal(out.h, hf + hb)
    M = O.build_M_bidirectional(discretize_sequence(pf, x), discretize_sequence(pb, x))
    assert np.max(np.abs(out.y - M.apply(x))) <= 1e-10


def test_bidirectional_masked_three_tokens_matrix():
    pf, pb, x = _instance(3, 3, 2, 2)
    sf, sb = discretize_sequence(pf, x), discretize_sequence(pb, x)
    Mf = O.build_M_forward(sf)
    masked = O.build_M_bidirectional(sf, sb, masked=True)
    plain = O.build_M_bidirectional(sf, sb)
    for i in range(3):
        np.testing.assert_array_equal(masked.blocks[i, i], Mf.blocks[i, i])
        for j in range(3):
            if i != j:
                np.testing.assert_array_equal(masked.blocks[i, j], plain.blocks[i, j])
    out = scan_bidirectional(pf, pb, x, masked=True)
    assert np.max(np.abs(out.y - masked.apply(x))) <= 1e-10


def test_bidirectional_shape_mismatch():
    rng = make_rng(4)
    with pytest.raises(ShapeError):
        scan_bidirectional(SsmParams.random(rng, 2, 3), SsmParams.random(rng, 3, 3), np.ones((2, 3)))


def test_residual_single_token_is_plain():
    pf, _, x = random_instance(31)
    np.testing.assert_array_equal(scan_forward_residual(pf, x[:1]).y, scan_forward(pf, x[:1]).y)


def _scalar_coefficients(abar, bbar):
    """Residual coefficients on x_1 at every position, read from the scan."""
    n = len(abar)
    x = np.zeros((n, 1))
    x[0] = 1.0
    out = run_scan(np.array(abar)[:, None], np.array(bbar)[:, None], np.ones((n, 1)), x, residual=True)
    return out.state[:, 0, 0]


def test_residual_scalar_two_tokens():
    a, b = 0.5, 0.3
    m = _scalar_coefficients([0.9, a], [b, 0.7])
    assert m[0] == b
    assert m[1] == pytest.approx(0.65, abs=1e-15)  # a*b + a


def test_residual_scalar_three_tokens_split():
    a3 = 0.4
    m = _scalar_coefficients([0.9, 0.6, a3], [0.3, 0.7, 1.1])
    assert m[2] == pytest.approx(a3 * m[1] + a3, abs=1e-15)


def test_residual_matches_oracle_random():
    pf, _, x = _instance(5, 4, 3, 2)
    M = O.build_M_residual(discretize_sequence(pf, x))
    out = scan_forward_residual(pf, x)
    assert np.max(np.abs(out.y - M.apply(x))) <= 1e-10
    assert np.max(np.abs(out.state - M.hidden(x))) <= 1e-10


def test_block_single_token_is_forward_residual():
    pf, pb, x = random_instance(41)
    np.testing.assert_array_equal(scan_block(pf, pb, x[:1]), scan_forward_residual(pf, x[:1]).y)


def test_block_linear_in_x_with_frozen_steps():
    pf, _, x = _instance(6, 5, 2, 3)
    abar, bbar, cbar = stack_steps(discretize_sequence(pf, x))
    for kw in (dict(), dict(residual=True), dict(residual=True, exclude_diagonal=True, reverse=True)):
        y1 = run_scan(abar, bbar, cbar, x, **kw).y
        y2 = run_scan(abar, bbar, cbar, 2.0 * x, **kw).y
        np.testing.assert_allclose(y2, 2.0 * y1, rtol=1e-14, atol=1e-14)


def test_block_matches_oracle_random():
    pf, pb, x = _instance(7, 3, 2, 2)
    M = O.build_M_block(discretize_sequence(pf, x), discretize_sequence(pb, x))
    assert np.max(np.abs(scan_block(pf, pb, x) - M.apply(x))) <= 1e-10


@pytest.mark.parametrize("fn", [scan_forward, scan_backward, scan_forward_residual])
def test_empty_sequence_rejected(fn):
    pf, _, _ = random_instance(0)
    with pytest.raises(ValueError):
        fn(pf, np.zeros((0, pf.depth)))


def test_token_depth_mismatch():
    pf, _, _ = random_instance(0, max_depth=2)
    with pytest.raises(ShapeError):
        scan_forward(pf, np.zeros((3, pf.depth + 1)))


def _variants(pf, pb, x):
    sf, sb = discretize_sequence(pf, x), discretize_sequence(pb, x)
    return [
        (scan_forward(pf, x).y, O.build_M_forward(sf)),
        (scan_backward(pb, x).y, O.build_M_backward(sb)),
        (scan_bidirectional(pf, pb, x).y, O.build_M_bidirectional(sf, sb)),
        (scan_bidirectional(pf, pb, x, masked=True).y, O.build_M_bidirectional(sf, sb, masked=True)),
        (scan_forward_residual(pf, x).y, O.build_M_residual(sf)),
        (scan_block(pf, pb, x), O.build_M_block(sf, sb)),
    ]


@settings(max_examples=150, deadline=None)
@given(seeds, st.booleans())
def test_every_variant_matches_oracle(seed, dense):
    pf, pb, x = random_instance(seed, dense=dense)
    for y, M in _variants(pf, pb, x):
        assert np.max(np.abs(y - M.apply(x))) < 1e-8


@settings(max_examples=100, deadline=None)
@given(seeds, st.data())
def test_forward_causality(seed, data):
    pf, _, x = random_instance(seed)
    n = x.shape[0]
    j = data.draw(st.integers(0, n - 1))
    x2 = x.copy()
    x2[j] = 0.0
    for fn in (scan_forward, scan_forward_residual):
        np.testing.assert_array_equal(fn(pf, x2).y[:j], fn(pf, x).y[:j])


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_bidirectional_is_sum_of_directions(seed):
    pf, pb, x = random_instance(seed)
    for residual in (False, True):
        out = scan_bidirectional(pf, pb, x, residual=residual)
        f = run_scan(*stack_steps(discretize_sequence(pf, x)), x, residual=residual)
        b = run_scan(*stack_steps(discretize_sequence(pb, x)), x, residual=residual, reverse=True)
        np.testing.assert_array_equal(out.y, f.y + b.y)


def test_random_instance_bounds_and_determinism():
    for seed in range(50):
        pf, pb, x = random_instance(seed)
        assert 1 <= x.shape[0] <= 8 and 1 <= pf.state_dim <= 4 and 1 <= pf.depth <= 4
    a = random_instance(99)
    b = random_instance(99)
    np.testing.assert_array_equal(a[2], b[2])
    np.testing.assert_array_equal(a[0].W_B, b[0].W_B)
