import json

import numpy as np
import pytest

from mambapro import model as Mm
from mambapro.ssm_scan import softplus
from mambapro.tensor_core import ShapeError, make_rng


@pytest.fixture(scope="module")
def shrunk():
    return Mm.preset("tiny-shrunk")


def video_for(cfg, seed=0, batch=1):
    return make_rng(seed, stream=9).normal(size=(batch, 3, cfg.frames, cfg.height, cfg.width))


def test_presets_match_published_widths():
    assert (Mm.preset("tiny").embed_dim, Mm.preset("tiny").depth) == (192, 24)
    assert (Mm.preset("small").embed_dim, Mm.preset("small").depth) == (384, 24)
    assert (Mm.preset("middle").embed_dim, Mm.preset("middle").depth) == (576, 32)


def test_config_rejects_bad_geometry():
    with pytest.raises(Mm.ConfigError, match="divisible"):
        Mm.ModelConfig(height=200)
    with pytest.raises(Mm.ConfigError):
        Mm.ModelConfig(patch=(2, 16, 16))
    with pytest.raises(Mm.ConfigError):
        Mm.ModelConfig(conv_width=4)
    with pytest.raises(Mm.ConfigError, match="unknown preset"):
        Mm.preset("huge")


def test_token_count_and_position_table_sizes():
    cfg = Mm.preset("tiny", frames=2, height=32, width=32)
    assert cfg.grid == (2, 2, 2) and cfg.num_patches == 8
    shapes = Mm.param_shapes(cfg)
    assert shapes["pos_spatial"] == (2 * 2 + 1, 192)
    assert shapes["pos_temporal"] == (2, 192)


def test_parameter_count_of_shrunk_config(shrunk):
    C, E, S, k = shrunk.embed_dim, shrunk.inner_dim, shrunk.state_dim, shrunk.conv_width
    t, h, w = shrunk.grid
    stem = C * 3 * 16 + C + C + (h * w + 1) * C + t * C
    direction = S + 2 * S * E + E + 1
    per_block = C + E * C + E * k + E + 2 * direction + C * E
    head = C + shrunk.num_classes * C + shrunk.num_classes
    assert Mm.init_params(shrunk).count() == stem + shrunk.depth * per_block + head == 1470


def test_patchify_token_count(shrunk):
    cfg = Mm.preset("tiny", frames=2, height=32, width=32)
    params = Mm.init_params(cfg)
    assert Mm.patchify(video_for(cfg), params).shape == (1, 8, 192)


def test_patchify_zero_video_zero_tokens(shrunk):
    params = Mm.init_params(shrunk)
    out = Mm.patchify(np.zeros((2, 3, 2, 8, 8)), params)
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("frame, row, col", [(0, 0, 0), (0, 5, 2), (1, 3, 7), (1, 7, 7)])
def test_single_pixel_touches_one_token(shrunk, frame, row, col):
    params = Mm.init_params(shrunk)
    v = np.zeros((1, 3, 2, 8, 8))
    v[0, :, frame, row, col] = 1.0
    out = Mm.patchify(v, params)[0]
    nonzero = np.flatnonzero(np.abs(out).sum(axis=1))
    _, h, w = shrunk.grid
    expected = frame * h * w + (row // 4) * w + col // 4
    assert nonzero.tolist() == [expected]


def test_patchify_matches_explicit_convolution(shrunk):
    params = Mm.init_params(shrunk, seed=3)
    v = video_for(shrunk, seed=3)
    out = Mm.patchify(v, params)[0]
    Wt = params["patch.weight"].reshape(shrunk.embed_dim, 3, 1, 4, 4)
    _, h, w = shrunk.grid
    for f in range(shrunk.frames):
        for i in range(h):
            for j in range(w):
                patch = v[0, :, f:f + 1, 4 * i:4 * i + 4, 4 * j:4 * j + 4]
                expected = np.einsum("cthw,kcthw->k", patch, Wt) + params["patch.bias"]
                np.testing.assert_allclose(out[f * h * w + i * w + j], expected, atol=1e-13)


def _with(params, **tensors):
    t = {n: a.copy() for n, a in params.tensors.items()}
    t.update(tensors)
    return Mm.ModelParams(params.config, t)


def test_embed_zero_positions_prepends_cls(shrunk):
    p = Mm.init_params(shrunk)
    p = _with(p, pos_spatial=np.zeros_like(p["pos_spatial"]), pos_temporal=np.zeros_like(p["pos_temporal"]))
    tokens = make_rng(1).normal(size=(2, 8, 8))
    out = Mm.embed(tokens, p)
    np.testing.assert_array_equal(out[:, 0], np.broadcast_to(p["cls"][0], (2, 8)))
    np.testing.assert_array_equal(out[:, 1:], tokens)


def test_embed_zero_tokens_is_position_sum(shrunk):
    p = Mm.init_params(shrunk, seed=2)
    p = _with(p, cls=np.zeros_like(p["cls"]))
    out = Mm.embed(np.zeros((1, 8, 8)), p)[0]
    ps, pt = p["pos_spatial"], p["pos_temporal"]
    _, h, w = shrunk.grid
    np.testing.assert_array_equal(out[0], ps[0] + pt[0])
    for f in range(shrunk.frames):
        for s in range(h * w):
            np.testing.assert_array_equal(out[1 + f * h * w + s], ps[1 + s] + pt[f])


def test_embed_single_frame_adds_constant_temporal_row():
    cfg = Mm.preset("tiny-shrunk", frames=1)
    p = Mm.init_params(cfg, seed=4)
    p = _with(p, pos_spatial=np.zeros_like(p["pos_spatial"]), cls=np.zeros_like(p["cls"]))
    out = Mm.embed(np.zeros((1, 4, 8)), p)[0]
    for row in out:
        np.testing.assert_array_equal(row, p["pos_temporal"][0])


def test_embed_length_mismatch(shrunk):
    with pytest.raises(ShapeError):
        Mm.embed(np.zeros((1, 7, 8)), Mm.init_params(shrunk))


def test_zero_head_single_class_gives_zero_logit():
    cfg = Mm.preset("tiny-shrunk", num_classes=1)
    p = Mm.init_params(cfg, identity_blocks=False)
    p = _with(p, **{"head.weight": np.zeros((1, 8))})
    for seed in range(3):
        np.testing.assert_array_equal(Mm.forward(video_for(cfg, seed), p), [[0.0]])


def test_swapping_distant_patches_changes_logits(shrunk):
    p = Mm.init_params(shrunk, seed=5, identity_blocks=False)
    v = video_for(shrunk, seed=5)
    w = v.copy()
    w[:, :, 0, 0:4, 0:4], w[:, :, 1, 4:8, 4:8] = v[:, :, 1, 4:8, 4:8], v[:, :, 0, 0:4, 0:4]
    assert np.max(np.abs(Mm.forward(v, p) - Mm.forward(w, p))) > 1e-6


def test_tiny_preset_end_to_end_finite():
    cfg = Mm.preset("tiny", frames=2, height=32, width=32)
    logits = Mm.forward(video_for(cfg), Mm.init_params(cfg, identity_blocks=False))
    assert logits.shape == (1, 400) and np.all(np.isfinite(logits))


@pytest.mark.parametrize("identity_blocks", [True, False])
def test_logits_finite_over_many_seeds(shrunk, identity_blocks):
    for seed in range(100):
        p = Mm.init_params(shrunk, seed=seed, identity_blocks=identity_blocks)
        assert np.all(np.isfinite(Mm.forward(video_for(shrunk, seed, batch=2), p)))


def test_blocks_preserve_sequence_shape(shrunk):
    p = Mm.init_params(shrunk, seed=6, identity_blocks=False)
    x = Mm.embed(Mm.patchify(video_for(shrunk, batch=3), p), p)
    assert x.shape == (3, 9, 8)
    for k in range(shrunk.depth):
        x = Mm.block(x, p, k)
        assert x.shape == (3, 9, 8)


def test_identity_init_blocks_are_identity(shrunk):
    p = Mm.init_params(shrunk, seed=7)
    x = make_rng(7).normal(size=(2, 9, 8))
    np.testing.assert_array_equal(Mm.block(x, p, 0), x)


@pytest.mark.parametrize("seed", range(5))
def test_toggles_off_match_plain_reference_bit_for_bit(shrunk, seed):
    cfg = Mm.preset("tiny-shrunk", masked=False, residual=False)
    p = Mm.init_params(cfg, seed=seed, identity_blocks=False)
    x = make_rng(seed, stream=3).normal(size=(2, 9, 8))
    for k in range(cfg.depth):
        np.testing.assert_array_equal(Mm.block(x, p, k), Mm.reference_plain_block(x, p, k))


def test_toggles_change_block_output(shrunk):
    p = Mm.init_params(shrunk, seed=8, identity_blocks=False)
    x = make_rng(8).normal(size=(1, 9, 8))
    outs = [Mm.block(x, p.with_config(masked=m, residual=r), 0) for m in (False, True) for r in (False, True)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert not np.array_equal(outs[i], outs[j])


def test_init_gives_stable_discretization(shrunk):
    p = Mm.init_params(shrunk, seed=9)
    for k in range(shrunk.depth):
        for d in ("fwd", "bwd"):
            ssm = p.ssm_params(k, d)
            assert np.all(ssm.A < 0)
            dt = softplus(ssm.b_delta)
            assert 0.01 - 1e-12 <= dt <= 0.1 + 1e-12


def test_init_is_deterministic(shrunk):
    a = Mm.init_params(shrunk, seed=10).flat()
    b = Mm.init_params(shrunk, seed=10).flat()
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != Mm.init_params(shrunk, seed=11).flat().tobytes()


def test_checkpoint_round_trip_bit_exact(tmp_path, shrunk):
    p = Mm.init_params(shrunk, seed=12, identity_blocks=False)
    manifest = Mm.save_checkpoint(p, tmp_path / "ck")
    data = json.loads(manifest.read_text())
    assert [e["name"] for e in data["tensors"]] == p.names
    q = Mm.load_checkpoint(tmp_path / "ck")
    assert q.config == p.config
    assert q.flat().tobytes() == p.flat().tobytes()
    v = video_for(shrunk)
    assert Mm.forward(v, q).tobytes() == Mm.forward(v, p).tobytes()


def test_checkpoint_rejects_foreign_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(ValueError, match="not a"):
        Mm.load_checkpoint(tmp_path)


def test_params_reject_wrong_shapes(shrunk):
    p = Mm.init_params(shrunk)
    with pytest.raises(ShapeError, match="cls"):
        _with(p, cls=np.zeros((2, 8)))
    t = dict(p.tensors)
    del t["norm"]
    with pytest.raises(ShapeError, match="missing"):
        Mm.ModelParams(shrunk, t)


def test_video_geometry_mismatch(shrunk):
    with pytest.raises(Mm.ConfigError):
        Mm.forward(np.zeros((1, 3, 2, 12, 12)), Mm.init_params(shrunk))
