"""Toy video classifier: patch tokens, CLS + position embeddings, K bidirectional SSM blocks.

Token order is frame-major: all patches of frame 0 in row-major order, then
frame 1, and so on; the CLS token sits at position 0. Each block is::

    u = silu(dwconv(in_proj(layernorm(x))))
    x = x + out_proj(forward_scan(u) + backward_scan(u))

where the forward scan is the residual variant and the backward scan the
masked residual variant (both switchable for ablations). There is no z-gate
branch. The classifier reads the final CLS token through a layer norm and a
linear head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tape as T
from .ssm_scan import SsmParams, scan_bidirectional, softplus_inverse
from .tensor_core import ShapeError, as_f64, make_rng, read_tensor, write_tensor

CHECKPOINT_FORMAT = "mambapro-checkpoint"
DIRECTIONS = ("fwd", "bwd")


class ConfigError(ValueError):
    """Model configuration is inconsistent with the input geometry."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 192
    depth: int = 24
    state_dim: int = 16
    patch: tuple = (1, 16, 16)
    num_classes: int = 400
    frames: int = 8
    height: int = 224
    width: int = 224
    expand: int = 2
    conv_width: int = 3
    masked: bool = True
    residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        pt, ph, pw = self.patch
        if pt != 1:
            raise ConfigError("temporal patch size must be 1")
        if self.height % ph or self.width % pw:
            raise ConfigError(
                f"frame size {self.height}x{self.width} is not divisible by patch {ph}x{pw}"
            )
        if self.conv_width % 2 != 1:
            raise ConfigError("conv_width must be odd")

    @property
    def grid(self) -> tuple:
        return self.frames, self.height // self.patch[1], self.width // self.patch[2]

    @property
    def num_patches(self) -> int:
        t, h, w = self.grid
        return t * h * w

    @property
    def inner_dim(self) -> int:
        return self.expand * self.embed_dim

    @property
    def patch_dim(self) -> int:
        return 3 * int(np.prod(self.patch))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


PRESETS = {
    "tiny": dict(embed_dim=192, depth=24),
    "small": dict(embed_dim=384, depth=24),
    "middle": dict(embed_dim=576, depth=32),
    # desk-scale configuration used for gradient checks and toy training
    "tiny-shrunk": dict(embed_dim=8, depth=2, state_dim=2, patch=(1, 4, 4),
                        frames=2, height=8, width=8, num_classes=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _block_shapes(cfg: ModelConfig, k: int) -> dict:
    C, E, S = cfg.embed_dim, cfg.inner_dim, cfg.state_dim
    shapes = {
        f"blocks.{k}.norm": (C,),
        f"blocks.{k}.in_proj": (E, C),
        f"blocks.{k}.conv.weight": (E, cfg.conv_width),
        f"blocks.{k}.conv.bias": (E,),
    }
    for d in DIRECTIONS:
        shapes.update({
            f"blocks.{k}.{d}.A_log": (S,),
            f"blocks.{k}.{d}.W_B": (S, E),
            f"blocks.{k}.{d}.W_C": (S, E),
            f"blocks.{k}.{d}.w_delta": (E,),
            f"blocks.{k}.{d}.b_delta": (1,),
        })
    shapes[f"blocks.{k}.out_proj"] = (C, E)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict:
    t, h, w = cfg.grid
    C = cfg.embed_dim
    shapes = {
        "patch.weight": (C, cfg.patch_dim),
        "patch.bias": (C,),
        "cls": (1, C),
        "pos_spatial": (h * w + 1, C),
        "pos_temporal": (t, C),
    }
    for k in range(cfg.depth):
        shapes.update(_block_shapes(cfg, k))
    shapes.update({"norm": (C,), "head.weight": (cfg.num_classes, C), "head.bias": (cfg.num_classes,)})
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            arr = as_f64(self.tensors[name])
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            self.tensors[name] = arr

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def names(self) -> list:
        return list(param_shapes(self.config))

    def count(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names])

    def with_flat(self, vec) -> "ModelParams":
        out, pos = {}, 0
        for n in self.names:
            a = self.tensors[n]
            out[n] = np.asarray(vec[pos:pos + a.size], dtype=np.float64).reshape(a.shape).copy()
            pos += a.size
        return ModelParams(self.config, out)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: a.copy() for n, a in self.tensors.items()})

    def with_config(self, **changes) -> "ModelParams":
        """Same tensors under a config differing only in shape-neutral fields."""
        return ModelParams(replace(self.config, **changes), {n: a.copy() for n, a in self.tensors.items()})

    def ssm_params(self, k: int, direction: str) -> SsmParams:
        p = f"blocks.{k}.{direction}."
        return SsmParams(
            A=-np.exp(self.tensors[p + "A_log"]),
            W_B=self.tensors[p + "W_B"],
            W_C=self.tensors[p + "W_C"],
            w_delta=self.tensors[p + "w_delta"],
            b_delta=float(self.tensors[p + "b_delta"][0]),
        )


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0, identity_blocks: bool = True) -> ModelParams:
    """Default initialization.

    ``identity_blocks`` zeroes every ``out_proj`` so blocks start as identity
    maps; all ablation variants then produce the same initial logits.
    """
    rng = make_rng(seed, stream=2)
    C, E, S = cfg.embed_dim, cfg.inner_dim, cfg.state_dim
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "patch.weight":
            out[name] = _uniform(rng, shape, cfg.patch_dim)
        elif name in ("patch.bias", "head.bias") or leaf == "bias":
            out[name] = np.zeros(shape)
        elif name in ("cls", "pos_spatial", "pos_temporal"):
            out[name] = rng.normal(scale=0.02, size=shape)
        elif leaf == "norm" or name == "norm":
            out[name] = np.ones(shape)
        elif leaf == "in_proj":
            out[name] = _uniform(rng, shape, C)
        elif leaf == "weight" and ".conv." in name:
            out[name] = _uniform(rng, shape, cfg.conv_width)
        elif leaf == "A_log":
            out[name] = np.log(np.arange(1, S + 1, dtype=np.float64))
        elif leaf in ("W_B", "W_C"):
            out[name] = _uniform(rng, shape, E)
        elif leaf == "w_delta":
            out[name] = 0.1 * _uniform(rng, shape, E)
        elif leaf == "b_delta":
            dt = np.exp(rng.uniform(np.log(0.01), np.log(0.1), size=shape))
            out[name] = softplus_inverse(dt)
        elif leaf == "out_proj":
            out[name] = np.zeros(shape) if identity_blocks else _uniform(rng, shape, E)
        elif name == "head.weight":
            out[name] = _uniform(rng, shape, C)
        else:  # pragma: no cover - guarded by param_shapes
            raise KeyError(name)
    return ModelParams(cfg, out)


# --- forward path ------------------------------------------------------------

def extract_patches(video, cfg: ModelConfig) -> np.ndarray:
    """``(B, 3, T, H, W)`` video to ``(B, L, 3*pt*ph*pw)`` non-overlapping patches."""
    v = as_f64(video)
    if v.ndim == 4:
        v = v[None]
    B, ch, Tn, H, W = v.shape
    pt, ph, pw = cfg.patch
    if ch != 3:
        raise ConfigError(f"expected 3 colour channels, got {ch}")
    if H % ph or W % pw or Tn % pt:
        raise ConfigError(f"video {Tn}x{H}x{W} is not divisible by patch {cfg.patch}")
    if (Tn, H, W) != (cfg.frames, cfg.height, cfg.width):
        raise ConfigError(f"video {Tn}x{H}x{W} does not match config "
                          f"{cfg.frames}x{cfg.height}x{cfg.width}")
    t, h, w = Tn // pt, H // ph, W // pw
    v = v.reshape(B, 3, t, pt, h, ph, w, pw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    return np.ascontiguousarray(v.reshape(B, t * h * w, 3 * pt * ph * pw))


def position_index(cfg: ModelConfig):
    """Rows of ``pos_spatial`` and ``pos_temporal`` used by each of the L+1 slots."""
    t, h, w = cfg.grid
    spatial = np.concatenate([[0], np.tile(np.arange(1, h * w + 1), t)])
    temporal = np.concatenate([[0], np.repeat(np.arange(t), h * w)])
    return spatial, temporal


def _vars(params: ModelParams, track: bool) -> dict:
    make = T.param if track else T.Var
    return {n: make(a) for n, a in params.tensors.items()}


def patchify_var(video, v: dict, cfg: ModelConfig) -> T.Var:
    patches = T.const(extract_patches(video, cfg))
    return T.add(T.matmul(patches, T.transpose(v["patch.weight"])), v["patch.bias"])


def embed_var(tokens: T.Var, v: dict, cfg: ModelConfig) -> T.Var:
    B, L, C = tokens.shape
    if L != cfg.num_patches:
        raise ShapeError(f"expected {cfg.num_patches} tokens, got {L}")
    cls = T.broadcast_to(T.reshape(v["cls"], (1, 1, C)), (B, 1, C))
    seq = T.concat([cls, tokens], axis=1)
    s_idx, t_idx = position_index(cfg)
    pos = T.add(T.take_rows(v["pos_spatial"], s_idx), T.take_rows(v["pos_temporal"], t_idx))
    return T.add(seq, pos)


def _direction(u: T.Var, v: dict, prefix: str, *, residual, exclude_diagonal, reverse) -> T.Var:
    B, N, E = u.shape
    pre = T.reshape(T.matmul(u, T.reshape(v[prefix + "w_delta"], (E, 1))), (B, N))
    delta = T.softplus(T.add(pre, v[prefix + "b_delta"]))
    Bm = T.matmul(u, T.transpose(v[prefix + "W_B"]))
    Cm = T.matmul(u, T.transpose(v[prefix + "W_C"]))
    A = T.neg(T.exp(v[prefix + "A_log"]))
    abar, bbar = T.zoh(delta, A, Bm)
    return T.scan(abar, bbar, Cm, u, residual=residual, exclude_diagonal=exclude_diagonal, reverse=reverse)


def block_input_var(x: T.Var, v: dict, k: int) -> T.Var:
    """The pre-scan branch: norm, input projection, depthwise conv, SiLU."""
    p = f"blocks.{k}."
    u = T.layernorm(x, v[p + "norm"])
    u = T.matmul(u, T.transpose(v[p + "in_proj"]))
    return T.silu(T.conv1d_depthwise(u, v[p + "conv.weight"], v[p + "conv.bias"]))


def block_var(x: T.Var, v: dict, k: int, cfg: ModelConfig) -> T.Var:
    p = f"blocks.{k}."
    u = block_input_var(x, v, k)
    yf = _direction(u, v, p + "fwd.", residual=cfg.residual, exclude_diagonal=False, reverse=False)
    yb = _direction(u, v, p + "bwd.", residual=cfg.residual, exclude_diagonal=cfg.masked, reverse=True)
    return T.add(x, T.matmul(T.add(yf, yb), T.transpose(v[p + "out_proj"])))


def logits_var(video, v: dict, cfg: ModelConfig) -> T.Var:
    x = embed_var(patchify_var(video, v, cfg), v, cfg)
    for k in range(cfg.depth):
        x = block_var(x, v, k, cfg)
    cls = T.layernorm(T.select(x, 0, axis=1), v["norm"])
    return T.add(T.matmul(cls, T.transpose(v["head.weight"])), v["head.bias"])


def patchify(video, params: ModelParams) -> np.ndarray:
    return patchify_var(video, _vars(params, False), params.config).data


def embed(tokens, params: ModelParams) -> np.ndarray:
    return embed_var(T.const(tokens), _vars(params, False), params.config).data


def block(x, params: ModelParams, k: int) -> np.ndarray:
    return block_var(T.const(x), _vars(params, False), k, params.config).data


def forward(video, params: ModelParams) -> np.ndarray:
    """Class logits ``(B, num_classes)`` for a ``(B, 3, T, H, W)`` video batch."""
    return logits_var(video, _vars(params, False), params.config).data


def reference_plain_block(x, params: ModelParams, k: int) -> np.ndarray:
    """Block with the SSM stage replaced by the plain bidirectional combination.

    The scan stage goes through :func:`mambapro.ssm_scan.scan_bidirectional`
    (no mask, no residual), independent of the config toggles.
    """
    v = _vars(params, False)
    u = block_input_var(T.const(x), v, k).data
    y = scan_bidirectional(params.ssm_params(k, "fwd"), params.ssm_params(k, "bwd"), u).y
    return x + y @ params[f"blocks.{k}.out_proj"].T


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ModelParams, directory) -> Path:
    """Write ``manifest.json`` plus one MPTENSOR file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(params.names):
        fname = f"{i:04d}_{name}.mpt"
        write_tensor(directory / fname, params[name])
        entries.append({"name": name, "file": fname, "shape": list(params[name].shape)})
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1,
                "config": params.config.to_dict(), "tensors": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(directory) -> ModelParams:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a {CHECKPOINT_FORMAT} directory")
    cfg = ModelConfig(**manifest["config"])
    tensors = {}
    for e in manifest["tensors"]:
        arr = read_tensor(directory / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ShapeError(f"{e['name']}: manifest says {e['shape']}, file holds {list(arr.shape)}")
        tensors[e["name"]] = arr
    return ModelParams(cfg, tensors)
