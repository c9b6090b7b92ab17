"""Synthetic tasks, AdamW training, four-way ablations and gradient checks."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import model as Mm
from . import tape as T
from .config import OptimSpec, TaskSpec, canonical_json, config_hash
from .tensor_core import finite_diff_grad, make_rng


class TrainingDiverged(RuntimeError):
    pass


# --- synthetic tasks -----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Video classification task generated from a bank of patch patterns.

    ``interleaved``: two non-adjacent token slots carry key patterns P/Q with
    distractor patches between them; the label says whether the two keys match.
    Every slot has the same marginal pattern distribution under both labels, so
    only the pairing across positions is informative.

    ``prefix-majority``: every slot is P or Q; the label is the majority key in
    the first ``prefix`` slots (odd).

    ``uniform-noise``: Gaussian videos with labels independent of content.
    """

    spec: TaskSpec
    model: Mm.ModelConfig
    seed: int = 0

    @property
    def patch_shape(self):
        return (3,) + self.model.patch

    @property
    def prefix(self) -> int:
        half = self.model.num_patches // 2
        return max(1, half if half % 2 else half - 1)

    def bank(self) -> np.ndarray:
        """Unit-RMS patterns: rows 0, 1 are the keys P, Q; the rest distractors."""
        rng = make_rng(self.seed, stream=20)
        bank = rng.normal(size=(6,) + self.patch_shape)
        return bank / np.sqrt((bank**2).mean(axis=tuple(range(1, bank.ndim)), keepdims=True))

    def _render(self, ids, rng, noise) -> np.ndarray:
        cfg = self.model
        t, h, w = cfg.grid
        _, ph, pw = cfg.patch
        n = ids.shape[0]
        tiles = self.bank()[ids]  # (n, L, 3, 1, ph, pw)
        tiles = tiles.reshape(n, t, h, w, 3, 1, ph, pw).transpose(0, 4, 1, 5, 2, 6, 3, 7)
        video = tiles.reshape(n, 3, cfg.frames, cfg.height, cfg.width)
        return video + noise * rng.normal(size=video.shape)

    def sample(self, n: int, stream: int):
        """``(videos, labels, pattern_ids)`` for ``n`` examples from one RNG stream."""
        rng = make_rng(self.seed, stream=stream)
        L = self.model.num_patches
        kind = self.spec.kind
        if kind == "uniform-noise":
            videos = rng.normal(size=(n, 3, self.model.frames, self.model.height, self.model.width))
            return videos, rng.integers(0, self.spec.num_classes, size=n), None
        if self.spec.num_classes != 2:
            raise ValueError(f"{kind} task is binary; num_classes must be 2")
        if kind == "prefix-majority":
            ids = rng.integers(0, 2, size=(n, L))
            labels = (ids[:, :self.prefix].sum(axis=1) * 2 > self.prefix).astype(np.int64)
        else:
            if L < 3:
                raise ValueError("interleaved task needs at least 3 token slots")
            ids = rng.integers(2, 6, size=(n, L))
            labels = rng.integers(0, 2, size=n)
            for b in range(n):
                while True:
                    i, j = sorted(rng.choice(L, size=2, replace=False))
                    if j - i >= 2:
                        break
                first = rng.integers(0, 2)
                ids[b, i] = first
                ids[b, j] = first if labels[b] == 1 else 1 - first
        return self._render(ids, rng, self.spec.noise), labels, ids

    def datasets(self):
        train = self.sample(self.spec.train_size, stream=10)
        val = self.sample(self.spec.val_size, stream=11)
        return train[:2], val[:2]


def label_from_ids(kind: str, ids: np.ndarray, prefix: int) -> np.ndarray:
    """Recompute labels from pattern ids (content), for consistency checks."""
    if kind == "prefix-majority":
        return (ids[:, :prefix].sum(axis=1) * 2 > prefix).astype(np.int64)
    keys = [row[row < 2] for row in ids]
    return np.array([int(k[0] == k[1]) for k in keys])


# --- optimizer ---------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params: Mm.ModelParams, spec: OptimSpec):
        self.spec = spec
        self.m = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.tensors.items()}
        self.t = 0

    def step(self, params: Mm.ModelParams, grads: dict, lr: float) -> None:
        s = self.spec
        self.t += 1
        c1 = 1.0 - s.beta1**self.t
        c2 = 1.0 - s.beta2**self.t
        for n, p in params.tensors.items():
            g = grads[n]
            self.m[n] = s.beta1 * self.m[n] + (1 - s.beta1) * g
            self.v[n] = s.beta2 * self.v[n] + (1 - s.beta2) * g * g
            if p.ndim >= 2:
                p *= 1.0 - lr * s.weight_decay
            p -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + s.eps)


def cosine_lr(base: float, step: int, total: int, warmup: int = 0) -> float:
    """Linear warmup over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if step < warmup:
        return base * (step + 1) / warmup
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / max(total - warmup, 1)))


def loss_and_grads(params: Mm.ModelParams, videos, labels):
    v = {n: T.param(a) for n, a in params.tensors.items()}
    loss = T.cross_entropy(Mm.logits_var(videos, v, params.config), labels)
    T.backward(loss)
    grads = {n: (var.grad if var.grad is not None else np.zeros_like(var.data)) for n, var in v.items()}
    return float(loss.data), grads


def accuracy(params: Mm.ModelParams, videos, labels, chunk: int = 256) -> float:
    correct = 0
    for s in range(0, len(labels), chunk):
        logits = Mm.forward(videos[s:s + chunk], params)
        correct += int((logits.argmax(axis=1) == labels[s:s + chunk]).sum())
    return correct / len(labels)


# --- training ----------------------------------------------------------------

@dataclass
class TrainReport:
    seed: int
    config_hash: str
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def final_val_acc(self) -> float:
        return self.records[-1]["val_acc"] if self.records else float("nan")

    @property
    def final_train_acc(self) -> float:
        return self.records[-1]["train_acc"] if self.records else float("nan")

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"seed": self.seed, "config_hash": self.config_hash, "records": self.records}
        if include_timing:
            d["wall_clock"] = self.wall_clock
        return d

    def json_lines(self) -> str:
        """One JSON record per epoch; timing is left out so reruns are byte-identical."""
        lines = [canonical_json({"seed": self.seed, "config_hash": self.config_hash, **r})
                 for r in self.records]
        return "\n".join(lines) + "\n"


def run_hash(cfg: Mm.ModelConfig, task: TaskSpec, opt: OptimSpec, seed: int) -> str:
    return config_hash({"model": cfg.to_dict(), "task": asdict(task), "optim": asdict(opt), "seed": seed})


def train(cfg: Mm.ModelConfig, task: TaskSpec, opt: OptimSpec, seed: int = 0,
          init: Mm.ModelParams | None = None, data=None):
    """Train from ``init_params(cfg, seed)``; returns ``(TrainReport, params)``.

    Deterministic given its arguments: data, initialization and batch order all
    derive from ``seed``.
    """
    t0 = time.perf_counter()
    params = (init.with_config(masked=cfg.masked, residual=cfg.residual)
              if init is not None else Mm.init_params(cfg, seed))
    if data is None:
        data = SyntheticTask(task, cfg, seed).datasets()
    (xtr, ytr), (xva, yva) = data
    steps_per_epoch = math.ceil(len(ytr) / opt.batch_size)
    total = steps_per_epoch * opt.epochs
    warmup = steps_per_epoch * opt.warmup_epochs
    optim = AdamW(params, opt)
    order_rng = make_rng(seed, stream=30)
    report = TrainReport(seed=seed, config_hash=run_hash(cfg, task, opt, seed))
    step = 0
    initial_loss = None
    for epoch in range(opt.epochs):
        perm = order_rng.permutation(len(ytr))
        losses = []
        for s in range(steps_per_epoch):
            idx = perm[s * opt.batch_size:(s + 1) * opt.batch_size]
            loss, grads = loss_and_grads(params, xtr[idx], ytr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
            if initial_loss is None:
                initial_loss = loss
            optim.step(params, grads, cosine_lr(opt.lr, step, total, warmup))
            losses.append(loss)
            step += 1
        report.records.append({
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)),
            "train_acc": accuracy(params, xtr, ytr),
            "val_acc": accuracy(params, xva, yva),
        })
    report.records[0]["initial_loss"] = initial_loss
    report.wall_clock = time.perf_counter() - t0
    return report, params


# (name, mask, residual, published Kinetics-400 top-1 of the Middle model)
ABLATION_ROWS = (
    ("baseline", False, False, 82.4),
    ("+mask", True, False, 83.6),
    ("+residual", False, True, 83.0),
    ("+mask+residual", True, True, 84.0),
)


def ablate(cfg: Mm.ModelConfig, task: TaskSpec, opt: OptimSpec, seed: int = 0) -> list:
    """Four runs sharing data, initialization and batch order; toggles differ only."""
    data = SyntheticTask(task, cfg, seed).datasets()
    init = Mm.init_params(cfg, seed)
    rows = []
    for name, mask, residual, reference in ABLATION_ROWS:
        variant = replace(cfg, masked=mask, residual=residual)
        report, _ = train(variant, task, opt, seed=seed, init=init, data=data)
        rows.append({"variant": name, "mask": mask, "residual": residual,
                     "report": report, "reference_top1_k400": reference})
    return rows


# --- gradient checks -----------------------------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_gradients(build, inputs: dict, rng, h: float = 1e-5) -> dict:
    """Compare taped gradients of ``sum(build(**inputs) * W)`` with central differences.

    ``W`` is a random cotangent. Returns the relative error per input plus
    ``"all"``, the error over the concatenation of every input's gradient.
    """
    out = build(**{k: T.Var(v) for k, v in inputs.items()})
    weight = rng.normal(size=out.shape)
    vars_ = {k: T.param(v) for k, v in inputs.items()}
    T.backward(T.sum_all(T.mul(build(**vars_), T.const(weight))))
    errors, flat_a, flat_n = {}, [], []
    for name, value in inputs.items():
        def f(vec, name=name):
            args = {k: T.Var(v) for k, v in inputs.items()}
            args[name] = T.Var(vec.reshape(value.shape))
            return float((build(**args).data * weight).sum())
        numeric = finite_diff_grad(f, value, h).reshape(value.shape)
        analytic = vars_[name].grad if vars_[name].grad is not None else np.zeros_like(value)
        errors[name] = relative_error(analytic, numeric)
        flat_a.append(analytic.ravel())
        flat_n.append(numeric.ravel())
    errors["all"] = relative_error(np.concatenate(flat_a), np.concatenate(flat_n))
    return errors


def _direction_inputs(rng, prefix, S, E):
    return {
        prefix + "A_log": np.log(rng.uniform(0.3, 2.0, size=S)),
        prefix + "W_B": rng.normal(scale=E**-0.5, size=(S, E)),
        prefix + "W_C": rng.normal(scale=E**-0.5, size=(S, E)),
        prefix + "w_delta": rng.normal(scale=0.5 * E**-0.5, size=E),
        prefix + "b_delta": np.array([rng.uniform(-2.0, 0.0)]),
    }


def _scan_case(rng, *, fwd=True, bwd=False, masked=False, residual=False):
    N = int(rng.integers(1, 7))
    S = int(rng.integers(1, 4))
    E = int(rng.integers(1, 4))
    inputs = {"x": rng.normal(size=(2, N, E))}
    if fwd:
        inputs.update(_direction_inputs(rng, "fwd.", S, E))
    if bwd:
        inputs.update(_direction_inputs(rng, "bwd.", S, E))

    def build(x, **v):
        parts = []
        if fwd:
            parts.append(Mm._direction(x, v, "fwd.", residual=residual, exclude_diagonal=False, reverse=False))
        if bwd:
            parts.append(Mm._direction(x, v, "bwd.", residual=residual, exclude_diagonal=masked, reverse=True))
        return parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])

    return build, inputs


def _attention_case(rng):
    N, Dx, Dk, Dv = (int(rng.integers(1, 5)) for _ in range(4))
    inputs = {"x": rng.normal(size=(N, Dx)), "W_Q": rng.normal(size=(Dk, Dx)),
              "W_K": rng.normal(size=(Dk, Dx)), "W_V": rng.normal(size=(Dv, Dx))}

    def build(x, W_Q, W_K, W_V):
        q = T.matmul(x, T.transpose(W_Q))
        k = T.matmul(x, T.transpose(W_K))
        s = T.softmax(T.mul(T.matmul(q, T.transpose(k)), T.const(1.0 / math.sqrt(Dk))))
        return T.matmul(s, T.matmul(x, T.transpose(W_V)))

    return build, inputs


def _small_model_config(rng):
    return Mm.ModelConfig(embed_dim=int(rng.integers(2, 5)), depth=1, state_dim=int(rng.integers(1, 3)),
                          patch=(1, 2, 2), num_classes=2, frames=int(rng.integers(1, 3)), height=4, width=4)


def _tensors_case(rng, names_filter, build_fn):
    cfg = _small_model_config(rng)
    params = Mm.init_params(cfg, int(rng.integers(0, 2**31)), identity_blocks=False)
    video = rng.normal(size=(2, 3, cfg.frames, cfg.height, cfg.width))
    inputs = {n: a for n, a in params.tensors.items() if names_filter(n)}
    consts = {n: a for n, a in params.tensors.items() if not names_filter(n)}

    def build(**v):
        allv = {**{n: T.Var(a) for n, a in consts.items()}, **v}
        return build_fn(video, allv, cfg)

    return build, inputs


def _op_cases():
    def matmul(rng):
        return (lambda a, b: T.matmul(a, b)), {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 5))}

    def softmax(rng):
        return (lambda x: T.softmax(x)), {"x": rng.normal(scale=2.0, size=(3, 5))}

    def unary(op):
        return lambda rng: ((lambda x: op(x)), {"x": rng.normal(scale=2.0, size=(4, 5))})

    def layernorm(rng):
        return (lambda x, gamma: T.layernorm(x, gamma)), {"x": rng.normal(size=(2, 3, 6)),
                                                          "gamma": rng.normal(size=6)}

    def conv(rng):
        return (lambda u, w, b: T.conv1d_depthwise(u, w, b)), {
            "u": rng.normal(size=(2, 5, 4)), "w": rng.normal(size=(4, 3)), "b": rng.normal(size=4)}

    def xent(rng):
        labels = rng.integers(0, 4, size=6)
        return (lambda logits: T.cross_entropy(logits, labels)), {"logits": rng.normal(size=(6, 4))}

    def zoh(rng):
        def build(delta, A, B):
            abar, bbar = T.zoh(delta, A, B)
            return T.concat([abar, bbar], axis=-1)
        return build, {"delta": rng.uniform(0.05, 1.0, size=(2, 5)), "A": -rng.uniform(0.2, 2.0, size=3),
                       "B": rng.normal(size=(2, 5, 3))}

    def patchify(rng):
        return _tensors_case(rng, lambda n: n.startswith("patch."),
                             lambda video, v, cfg: Mm.patchify_var(video, v, cfg))

    def embed(rng):
        def build(video, v, cfg):
            return Mm.embed_var(v["tokens"], v, cfg)
        build_, inputs = _tensors_case(rng, lambda n: n in ("cls", "pos_spatial", "pos_temporal"), build)
        cfg_tokens = inputs["pos_temporal"].shape[0] * (inputs["pos_spatial"].shape[0] - 1)
        inputs["tokens"] = rng.normal(size=(2, cfg_tokens, inputs["cls"].shape[1]))
        return build_, inputs

    def block(rng):
        def build(video, v, cfg):
            return Mm.block_var(v["x"], v, 0, cfg)
        build_, inputs = _tensors_case(rng, lambda n: n.startswith("blocks.0."), build)
        C = inputs["blocks.0.norm"].shape[0]
        inputs["x"] = rng.normal(size=(2, int(rng.integers(1, 6)), C))
        return build_, inputs

    return {
        "matmul": matmul,
        "softmax_rows": softmax,
        "exp": unary(T.exp),
        "softplus": unary(T.softplus),
        "silu": unary(T.silu),
        "layernorm": layernorm,
        "conv1d_depthwise": conv,
        "cross_entropy": xent,
        "discretize_zoh": zoh,
        "scan_forward": lambda rng: _scan_case(rng),
        "scan_backward": lambda rng: _scan_case(rng, fwd=False, bwd=True),
        "scan_bidirectional": lambda rng: _scan_case(rng, bwd=True),
        "scan_bidirectional_masked": lambda rng: _scan_case(rng, bwd=True, masked=True),
        "scan_forward_residual": lambda rng: _scan_case(rng, residual=True),
        "scan_block": lambda rng: _scan_case(rng, bwd=True, masked=True, residual=True),
        "self_attention": _attention_case,
        "patchify": patchify,
        "embed": embed,
        "model_block": block,
    }


OP_NAMES = tuple(_op_cases())


def gradcheck_ops(seed: int = 0, instances: int = 20, ops=None) -> dict:
    """Worst relative gradient error per operation over random instances."""
    cases = _op_cases()
    results = {}
    for name in ops or OP_NAMES:
        rng = make_rng(seed, stream=40 + OP_NAMES.index(name))
        worst = 0.0
        for _ in range(instances):
            build, inputs = cases[name](rng)
            worst = max(worst, check_gradients(build, inputs, rng)["all"])
        results[name] = worst
    return results


def gradcheck_model(cfg: Mm.ModelConfig | None = None, seed: int = 0, batch: int = 2,
                    h: float = 1e-5) -> dict:
    """End-to-end loss gradient of the whole model against central differences."""
    cfg = cfg or Mm.preset("tiny-shrunk")
    rng = make_rng(seed, stream=60)
    params = Mm.init_params(cfg, seed, identity_blocks=False)
    video = rng.normal(size=(batch, 3, cfg.frames, cfg.height, cfg.width))
    labels = rng.integers(0, cfg.num_classes, size=batch)
    _, grads = loss_and_grads(params, video, labels)

    def f(vec):
        p = params.with_flat(vec)
        return float(T.cross_entropy(Mm.logits_var(video, Mm._vars(p, False), cfg), labels).data)

    numeric = params.with_flat(finite_diff_grad(f, params.flat(), h))
    per_tensor = {n: relative_error(grads[n], numeric[n]) for n in params.names}
    analytic = np.concatenate([grads[n].ravel() for n in params.names])
    return {"max_rel_err": relative_error(analytic, numeric.flat()),
            "worst_tensor_rel_err": max(per_tensor.values()),
            "per_tensor": per_tensor, "num_params": params.count(),
            "tokens": cfg.num_patches + 1}
