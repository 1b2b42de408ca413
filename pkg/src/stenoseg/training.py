"""Losses, optimizers, the training step, checkpoints and the per-fold driver.

Defaults: equal-weight Dice + cross-entropy with smoothing 1, deep
supervision decay 0.5, Adam at 1e-3 with L2 weight decay 1e-5, and global
gradient-norm clipping at 12.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ops, serialize
from .autodiff.tensor import Tensor, backward, no_grad
from . import data
from .data import Sample, check_fold
from .errors import FoldError, FormatError, NonFiniteError, NumericError, ShapeError
from .metrics import ConfusionCounts, MetricsReport, aggregate, confusion, thresholded_mask
from .models import ModelSpec, Network, Variant, build, count_params


# ------------------------------------------------------------------ configs
@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    gamma: float = 0.5
    eps: float = 1.0

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0 or self.dice_weight + self.ce_weight <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1] (0 means primary output only)")
        if self.eps < 0:
            raise ValueError("dice smoothing must be nonnegative")


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    steps: int = 500
    batch_size: int = 4
    seed: int = 0
    clip_norm: float = 12.0

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r} (adam or sgd)")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


# ------------------------------------------------------------------- losses
def _check_target(logits: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected B x 2 x H x W logits, got {logits.shape}")
    if mask.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"mask {mask.shape} does not match logits {logits.shape}")
    return mask


def _one_hot(mask: np.ndarray, dtype) -> np.ndarray:
    m = mask.astype(dtype)
    return np.stack([1.0 - m, m], axis=1).astype(dtype)


def dice_loss(logits: Tensor, mask, eps: float = 1.0) -> Tensor:
    """``1 - (2 sum(p m) + eps) / (sum(p) + sum(m) + eps)`` over the whole batch."""
    mask = _check_target(logits, mask)
    p = ops.softmax(logits, axis=1)[:, 1]
    m = mask.astype(logits.dtype)
    inter = (p * m).sum()
    dice = (inter * 2.0 + eps) / (p.sum() + (float(m.sum()) + eps))
    return 1.0 - dice


def cross_entropy_loss(logits: Tensor, mask) -> Tensor:
    """Mean over pixels of the negative log-probability of the true class."""
    mask = _check_target(logits, mask)
    logp = ops.log_softmax(logits, axis=1)
    onehot = _one_hot(mask, logits.dtype)
    return (logp * onehot).sum() * (-1.0 / mask.size)


def downscale_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour downscale of a B x H x W mask by an integer factor."""
    H, W = mask.shape[-2:]
    h, w = shape
    if h < 1 or w < 1 or H % h or W % w or H // h != W // w:
        raise ShapeError(f"cannot downscale a {H}x{W} mask to {h}x{w}")
    f = H // h
    return mask[..., f // 2::f, f // 2::f]


def segmentation_loss(logits: Tensor, mask, cfg: LossConfig) -> Tensor:
    total = None
    if cfg.dice_weight:
        total = dice_loss(logits, mask, cfg.eps) * cfg.dice_weight
    if cfg.ce_weight:
        ce = cross_entropy_loss(logits, mask) * cfg.ce_weight
        total = ce if total is None else total + ce
    return total


def combined_loss(logits: Tensor, aux: list[Tensor], mask, cfg: LossConfig) -> Tensor:
    """Weighted sum over output levels, level 0 the primary, weights ``gamma**level`` normalized."""
    mask = np.asarray(mask)
    total = segmentation_loss(logits, mask, cfg)
    norm = 1.0
    for level, a in enumerate(aux, start=1):
        w = cfg.gamma**level
        if w == 0.0:
            continue
        target = downscale_mask(mask, a.shape[2:])
        total = total + segmentation_loss(a, target, cfg) * w
        norm += w
    return total * (1.0 / norm) if norm != 1.0 else total


# ---------------------------------------------------------------- optimizer
def global_grad_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the old norm."""
    norm = global_grad_norm(grads)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def optimizer_update(params: dict, moments: dict, step: int, cfg: OptimConfig) -> None:
    """One update of every parameter with a gradient; ``step`` counts from 1."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        g = g.astype(p.dtype, copy=True)
        if cfg.weight_decay:
            g += cfg.weight_decay * p.data
        if cfg.algorithm == "sgd":
            v = moments.setdefault(f"{name}:v", np.zeros_like(p.data))
            v *= cfg.momentum
            v += g
            p.data = p.data - cfg.lr * v
        else:
            m = moments.setdefault(f"{name}:m", np.zeros_like(p.data))
            v = moments.setdefault(f"{name}:v", np.zeros_like(p.data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            mhat = m / (1.0 - cfg.beta1**step)
            vhat = v / (1.0 - cfg.beta2**step)
            p.data = (p.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)


# -------------------------------------------------------------- train state
@dataclass
class TrainState:
    step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    best_f1: float = -1.0
    epoch: int = 0

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        return cls(rng=np.random.default_rng(seed))


def next_batch(state: TrainState, n: int, batch_size: int) -> np.ndarray:
    """Indices of the next batch, drawn from the state's RNG (so resuming continues the order)."""
    return np.sort(state.rng.permutation(n)[: min(batch_size, n)])


def stack_batch(samples: list[Sample], idx) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([samples[i].image for i in idx]).astype(np.float32)
    masks = np.stack([samples[i].mask for i in idx]).astype(np.uint8)
    return images, masks


def train_step(state: TrainState, net: Network, batch, optim: OptimConfig, loss_cfg: LossConfig) -> float:
    images, masks = batch
    params = dict(net.named_parameters())
    net.zero_grad()
    try:
        logits, aux = net(Tensor(images.astype(net_dtype(net))))
        loss = combined_loss(logits, aux, masks, loss_cfg)
    except NonFiniteError as exc:
        bad = next((n for n, p in params.items() if not np.isfinite(p.data).all()), None)
        where = f"; parameter {bad} holds non-finite values" if bad else ""
        raise NumericError(f"non-finite forward pass at step {state.step + 1} ({exc}){where}", bad) from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {state.step + 1}")
    backward(loss)
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name} at step {state.step + 1}", name)
    grads = [p.grad for p in params.values() if p.grad is not None]
    clip_gradients(grads, optim.clip_norm)
    optimizer_update(params, state.moments, state.step + 1, optim)
    state.step += 1
    state.losses.append(value)
    return value


def net_dtype(net: Network):
    return next(iter(net.parameters())).dtype


# --------------------------------------------------------------- evaluation
def predict_logits(net: Network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    outs = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits, _ = net(Tensor(images[i:i + batch_size].astype(net_dtype(net))))
            outs.append(logits.data)
    return np.concatenate(outs)


def evaluate(net: Network, samples: list[Sample], tau: float = 0.5, batch_size: int = 8,
             model: str = "") -> MetricsReport:
    if not samples:
        raise ValueError("no samples")
    images = np.stack([s.image for s in samples])
    preds = thresholded_mask(predict_logits(net, images, batch_size), tau)
    per_image: dict[str, ConfusionCounts] = {}
    for s, p in zip(samples, preds):
        per_image[s.id] = confusion(p, s.mask)
    return aggregate(per_image, model or net.spec.variant.value, count_params(net))


def train(net: Network, samples: list[Sample], optim: OptimConfig, loss_cfg: LossConfig,
          state: TrainState | None = None, until: int | None = None,
          callback: Callable[[TrainState, float], bool] | None = None,
          augment: bool = False) -> TrainState:
    """Run steps up to ``until`` (default ``optim.steps``); ``callback`` returning True stops early."""
    if not samples:
        raise ValueError("no training samples")
    state = state or TrainState.fresh(optim.seed)
    until = optim.steps if until is None else until
    while state.step < until:
        idx = next_batch(state, len(samples), optim.batch_size)
        images, masks = stack_batch(samples, idx)
        if augment:
            pairs = [data.augment(im, m, state.rng) for im, m in zip(images, masks)]
            images = np.stack([p[0] for p in pairs])
            masks = np.stack([p[1] for p in pairs])
        loss = train_step(state, net, (images, masks), optim, loss_cfg)
        if callback is not None and callback(state, loss):
            break
    return state


# -------------------------------------------------------------- checkpoints
CKPT_MAGIC = b"CKPT1"
CKPT_VERSION = 1


def save_checkpoint(path, net: Network, state: TrainState, extra: dict | None = None) -> None:
    """Write the parameter table, optimizer moments, step, losses and RNG state."""
    params = list(net.named_parameters())
    moments = sorted(state.moments.items())
    header = {
        "spec": net.spec.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "best_f1": state.best_f1,
        "losses": state.losses,
        "rng": state.rng.bit_generator.state,
        "params": [[n, list(p.shape)] for n, p in params],
        "moments": [[n, list(m.shape)] for n, m in moments],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for _, p in params:
        serialize.write_array(buf, p.data)
    for _, m in moments:
        serialize.write_array(buf, m)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    state: TrainState
    extra: dict


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    d["variant"] = Variant(d["variant"])
    for key in ("stage_channels", "depths"):
        d[key] = tuple(d[key])
    return ModelSpec(**d)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a CKPT{CKPT_VERSION} checkpoint (magic {magic!r})")
    fixed = fh.read(12)
    if len(fixed) != 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, n = struct.unpack("<IQ", fixed)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    blob = fh.read(n)
    if len(blob) != n:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(blob)
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    params = {name: serialize.read_array(fh) for name, _ in header["params"]}
    moments = {name: serialize.read_array(fh) for name, _ in header["moments"]}
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(header["step"], moments, list(header["losses"]), rng, header["best_f1"], header["epoch"])
    return Checkpoint(spec_from_dict(header["spec"]), params, state, header.get("extra", {}))


def restore(ckpt: Checkpoint, dtype=None) -> Network:
    """Rebuild the network from the checkpoint's spec and load its parameters."""
    net = build(ckpt.spec, dtype=dtype or next(iter(ckpt.params.values())).dtype)
    net.load_state_dict(ckpt.params)
    return net


# -------------------------------------------------------------- fold driver
METRICS_HEADER = ("epoch", "fold", "loss", "precision", "recall", "f1")


def _num(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


@dataclass
class FoldResult:
    fold: int
    best_f1: float
    checkpoint: Path
    log: Path
    state: TrainState


def run_fold(fold: int, train_ids, val_ids, samples: dict[str, Sample], spec: ModelSpec,
             optim: OptimConfig, loss_cfg: LossConfig, out_dir, resume: bool = False,
             extra: dict | None = None, check: bool = True, augment: bool = False) -> FoldResult:
    """Train on ``train_ids``, evaluate ``val_ids`` after every epoch, keep the best-F1 checkpoint.

    An epoch is one pass worth of batches over the training ids; the last
    epoch may be cut short by ``optim.steps``.  ``check=False`` allows
    evaluating on the training ids themselves (the overfit setting).
    """
    if check:
        check_fold(train_ids, val_ids)
    elif not train_ids or not val_ids:
        raise FoldError("fold has an empty train or validation set")
    missing = [i for i in list(train_ids) + list(val_ids) if i not in samples]
    if missing:
        raise KeyError(f"fold ids without prepared samples: {missing[:5]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = [samples[i] for i in train_ids]
    val_set = [samples[i] for i in val_ids]
    last_path, best_path, log_path = out_dir / "last.ckpt", out_dir / "best.ckpt", out_dir / "metrics.csv"

    if resume and last_path.exists():
        ckpt = load_checkpoint(last_path)
        if ckpt.spec != spec:
            raise ValueError("checkpoint spec differs from the configured model")
        net = restore(ckpt)
        state = ckpt.state
        rows = log_path.read_text().splitlines()[1:] if log_path.exists() else []
        rows = [r for r in rows if int(r.split(",")[0]) <= state.epoch]
    else:
        net = build(spec, seed=optim.seed)
        state = TrainState.fresh(optim.seed)
        rows = []

    per_epoch = max(1, math.ceil(len(train_set) / optim.batch_size))
    while state.step < optim.steps:
        start = state.step
        train(net, train_set, optim, loss_cfg, state, until=min(optim.steps, start + per_epoch), augment=augment)
        state.epoch += 1
        report = evaluate(net, val_set)
        loss = float(np.mean(state.losses[start:]))
        rows.append(",".join([str(state.epoch), str(fold), f"{loss:.6f}",
                              _num(report.precision), _num(report.recall), _num(report.f1)]))
        f1 = report.f1 if report.f1 is not None else 0.0
        if f1 > state.best_f1:
            state.best_f1 = f1
            save_checkpoint(best_path, net, state, extra)
        save_checkpoint(last_path, net, state, extra)
        log_path.write_text(",".join(METRICS_HEADER) + "\n" + "".join(r + "\n" for r in rows))
    if not best_path.exists():
        save_checkpoint(best_path, net, state, extra)
    return FoldResult(fold, state.best_f1, best_path, log_path, state)


def read_metrics_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

