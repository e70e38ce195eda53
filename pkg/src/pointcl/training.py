"""Batch assembly, Adam, lr / batch-norm momentum schedules, pretraining loop."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import models, tensor as T
from .losses import LossConfig, contrastive_loss_cls, contrastive_loss_seg
from .pointcloud import Dataset, sample_points
from .transforms import TransformSpec, parse_transform, apply_transform

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "bn_schedule",
    "build_batch",
    "pretrain",
    "save_train_checkpoint",
    "load_train_checkpoint",
]


@dataclass
class TrainConfig:
    pairs_per_batch: int = 16
    epochs: int = 30
    points_per_cloud: int = 128
    lr_init: float = 0.001
    lr_floor: float = 1e-5
    lr_decay_gamma: float = 0.7
    decay_period_steps: int = 0      # 0 = derived as 20 epochs worth of steps
    bn_init: float = 0.5
    bn_cap: float = 0.99
    seed: int = 0
    transform: str = "rotate:y:180"
    jitter_augment: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    encoder_widths: list = field(default_factory=lambda: list(models.DESK_ENCODER_WIDTHS))
    head_widths: list = field(default_factory=lambda: [64, 32])
    seg_widths: list = field(default_factory=lambda: [64, 32])
    dropout_rate: float = 0.7
    checkpoint_every: int = 0        # steps; 0 = final checkpoint only

    def __post_init__(self):
        if self.pairs_per_batch < 2:
            raise ValueError("need at least 2 pairs per batch")
        if self.lr_floor > self.lr_init:
            raise ValueError("lr_floor must not exceed lr_init")
        if not 0.5 <= self.bn_cap <= 1.0:
            raise ValueError("bn momentum cap must be in [0.5, 1]")

    def transform_spec(self) -> TransformSpec:
        return parse_transform(self.transform)


class AdamState:
    """First/second moment buffers and step counter for one parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; grads are cleared afterwards."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise FloatingPointError(
                f"non-finite gradient in parameter {i} (shape {p.data.shape})")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


def lr_schedule(step: int, cfg: TrainConfig, period: int) -> float:
    k = step // max(period, 1)
    return max(cfg.lr_floor, cfg.lr_init * cfg.lr_decay_gamma ** k)


def bn_schedule(step: int, cfg: TrainConfig, period: int) -> float:
    k = step // max(period, 1)
    return min(cfg.bn_cap, 1.0 - cfg.bn_init * 0.5 ** k)


def build_batch(ds: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                spec: TransformSpec | None = None):
    """Select n distinct samples, fix the point count and pair each with its
    transformed version. Returns (orig [n,N,3], trans [n,N,3])."""
    n = cfg.pairs_per_batch
    if len(ds) < n:
        raise ValueError(f"dataset of {len(ds)} samples < batch of {n} pairs")
    if spec is None:
        spec = cfg.transform_spec()
    jitter = TransformSpec(kind="jitter") if cfg.jitter_augment else None
    idx = rng.choice(len(ds), size=n, replace=False)
    orig, trans = [], []
    for i in idx:
        p = sample_points(ds[int(i)], cfg.points_per_cloud, rng)
        q = apply_transform(p, spec, rng)
        if jitter is not None:
            p = apply_transform(p, jitter, rng)
            q = apply_transform(q, jitter, rng)
        orig.append(p.points)
        trans.append(q.points)
    return np.stack(orig), np.stack(trans)


@dataclass
class LossRecord:
    step: int
    epoch: int
    lr: float
    bn_momentum: float
    loss: float


def write_loss_curve(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "epoch", "lr", "bn_momentum", "loss"])
        for r in records:
            w.writerow([r.step, r.epoch, f"{r.lr:.10g}",
                        f"{r.bn_momentum:.10g}", f"{r.loss:.10g}"])


def _forward_loss(model, orig, trans, cfg, rng, objective, training=True,
                  bn_momentum=0.9):
    n = orig.shape[0]
    both = np.concatenate([orig, trans], axis=0)
    global_feat, per_point = models.encode(both, model.encoder, training,
                                           bn_momentum=bn_momentum)
    if objective == "cls":
        z = models.project(global_feat, model.head, training, rng,
                           normalize=cfg.loss.normalize)
        z_orig = _rows(z, 0, n)
        z_trans = _rows(z, n, 2 * n)
        return contrastive_loss_cls(z_orig, z_trans, cfg.loss)
    elif objective == "seg":
        Z = models.segment_embed(per_point, global_feat, model.seg, training,
                                 normalize=cfg.loss.normalize)
        Z_orig = _clouds(Z, 0, n)
        Z_trans = _clouds(Z, n, 2 * n)
        return contrastive_loss_seg(Z_orig, Z_trans, cfg.loss)
    raise ValueError(f"unknown objective {objective!r}")


def _rows(x, lo, hi):
    out = x.data[lo:hi].copy()
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=x.dtype)
        gx[lo:hi] = g
        T._accum(x, gx)

    return T._result(out, (x,), bw, "rows")


_clouds = _rows  # same slicing for [2n, N, d] stacks


def pretrain(ds: Dataset, cfg: TrainConfig, objective: str = "cls",
             out_dir: str | None = None, resume: str | None = None,
             model: models.ModelParams | None = None):
    """Unsupervised contrastive pretraining.

    Returns (model, loss_records). With out_dir set, writes loss_curve.csv,
    periodic checkpoints and checkpoint_final.pclm.
    """
    if objective not in ("cls", "seg"):
        raise ValueError(f"objective must be 'cls' or 'seg', got {objective!r}")
    steps_per_epoch = max(len(ds) // cfg.pairs_per_batch, 1)
    period = cfg.decay_period_steps or 20 * steps_per_epoch
    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    records: list[LossRecord] = []
    if resume is not None:
        model, opt, rng, start_step = load_train_checkpoint(resume)
    else:
        if model is None:
            model = models.ModelParams.create(
                rng, encoder_widths=cfg.encoder_widths, head_widths=cfg.head_widths,
                seg_widths=cfg.seg_widths if objective == "seg" else None,
                dropout_rate=cfg.dropout_rate, with_seg=(objective == "seg"))
        opt = AdamState(model.params())

    spec = cfg.transform_spec()
    total_steps = cfg.epochs * steps_per_epoch
    params = model.params()
    last_good = None
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        lr = lr_schedule(step, cfg, period)
        bn_m = bn_schedule(step, cfg, period)
        orig, trans = build_batch(ds, cfg, rng, spec)
        loss = _forward_loss(model, orig, trans, cfg, rng, objective,
                             training=True, bn_momentum=bn_m)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            if out_dir and last_good:
                pass  # last-good checkpoint already on disk
            raise FloatingPointError(
                f"non-finite loss {loss_val} at step {step}; last good checkpoint retained")
        T.backward(loss)
        adam_step(params, opt, lr)
        records.append(LossRecord(step, epoch, lr, bn_m, loss_val))
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = os.path.join(out_dir, f"checkpoint_{step + 1:06d}.pclm")
            save_train_checkpoint(model, opt, rng, step + 1, path)
            last_good = path
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_train_checkpoint(model, opt, rng, total_steps,
                              os.path.join(out_dir, "checkpoint_final.pclm"))
        write_loss_curve(records, os.path.join(out_dir, "loss_curve.csv"))
    return model, records


# ---------------------------------------------------------------------------
# Training checkpoints: the model checkpoint plus optimizer moments and the
# rng state, so a resumed run reproduces the uninterrupted trajectory.
# ---------------------------------------------------------------------------

def save_train_checkpoint(model, opt: AdamState, rng: np.random.Generator,
                          step: int, path) -> None:
    extra = {
        "step": step,
        "adam": {
            "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "step_count": opt.step_count,
            "m": [a.tolist() for a in opt.m],
            "v": [a.tolist() for a in opt.v],
        },
        "rng_state": _encode_rng(rng),
    }
    models.save_checkpoint(model, path, extra=extra)


def load_train_checkpoint(path):
    model, extra = models.load_checkpoint(path)
    if "step" not in extra:
        raise models.CheckpointError(f"{path}: not a training checkpoint")
    params = model.params()
    opt = AdamState(params, beta1=extra["adam"]["beta1"],
                    beta2=extra["adam"]["beta2"], eps=extra["adam"]["eps"])
    opt.step_count = extra["adam"]["step_count"]
    opt.m = [np.array(a, dtype=p.data.dtype).reshape(p.data.shape)
             for a, p in zip(extra["adam"]["m"], params)]
    opt.v = [np.array(a, dtype=p.data.dtype).reshape(p.data.shape)
             for a, p in zip(extra["adam"]["v"], params)]
    rng = _decode_rng(extra["rng_state"])
    return model, opt, rng, extra["step"]


def _encode_rng(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    s = dict(state)
    if "state" in s and isinstance(s["state"], dict):
        s["state"] = {k: int(v) if isinstance(v, (int, str)) and str(v).isdigit() else v
                      for k, v in s["state"].items()}
    rng.bit_generator.state = s
    return rng
