"""Training loop for the student and auto-encoder on normal images."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DatasetError, NumericalError
from .losses import LossBundle, LossWeights, total_loss
from .nets import (
    DTYPE,
    PdnConfig,
    TripletModel,
    init_pdn,
    autoencoder_forward,
    load_model,
    pdn_forward,
    save_model,
    student_forward,
    teacher_forward,
)

log = logging.getLogger(__name__)

LOG_FIELDS = ("t", "d_sa", "d_ta", "d_ts_masked", "l_dfsc", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    iterations: int = 2000
    warmup_beta2: float = 0.997
    lr_drop_fraction: float = 0.9
    lr_drop_factor: float = 0.1
    ema_momentum: float = 0.99
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # ablation toggles
    dfsc: bool = True
    momentum_update: bool = True
    ema_inplace: bool = False
    checkpoint_every: int = 0  # 0 -> every 10% of iterations

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.batch_size != 1:
            raise ConfigError("batch_size must be 1")
        if not 0.0 < self.ema_momentum < 1.0:
            raise ConfigError(f"ema_momentum must lie in (0, 1), got {self.ema_momentum}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Exponential warmup from zero, then a fixed drop for the final stretch."""
    warm = 1.0 - math.exp(-(1.0 - cfg.warmup_beta2) * t)
    drop = cfg.lr_drop_factor if t >= cfg.lr_drop_fraction * cfg.iterations else 1.0
    return cfg.lr * warm * drop


class AdamW:
    """Adam with decoupled weight decay over a dict of named tensors."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = 0

    def step(self, grads: dict, lr: float):
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        dt = DTYPE
        for k, p in self.params.items():
            g = grads[k]
            m = (b1 * self.m[k] + (1 - b1) * g).astype(dt)
            v = (b2 * self.v[k] + (1 - b2) * g * g).astype(dt)
            self.m[k], self.v[k] = m, v
            w = p.data * dt(1.0 - lr * self.weight_decay)
            p.data = (w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(dt)

    def state_arrays(self) -> dict:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict, steps: int):
        for k in self.m:
            self.m[k] = arrays[f"optim.m.{k}"].astype(DTYPE)
            self.v[k] = arrays[f"optim.v.{k}"].astype(DTYPE)
        self.steps = steps


def make_optimizer(model: TripletModel, cfg: TrainConfig) -> AdamW:
    return AdamW(model.trainable(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)


def ema_update(online: dict, shadow: dict, momentum: float) -> dict:
    """Return ``momentum * shadow + (1 - momentum) * online`` entry by entry."""
    if online.keys() != shadow.keys():
        raise ValueError("ema_update: parameter names differ")
    out = {}
    for k, s in shadow.items():
        o = online[k].data if isinstance(online[k], ag.Tensor) else online[k]
        if o.shape != s.shape:
            raise ValueError(f"ema_update: shape mismatch for {k}: {o.shape} vs {s.shape}")
        out[k] = (momentum * s + (1.0 - momentum) * o).astype(s.dtype)
    return out


def fit_teacher_stats(model: TripletModel, images):
    """Channel mean/std of raw teacher features over the training images."""
    total = None
    total_sq = None
    count = 0
    for img in images:
        f = pdn_forward(model.teacher, "teacher", ag.Tensor(np.asarray(img, dtype=DTYPE))).data.astype(np.float64)
        s = f.sum(axis=(1, 2))
        sq = (f * f).sum(axis=(1, 2))
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
        count += f.shape[1] * f.shape[2]
    if count == 0:
        raise DatasetError("no training images to fit teacher statistics")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 0.0))
    model.teacher_mean = mean.astype(DTYPE)
    model.teacher_std = np.where(std > 1e-6, std, 1.0).astype(DTYPE)


def pretrain_teacher(model: TripletModel, images, iterations: int = 500, lr: float = 1e-3,
                     width_factor: int = 2, seed: int = 0) -> list:
    """Distill the teacher from a fixed, randomly initialized wider PDN.

    The descriptor network is seeded by ``seed`` and never trained; the teacher
    is fitted to its features by mean-squared matching. Returns the loss trace.
    Teacher statistics are reset, so call :func:`fit_teacher_stats` afterwards.
    """
    images = list(images)
    if not images:
        raise DatasetError("no images to pretrain the teacher on")
    pdn = model.config.pdn
    wide_cfg = PdnConfig(pdn.in_channels, pdn.out_channels, tuple(w * width_factor for w in pdn.widths))
    wide = {k: ag.Tensor(v) for k, v in
            init_pdn(np.random.default_rng([seed, 7]), wide_cfg, pdn.out_channels, "wide").items()}
    params = {k: ag.Tensor(v.data.copy(), requires_grad=True) for k, v in model.teacher.items()}
    opt = AdamW(params)
    trace = []
    for t in range(iterations):
        x = ag.Tensor(np.asarray(images[stream_index(t, len(images), seed)], dtype=DTYPE))
        target = pdn_forward(wide, "wide", x).detach()
        loss = (pdn_forward(params, "teacher", x) - target).square().mean()
        if not math.isfinite(loss.item()):
            raise NumericalError(f"non-finite teacher pretraining loss at step {t}")
        grads = dict(zip(params, ag.grad(loss, params.values())))
        opt.step(grads, lr)
        trace.append(loss.item())
    for k, p in params.items():
        model.teacher[k] = ag.Tensor(p.data)
    c = pdn.out_channels
    model.teacher_mean = np.zeros(c, dtype=DTYPE)
    model.teacher_std = np.ones(c, dtype=DTYPE)
    return trace


def train_step(model: TripletModel, image, cfg: TrainConfig, t: int, opt: AdamW) -> LossBundle:
    """One joint update of student and auto-encoder on a single image."""
    x = ag.Tensor(np.asarray(image, dtype=DTYPE))
    # overflow is reported below as a NumericalError rather than as warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        t_feat = teacher_forward(model, x)
        s_t, s_a = student_forward(model, x)
        a = autoencoder_forward(model, x)
        loss, bundle = total_loss(t_feat, s_t, s_a, a, cfg.weights, dfsc=cfg.dfsc)
    if not all(math.isfinite(v) for v in bundle.as_dict().values()):
        raise NumericalError(f"non-finite loss at step {t}: {bundle.as_dict()}")
    params = model.trainable()
    grads = dict(zip(params, ag.grad(loss, params.values())))
    before = {k: p.data for k, p in model.student.items()} if cfg.ema_inplace else None
    opt.step(grads, lr_at(t, cfg))
    if cfg.ema_inplace:
        # blend the online student itself and keep the shadow identical to it
        blended = ema_update(model.student, before, cfg.ema_momentum)
        for k, p in model.student.items():
            p.data = blended[k]
        model.student_shadow = {k: v.copy() for k, v in blended.items()}
    elif cfg.momentum_update:
        model.student_shadow = ema_update(model.student, model.student_shadow, cfg.ema_momentum)
    else:
        model.student_shadow = {k: p.data.copy() for k, p in model.student.items()}
    model.step = t + 1
    return bundle


def stream_index(t: int, n: int, seed: int) -> int:
    """Image index used at step ``t``: a fresh seeded permutation every epoch."""
    epoch, pos = divmod(t, n)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return int(perm[pos])


def _format(v: float) -> str:
    return repr(float(v))


def read_loss_log(path) -> list:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "t" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_training(images, cfg: TrainConfig, out_dir, model: TripletModel | None = None,
                 resume=None, model_config=None, progress=None):
    """Train for ``cfg.iterations`` steps; return the final model.

    ``images`` is a sequence of preprocessed 3 x H x W arrays (normal only).
    Writes ``loss_log.csv``, periodic ``ckpt_XXXXXX.dfsc`` files and ``final.dfsc``.
    """
    images = list(images)
    if not images:
        raise DatasetError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.csv"

    if resume is not None:
        model, extra, meta = load_model(resume, return_extra=True)
        opt = make_optimizer(model, cfg)
        opt.load_state(extra, int(meta.get("optimizer_steps", model.step)))
        rows = [r for r in read_loss_log(log_path) if r["t"] < model.step] if log_path.exists() else []
    else:
        if model is None:
            if model_config is None:
                raise ValueError("need a model, a model_config or a checkpoint to resume from")
            model = TripletModel(model_config)
        fit_teacher_stats(model, images)
        opt = make_optimizer(model, cfg)
        rows = []

    every = cfg.checkpoint_every or max(1, cfg.iterations // 10)
    teacher_before = {k: v.data.copy() for k, v in model.teacher.items()}

    def checkpoint(path):
        save_model(model, path, extra_arrays=opt.state_arrays(),
                   extra_meta={"optimizer_steps": opt.steps, "train_config": cfg.to_dict()})

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for r in rows:
            writer.writerow([r["t"]] + [_format(r[k]) for k in LOG_FIELDS[1:]])
        for t in range(model.step, cfg.iterations):
            img = images[stream_index(t, len(images), cfg.seed)]
            b = train_step(model, img, cfg, t, opt)
            writer.writerow([t] + [_format(getattr(b, k)) for k in LOG_FIELDS[1:-1]] + [_format(lr_at(t, cfg))])
            if progress is not None:
                progress(t, b)
            if (t + 1) % every == 0 and t + 1 < cfg.iterations:
                checkpoint(out / f"ckpt_{t + 1:06d}.dfsc")
    for k, v in model.teacher.items():
        if not np.array_equal(v.data, teacher_before[k]):
            raise RuntimeError(f"teacher parameter {k} changed during training")
    checkpoint(out / "final.dfsc")
    log.info("training finished at step %d", model.step)
    return model
