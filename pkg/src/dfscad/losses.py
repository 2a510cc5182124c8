"""Distillation distances, quantile masks and the feature separation hinge."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, quantile
from .errors import ConfigError, ShapeError

DFSC_REDUCTIONS = ("active", "spatial", "literal")
DFSC_ORDERS = ("mask_first", "normalize_first")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 2.0
    margin: float = 0.4
    q_ts: float = 0.999
    q_ta: float = 0.999
    # how the hinge is averaged: over active locations, over all H*W
    # locations, or the printed formula with its extra channel sum (C/HW)
    dfsc_reduction: str = "active"
    # mask then channel-normalize, or normalize full channel vectors then mask
    dfsc_order: str = "mask_first"
    # stop gradients from the student-vs-auto-encoder term into the auto-encoder
    sa_stop_grad: bool = False

    def __post_init__(self):
        if not 0.0 <= self.margin <= 2.0:
            raise ConfigError(f"margin must lie in [0, 2], got {self.margin}")
        for name in ("q_ts", "q_ta"):
            q = getattr(self, name)
            if not 0.0 <= q <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {q}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.dfsc_reduction not in DFSC_REDUCTIONS:
            raise ConfigError(f"dfsc_reduction must be one of {DFSC_REDUCTIONS}")
        if self.dfsc_order not in DFSC_ORDERS:
            raise ConfigError(f"dfsc_order must be one of {DFSC_ORDERS}")


@dataclass(frozen=True)
class LossBundle:
    d_sa: float
    d_ta: float
    d_ts_masked: float
    l_dfsc: float
    total: float

    @classmethod
    def from_terms(cls, d_sa, d_ta, d_ts_masked, l_dfsc, alpha=2.0) -> "LossBundle":
        total = d_sa + d_ta + d_ts_masked + alpha * l_dfsc
        return cls(d_sa, d_ta, d_ts_masked, l_dfsc, total)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("d_sa", "d_ta", "d_ts_masked", "l_dfsc", "total")}


def _same_shape(a: Tensor, b: Tensor, name: str):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def msd(a, b) -> Tensor:
    """Mean squared difference over all elements."""
    a, b = _t(a), _t(b)
    _same_shape(a, b, "msd")
    return (a - b).square().mean()


def hard_mask(diff_sq, q: float) -> np.ndarray:
    """1 where ``diff_sq`` reaches its own q-quantile, else 0. Never differentiated."""
    d = diff_sq.data if isinstance(diff_sq, Tensor) else np.asarray(diff_sq)
    tau = quantile(d, q)
    return (d.astype(np.float64) >= tau).astype(d.dtype if np.issubdtype(d.dtype, np.floating) else np.float64)


def masked_ts_loss(t, s_t, q_ts: float) -> Tensor:
    """Mean squared teacher/student difference over the hardest (1 - q) fraction."""
    t, s_t = _t(t), _t(s_t)
    _same_shape(t, s_t, "masked_ts_loss")
    diff_sq = (t.detach() - s_t).square()
    mask = hard_mask(diff_sq.data, q_ts)
    n = mask.sum()
    return (diff_sq * Tensor(mask / n)).sum()


def dfsc_loss(t, a, q_ta: float, margin: float, reduction: str = "active",
              order: str = "mask_first", return_info: bool = False):
    """Margin hinge keeping the auto-encoder away from the teacher on novel features.

    The teacher output and the mask are constants; gradients reach ``a`` only.
    With ``order="mask_first"`` a location holding a single unmasked channel
    has a normalized vector of +-1 and therefore no gradient.
    """
    t, a = _t(t), _t(a)
    _same_shape(t, a, "dfsc_loss")
    if t.ndim != 3:
        raise ShapeError(f"dfsc_loss: expected C x H x W maps, got {t.shape}")
    if reduction not in DFSC_REDUCTIONS:
        raise ValueError(f"unknown reduction {reduction!r}")
    if order not in DFSC_ORDERS:
        raise ValueError(f"unknown order {order!r}")
    tc = t.detach()
    mask = hard_mask((tc.data.astype(np.float64) - a.data) ** 2, q_ta).astype(a.dtype)
    m = Tensor(mask)
    if order == "mask_first":
        t_n = ag.l2_normalize(tc * m, axis=0)
        a_n = ag.l2_normalize(a * m, axis=0)
    else:
        t_n = ag.l2_normalize(tc, axis=0) * m
        a_n = ag.l2_normalize(a, axis=0) * m
    dist = ag.channel_norm(t_n - a_n, axis=0)
    hinge = ag.relu(Tensor(np.asarray(margin, dtype=a.dtype)) - dist)

    active = mask.any(axis=0)
    n_active = int(active.sum())
    c, h, w = t.shape
    if reduction == "active":
        if n_active == 0:
            warnings.warn("dfsc_loss: no active locations, returning 0", RuntimeWarning, stacklevel=2)
            loss = (hinge * Tensor(np.zeros_like(mask[0]))).sum()
        else:
            loss = (hinge * Tensor(active.astype(a.dtype) / n_active)).sum()
    elif reduction == "spatial":
        loss = hinge.sum() * (1.0 / (h * w))
    else:
        loss = hinge.sum() * (c / (h * w))
    if return_info:
        return loss, {"mask": mask, "distance": dist.data, "n_active": n_active}
    return loss


def total_loss(t, s_t, s_a, a, weights: LossWeights, dfsc: bool = True):
    """Weighted sum of the three distillation terms and the separation hinge.

    Returns ``(total_tensor, LossBundle)``. ``dfsc=False`` zeroes the hinge term.
    """
    t = _t(t).detach()
    a_for_sa = a.detach() if weights.sa_stop_grad else a
    d_sa = msd(s_a, a_for_sa)
    d_ta = msd(t, a)
    d_ts = masked_ts_loss(t, s_t, weights.q_ts)
    if dfsc and weights.alpha > 0 and weights.margin > 0:
        l_dfsc = dfsc_loss(t, a, weights.q_ta, weights.margin, weights.dfsc_reduction, weights.dfsc_order)
        total = d_sa + d_ta + d_ts + l_dfsc * weights.alpha
    else:
        l_dfsc = None
        total = d_sa + d_ta + d_ts
    bundle = LossBundle(
        d_sa=float(d_sa.data),
        d_ta=float(d_ta.data),
        d_ts_masked=float(d_ts.data),
        l_dfsc=0.0 if l_dfsc is None else float(l_dfsc.data),
        total=float(total.data),
    )
    return total, bundle
