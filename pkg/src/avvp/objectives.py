"""Classification losses, cross-audio prediction consistency and pairing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError
from .model import PredictionSet
from .tensor import Tensor

EPS_CLAMP = 1e-7
DEFAULT_MU = 0.5


@dataclass
class WeakLabels:
    """Video-level targets; rows are videos when batched."""

    Y: np.ndarray
    Y_a: np.ndarray
    Y_v: np.ndarray

    @classmethod
    def from_union(cls, Y) -> "WeakLabels":
        Y = np.asarray(Y, dtype=np.float64)
        return cls(Y, Y.copy(), Y.copy())

    def check_union(self) -> bool:
        return bool(np.array_equal(np.maximum(self.Y_a, self.Y_v), self.Y))


@dataclass
class LossBreakdown:
    l_cls_a: Tensor
    l_cls_v: Tensor
    l_cls_video: Tensor
    l_cls_total: Tensor
    l_ccr: Tensor | None = None
    l_total: Tensor | None = None
    mu: float = 0.0
    N: int = 0

    def values(self) -> dict[str, float]:
        out = {
            "l_cls_a": self.l_cls_a.item(),
            "l_cls_v": self.l_cls_v.item(),
            "l_cls_video": self.l_cls_video.item(),
            "l_cls_total": self.l_cls_total.item(),
        }
        out["l_ccr"] = self.l_ccr.item() if self.l_ccr is not None else 0.0
        out["l_total"] = self.l_total.item() if self.l_total is not None else out["l_cls_total"]
        return out


def bce(p, y) -> Tensor:
    """Binary cross-entropy averaged over classes, then over videos if batched."""
    p = tn.as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"bce: prediction shape {p.shape} != label shape {y.shape}")
    pc = tn.clip(p, EPS_CLAMP, 1.0 - EPS_CLAMP)
    ll = tn.log(pc) * y + tn.log(1.0 - pc) * (1.0 - y)
    return -ll.mean()


def classification_loss(preds: PredictionSet, labels: WeakLabels) -> LossBreakdown:
    la = bce(preds.Ptilde_a, labels.Y_a)
    lv = bce(preds.Ptilde_v, labels.Y_v)
    lvid = bce(preds.Ptilde_video, labels.Y)
    return LossBreakdown(la, lv, lvid, la + lv + lvid)


def capc_loss(ptilde_v_orig, ptilde_v_rand) -> Tensor:
    """Mean over random pairings of the squared L2 distance to the original.

    Accepts a list of ``N`` tensors shaped like ``ptilde_v_orig``. With batched
    inputs ``(B, C)`` the per-video values are averaged over the batch. Both
    arguments stay on the tape.
    """
    if len(ptilde_v_rand) == 0:
        raise ValueError("capc_loss needs at least one random pairing (N >= 1)")
    orig = tn.as_tensor(ptilde_v_orig)
    total = None
    for r in ptilde_v_rand:
        sq = tn.square(tn.as_tensor(r) - orig).sum(axis=-1)
        total = sq if total is None else total + sq
    per_video = total * (1.0 / len(ptilde_v_rand))
    return per_video.mean() if per_video.ndim else per_video


def total_loss(breakdown: LossBreakdown, mu: float = DEFAULT_MU) -> Tensor:
    if mu < 0:
        raise ValueError("mu must be non-negative")
    if breakdown.l_ccr is None:
        return breakdown.l_cls_total
    return breakdown.l_cls_total + breakdown.l_ccr * mu


def sample_cross_indices(batch_size: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """For each video, ``N`` distinct indices of other videos in the batch."""
    if N < 1:
        return np.zeros((batch_size, 0), dtype=np.int64)
    if batch_size < 2:
        raise ValueError("cross-audio sampling needs a batch of at least 2 videos")
    if N > batch_size - 1:
        raise ValueError(f"N={N} exceeds the {batch_size - 1} other videos in the batch")
    out = np.empty((batch_size, N), dtype=np.int64)
    for i in range(batch_size):
        pick = rng.choice(batch_size - 1, size=N, replace=False)
        out[i] = pick + (pick >= i)
    return out


def sample_cross_audios(batch, N: int, rng: np.random.Generator) -> list[list[np.ndarray]]:
    """Per video, ``N`` audio feature sequences taken from other videos."""
    idx = sample_cross_indices(len(batch), N, rng)
    return [[batch[j].audio_feats for j in row] for row in idx]
