"""Identity, batch-hard triplet and center losses, and their composite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    _as_tensor,
    clip_min,
    log,
    log_softmax,
    mean,
    mul,
    relu,
    reshape,
    sqrt,
    sum,
    take,
    take_along_axis,
)


@dataclass
class LossConfig:
    use_ce: bool = True
    use_triplet: bool = True
    use_center: bool = True
    supervise_local: bool = True  # triplet/center on local streams as well as global
    margin: float = 0.3
    center_weight: float = 0.0005
    center_unsquared: bool = False

    def __post_init__(self):
        if not np.isfinite(self.margin) or self.margin < 0:
            raise ValueError("triplet margin must be finite and >= 0")


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float
    triplet: float
    center: float
    center_weight: float

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "ce": self.ce, "triplet": self.triplet,
                "center": self.center}


def cross_entropy(probs, target) -> Tensor:
    """-sum p_i log q_i for a probability vector ``probs`` and one-hot ``target``.

    Works row-wise on [..., k] and returns the mean over rows.
    """
    probs = _as_tensor(probs)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ValueError(f"target shape {t.shape} != probs shape {probs.shape}")
    if np.any(probs.data < 0) or np.any(np.abs(probs.data.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probs is not a probability vector")
    per_row = -sum(mul(log(clip_min(probs, 1e-12)), t), axis=-1)
    return mean(per_row)


def cross_entropy_logits(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits) along the last axis."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    logp = log_softmax(logits, axis=-1)
    idx = np.broadcast_to(labels.reshape((1,) * (logits.ndim - 2) + (-1, 1)),
                          logits.shape[:-1] + (1,))
    return -mean(take_along_axis(logp, idx, axis=-1))


def pairwise_sq_dists(features) -> Tensor:
    """[..., B, d] -> [..., B, B] squared euclidean distances via explicit differences."""
    f = _as_tensor(features)
    lead, (B, d) = f.shape[:-2], f.shape[-2:]
    diff = reshape(f, lead + (B, 1, d)) - reshape(f, lead + (1, B, d))
    return sum(diff * diff, axis=-1)


def hard_mining(dist: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest positive and of the nearest negative.

    Ties go to the lowest index.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    if not pos.any(axis=1).all() or not neg.any(axis=1).all():
        raise ValueError("every anchor needs at least one positive and one negative in the batch")
    hardest_pos = np.argmax(np.where(pos, dist, -np.inf), axis=-1)
    hardest_neg = np.argmin(np.where(neg, dist, np.inf), axis=-1)
    return hardest_pos, hardest_neg


def batch_hard_triplet(features, labels, margin: float = 0.3) -> Tensor:
    """Mean over anchors of [margin + max_p d(a,p) - min_n d(a,n)]_+ with squared distances.

    ``features`` is [B, d] or [S, B, d]; with leading stream axes the result is
    the mean over streams of the per-stream losses.
    """
    labels = np.asarray(labels)
    d = pairwise_sq_dists(features)
    p_idx, n_idx = hard_mining(d.data, labels)
    d_ap = take_along_axis(d, p_idx[..., None], axis=-1)
    d_an = take_along_axis(d, n_idx[..., None], axis=-1)
    return mean(relu(d_ap - d_an + margin))


@dataclass
class CenterBank:
    """Per-stream class centers, moved toward batch class means outside the optimiser."""

    centers: np.ndarray  # [S, num_classes, d] or [num_classes, d]
    lr: float = 0.5

    def update(self, features, labels) -> None:
        center_update(self, features, labels)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def center_loss(features, labels, centers, squared: bool = True) -> Tensor:
    """1/2 * sum_i ||x_i - c_{y_i}||^2 (or unsquared norm); centers receive no gradient.

    Leading stream axes are averaged.
    """
    f = _as_tensor(features)
    c = centers.centers if isinstance(centers, CenterBank) else np.asarray(centers)
    labels = _check_labels(labels, c.shape[-2])
    diff = f - Tensor(c[..., labels, :].astype(f.dtype))
    sq = sum(diff * diff, axis=-1)  # [..., B]
    per_sample = sq if squared else sqrt(clip_min(sq, 1e-24))
    per_stream = mul(sum(per_sample, axis=-1), 0.5)
    return mean(per_stream)


def center_update(bank: CenterBank, features, labels) -> None:
    """c_j <- c_j - lr * (c_j - mean of class-j features in the batch), for classes present."""
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    labels = _check_labels(labels, bank.centers.shape[-2])
    for j in np.unique(labels):
        batch_mean = x[..., labels == j, :].mean(axis=-2)
        c = bank.centers[..., j, :]
        bank.centers[..., j, :] = c - bank.lr * (c - batch_mean)


def composite_loss(output, labels, config: LossConfig, centers: np.ndarray | None = None) -> LossBreakdown:
    """total = CE + Trip + lambda * Center, each averaged over the streams it supervises.

    CE covers every stream head; triplet and center cover global streams, plus
    local streams when ``config.supervise_local``.
    """
    labels = np.asarray(labels)
    feats, logits = output.features, output.logits
    if config.supervise_local:
        sup = list(range(feats.shape[0]))
    else:
        sup = [s for s, loc in enumerate(output.is_local) if not loc]
    sup_feats = feats if len(sup) == feats.shape[0] else take(feats, np.asarray(sup))

    zero = Tensor(np.zeros((), dtype=feats.dtype))
    ce = cross_entropy_logits(logits, labels) if config.use_ce else zero
    trip = batch_hard_triplet(sup_feats, labels, config.margin) if config.use_triplet else zero
    if config.use_center:
        if centers is None:
            raise ValueError("center loss enabled but no center bank given")
        cen = center_loss(sup_feats, labels, centers[sup], squared=not config.center_unsquared)
    else:
        cen = zero
    total = ce + trip + cen * config.center_weight
    return LossBreakdown(total, ce.item(), trip.item(), cen.item(), config.center_weight)
