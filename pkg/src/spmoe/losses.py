"""Training objectives and the point-weighted mIoU metric.

All losses return scalar graph nodes so gradients can be checked against
central finite differences. The semantic term is a per-superpoint
multi-label sigmoid BCE against one-hot class targets, kept distinct from
the instance-mask BCE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

COSINE_EPS = 1e-12


@dataclass
class LossWeights:
    cls: float = 1.0
    bce: float = 1.0
    dice: float = 1.0
    sem: float = 1.0
    z: float = 1e-4
    blc: float = 0.0
    mask: float = 1.0    # lambda_m of the finetune objective

    def validate(self) -> None:
        for name, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target class, stable via lse."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError(
            f"targets outside [0, {logits.shape[1]}): {targets.min()}..{targets.max()}"
        )
    lse = ad.logsumexp_rows(logits)
    picked = ad.take_per_row(logits, targets)
    return ad.sub(lse, picked).mean()


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits: softplus(x) - x*t."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce shapes {logits.shape} vs {t.shape}")
    return ad.sub(ad.softplus(logits), ad.mul(logits, t)).mean()


def dice_loss(probs: Tensor, targets, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != probs.shape:
        raise ShapeError(f"dice shapes {probs.shape} vs {t.shape}")
    inter = ad.mul(probs, t).sum()
    denom = ad.add(probs.sum(), float(t.sum() + smooth))
    num = ad.add(ad.mul(inter, 2.0), float(smooth))
    ratio = ad.div(num, denom)
    return ad.sub(Tensor(np.float64(1.0)), ratio)


def cosine_align(feats: Tensor, teacher) -> Tensor:
    """Mean over rows of 1 - cos(feature row, teacher row), eps-guarded."""
    t = np.asarray(teacher, dtype=np.float64)
    if t.shape != feats.shape:
        raise ShapeError(f"cosine shapes {feats.shape} vs {t.shape}")
    dots = ad.sum_cols(ad.mul(feats, t))
    f_norm = ad.sqrt(ad.add(ad.sum_cols(ad.mul(feats, feats)), COSINE_EPS))
    t_norm = np.sqrt((t * t).sum(axis=1) + COSINE_EPS)
    cos = ad.div(dots, ad.mul(f_norm, t_norm))
    return ad.sub(Tensor(np.float64(1.0)), cos.mean())


def greedy_match(pred_masks: np.ndarray, gt_masks: list[np.ndarray],
                 sizes: np.ndarray) -> list[tuple[int, int]]:
    """Greedy IoU assignment of query predictions to ground-truth instances.

    Pairs are picked by descending point-weighted IoU; ties resolve to the
    lower query index, then the lower instance index. Every instance gets a
    query (IoU 0 pairs included) as long as queries remain.
    """
    n_q = pred_masks.shape[0]
    n_g = len(gt_masks)
    iou = np.zeros((n_q, n_g))
    for q in range(n_q):
        for g in range(n_g):
            iou[q, g] = iou_superpoint_masks(pred_masks[q], gt_masks[g], sizes)
    pairs = []
    used_q, used_g = set(), set()
    order = sorted(
        ((q, g) for q in range(n_q) for g in range(n_g)),
        key=lambda qg: (-iou[qg[0], qg[1]], qg[0], qg[1]),
    )
    for q, g in order:
        if q not in used_q and g not in used_g:
            pairs.append((q, g))
            used_q.add(q)
            used_g.add(g)
    return sorted(pairs)


def seg_loss(
    cls_logits: Tensor,
    cls_targets,
    mask_logits: Tensor | None,
    mask_targets,
    sem_logits: Tensor,
    sem_targets_onehot,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of classification, instance-mask and semantic terms.

    mask_logits/mask_targets carry the matched instances ((n_matched, L));
    pass None when nothing matched. Components are also returned unweighted
    for logging.
    """
    total = Tensor(np.float64(0.0))
    parts: dict[str, float] = {}
    cls_term = cross_entropy(cls_logits, cls_targets)
    parts["cls"] = cls_term.item()
    total = ad.add(total, ad.mul(cls_term, weights.cls))
    if mask_logits is not None:
        bce_term = bce_with_logits(mask_logits, mask_targets)
        dice_term = dice_loss(ad.sigmoid(mask_logits), mask_targets)
        parts["bce"] = bce_term.item()
        parts["dice"] = dice_term.item()
        total = ad.add(total, ad.mul(bce_term, weights.bce))
        total = ad.add(total, ad.mul(dice_term, weights.dice))
    sem_term = bce_with_logits(sem_logits, sem_targets_onehot)
    parts["sem"] = sem_term.item()
    total = ad.add(total, ad.mul(sem_term, weights.sem))
    return total, parts


def inst_loss(seg: Tensor, z: Tensor, weights: LossWeights,
              blc: Tensor | None = None) -> Tensor:
    """Pretraining objective: seg + lambda_z * z (+ lambda_blc * balance)."""
    total = ad.add(seg, ad.mul(z, weights.z))
    if blc is not None and weights.blc > 0:
        total = ad.add(total, ad.mul(blc, weights.blc))
    return total


def ft_mask_loss(mask_logits: Tensor, gt_mask, lam_m: float = 1.0) -> Tensor:
    """Finetune mask term: lambda_m * (BCE + Dice) on one decoded mask."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    bce = bce_with_logits(mask_logits, gt)
    dc = dice_loss(ad.sigmoid(mask_logits), gt)
    return ad.mul(ad.add(bce, dc), float(lam_m))


# -- metrics ---------------------------------------------------------------------


def iou_superpoint_masks(pred, gt, sizes) -> float:
    """Point-weighted IoU of two binary superpoint masks.

    Masks are expanded to point counts before counting; two empty masks have
    IoU 1 (correctly predicting "no target").
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    sizes = np.asarray(sizes)
    inter = sizes[p & g].sum()
    union = sizes[p | g].sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def miou(pred_masks, gt_mask_sets, sizes, merge: bool = True) -> float:
    """Mean IoU over referring samples.

    Each sample pairs one predicted mask with the set of referenced
    ground-truth masks; with ``merge`` the references are unioned into a
    single region first (multi-object protocol). Without ``merge`` each
    sample must reference exactly one instance.
    """
    ious = []
    for pred, gts in zip(pred_masks, gt_mask_sets):
        if merge:
            if len(gts):
                gt = np.any(np.stack([np.asarray(m, dtype=bool) for m in gts]),
                            axis=0)
            else:
                gt = np.zeros(len(pred), dtype=bool)
        else:
            if len(gts) != 1:
                raise ConfigError("unmerged evaluation needs exactly one reference")
            gt = np.asarray(gts[0], dtype=bool)
        ious.append(iou_superpoint_masks(pred, gt, sizes))
    return float(np.mean(ious)) if ious else 0.0
