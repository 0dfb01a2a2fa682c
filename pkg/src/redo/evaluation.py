"""Segmentation metrics: pixel accuracy and IoU under the best region
permutation, plus binarization and validation-driven model selection.

Region indices a model assigns are arbitrary, so predictions are matched to
ground truth by the bijection maximizing mean IoU before scoring. The
default matching level is "dataset" (one permutation shared by all images,
since region identities persist across a trained model's outputs);
"image" picks a permutation per image. Mean IoU averages over all n
regions, background included; an empty-vs-empty region pair scores 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations as iter_permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

EXHAUSTIVE_MATCH_LIMIT = 6


@dataclass(frozen=True)
class EvalResult:
    acc: float
    iou: float
    permutation: tuple[int, ...]   # permutation[k] = gt region for predicted k+1, 1-based
    per_region_iou: tuple[float, ...]

    def __post_init__(self):
        n = len(self.permutation)
        if sorted(self.permutation) != list(range(1, n + 1)):
            raise ValueError(f"not a bijection on 1..{n}: {self.permutation}")
        if not (0 <= self.acc <= 1 and 0 <= self.iou <= 1):
            raise ValueError(f"metrics outside [0,1]: acc={self.acc}, iou={self.iou}")


def binarize_masks(soft: np.ndarray) -> np.ndarray:
    """Per-pixel argmax one-hot; ties break toward the lowest region index."""
    soft = np.asarray(soft)
    labels = np.argmax(soft, axis=-3)
    n = soft.shape[-3]
    return np.moveaxis(np.eye(n, dtype=np.uint8)[labels], -1, -3)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if not ((m == 0) | (m == 1)).all() or not (m.sum(axis=-3) == 1).all():
            raise ValueError(f"{name} masks must be one-hot at every pixel")


def _perm_array(perm, n: int) -> np.ndarray:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(1, n + 1)):
        raise ValueError(f"permutation {perm} is not a bijection on 1..{n}")
    return np.array(perm, dtype=np.int64) - 1


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray, perm) -> float:
    """Fraction of pixels whose permuted predicted region matches ground truth."""
    _check_pair(pred, gt)
    p = _perm_array(perm, pred.shape[-3])
    pred_labels = p[np.argmax(pred, axis=-3)]
    gt_labels = np.argmax(gt, axis=-3)
    return float((pred_labels == gt_labels).mean())


def _iou_from_counts(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    iou = np.ones_like(inter, dtype=np.float64)
    nz = union > 0
    iou[nz] = inter[nz] / union[nz]
    return iou


def intersection_over_union(pred: np.ndarray, gt: np.ndarray, perm) -> tuple[float, list[float]]:
    """
    Per-region |pred & gt| / |pred | gt| under the permutation, mean over all
    regions. Empty-vs-empty counts as 1.
    """
    _check_pair(pred, gt)
    n = pred.shape[-3]
    p = _perm_array(perm, n)
    per_region = []
    for k in range(n):
        a = pred[..., k, :, :].astype(bool)
        b = gt[..., p[k], :, :].astype(bool)
        inter = np.logical_and(a, b).sum()
        union = np.logical_or(a, b).sum()
        per_region.append(float(_iou_from_counts(np.array(inter), np.array(union))))
    return float(np.mean(per_region)), per_region


def _pair_counts(pred_labels: np.ndarray, gt_labels: np.ndarray, n: int):
    """Intersection / union / correct-pixel counts for every (pred, gt) pair."""
    joint = np.zeros((n, n), dtype=np.int64)
    for k in range(n):
        counts = np.bincount(gt_labels[pred_labels == k].ravel(), minlength=n)
        joint[k] = counts
    pred_sizes = joint.sum(axis=1)
    gt_sizes = joint.sum(axis=0)
    union = pred_sizes[:, None] + gt_sizes[None, :] - joint
    return joint, union


def _best_perm_from_matrix(iou_matrix: np.ndarray, exhaustive: bool | None = None):
    """Bijection (as 0-based array) maximizing the summed matched IoU."""
    n = iou_matrix.shape[0]
    if exhaustive is None:
        exhaustive = n <= EXHAUSTIVE_MATCH_LIMIT
    if exhaustive:
        best, best_score = None, -1.0
        for cand in iter_permutations(range(n)):
            score = sum(iou_matrix[k, cand[k]] for k in range(n))
            if score > best_score + 1e-15:
                best, best_score = cand, score
        return np.array(best, dtype=np.int64)
    rows, cols = linear_sum_assignment(-iou_matrix)
    out = np.empty(n, dtype=np.int64)
    out[rows] = cols
    return out


def best_permutation_match(pred_soft: list[np.ndarray], gt: list[np.ndarray],
                           level: str = "dataset",
                           exhaustive: bool | None = None) -> EvalResult:
    """Binarize predictions and score them under the best region permutation.

    "dataset" level accumulates intersection/union counts over every image
    and picks one global permutation; "image" level matches each image
    separately and averages the resulting metrics.
    """
    if not pred_soft or len(pred_soft) != len(gt):
        raise ValueError("prediction and ground-truth lists must be equal and non-empty")
    n = pred_soft[0].shape[-3]
    for p, g in zip(pred_soft, gt):
        if p.shape[-3] != n or g.shape[-3] != n:
            raise ValueError(
                f"region count mismatch: prediction has {p.shape[-3]}, "
                f"ground truth has {g.shape[-3]}, expected {n}"
            )
    if level not in ("dataset", "image"):
        raise ValueError(f"unknown matching level {level!r}")

    if level == "image":
        results = [best_permutation_match([p], [g], level="dataset", exhaustive=exhaustive)
                   for p, g in zip(pred_soft, gt)]
        mean_per_region = tuple(np.mean([r.per_region_iou for r in results], axis=0))
        return EvalResult(
            acc=float(np.mean([r.acc for r in results])),
            iou=float(np.mean([r.iou for r in results])),
            permutation=results[0].permutation,
            per_region_iou=mean_per_region,
        )

    inter = np.zeros((n, n), dtype=np.int64)
    union = np.zeros((n, n), dtype=np.int64)
    total_pixels = 0
    for p, g in zip(pred_soft, gt):
        pred_labels = np.argmax(np.asarray(p), axis=-3)
        gt_labels = np.argmax(np.asarray(g), axis=-3)
        joint, uni = _pair_counts(pred_labels, gt_labels, n)
        inter += joint
        union += uni
        total_pixels += pred_labels.size
    iou_matrix = _iou_from_counts(inter.astype(np.float64), union.astype(np.float64))
    assignment = _best_perm_from_matrix(iou_matrix, exhaustive=exhaustive)
    per_region = tuple(float(iou_matrix[k, assignment[k]]) for k in range(n))
    correct = int(sum(inter[k, assignment[k]] for k in range(n)))
    return EvalResult(
        acc=correct / total_pixels,
        iou=float(np.mean(per_region)),
        permutation=tuple(int(a) + 1 for a in assignment),
        per_region_iou=per_region,
    )


def evaluate_mask_model(mask_net, examples, level: str = "dataset",
                        batch_size: int = 16) -> EvalResult:
    """Run the mask network over labeled examples and score the soft masks."""
    import torch

    if not examples:
        raise ValueError("no examples to evaluate")
    was_training = mask_net.training
    mask_net.eval()
    preds, gts = [], []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            batch = torch.from_numpy(np.stack([ex.image for ex in chunk]))
            soft = mask_net(batch).numpy()
            for ex, masks in zip(chunk, soft):
                if ex.gt_masks is None:
                    raise ValueError(f"example {ex.id!r} lacks ground-truth masks")
                preds.append(masks)
                gts.append(ex.gt_masks)
    if was_training:
        mask_net.train()
    return best_permutation_match(preds, gts, level=level)


def select_model(checkpoint_paths, examples, level: str = "dataset"):
    """Pick the checkpoint with the highest validation mean IoU (ties go to
    the latest training step). Returns (path, EvalResult)."""
    from .training import load_model_checkpoint

    if not checkpoint_paths:
        raise ValueError("no checkpoints to select from")
    if not examples:
        raise ValueError("empty validation set")
    best = None
    for path in checkpoint_paths:
        models, meta = load_model_checkpoint(path)
        result = evaluate_mask_model(models.mask_net, examples, level=level)
        step = int(meta.get("step", 0))
        key = (result.iou, step)
        if best is None or key >= best[0]:
            best = (key, path, result)
    return best[1], best[2]
