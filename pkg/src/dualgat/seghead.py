"""Voxel-space head: inverse patch mapping, Dice + CE loss, DSC and HD95."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .data import PatchSet

PROB_FLOOR = 1e-12
REGIONS = {"ET": (3,), "TC": (2, 3), "WT": (1, 2, 3)}


@dataclass(frozen=True)
class PatchLayout:
    grid_dims: tuple[int, int, int]
    patch_side: int

    @classmethod
    def of(cls, patchset: PatchSet) -> "PatchLayout":
        return cls(tuple(patchset.grid_dims), patchset.patch_side)

    @property
    def node_count(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(g * self.patch_side for g in self.grid_dims)


@dataclass(frozen=True)
class SegLossConfig:
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    smooth: float = 1e-5

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0 or (self.dice_weight == 0 and self.ce_weight == 0):
            raise ValueError("dice_weight and ce_weight must be >= 0 and not both zero")
        if not self.smooth > 0:
            raise ValueError("smooth must be > 0")


@dataclass
class SegReport:
    dsc: dict[str, float]
    hd95: dict[str, float]
    losses: dict[str, float] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([self.dsc[r] for r in REGIONS]))

    def to_json(self) -> dict:
        out = asdict(self)
        out["mean_dsc"] = self.mean_dsc
        return out


def inverse_patch_map(node_logits: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Broadcast each node's logit vector over its patch: ``(N, C) -> (C, D, H, W)``."""
    node_logits = np.asarray(node_logits, dtype=float)
    if node_logits.ndim != 2 or node_logits.shape[0] != layout.node_count:
        raise ValueError(f"expected ({layout.node_count}, C) node logits, got {node_logits.shape}")
    gz, gy, gx = layout.grid_dims
    s = layout.patch_side
    C = node_logits.shape[1]
    grid = node_logits.T.reshape(C, gz, 1, gy, 1, gx, 1)
    return np.broadcast_to(grid, (C, gz, s, gy, s, gx, s)).reshape(C, gz * s, gy * s, gx * s)


def patch_sum(voxel_values: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Adjoint of :func:`inverse_patch_map`: sum each patch back onto its node."""
    C = voxel_values.shape[0]
    gz, gy, gx = layout.grid_dims
    s = layout.patch_side
    blocks = voxel_values.reshape(C, gz, s, gy, s, gx, s).sum(axis=(2, 4, 6))
    return blocks.reshape(C, -1).T


def voxel_softmax(logits: np.ndarray) -> np.ndarray:
    ex = np.exp(logits - logits.max(axis=0, keepdims=True))
    return ex / ex.sum(axis=0, keepdims=True)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return (np.arange(n_classes).reshape((-1,) + (1,) * labels.ndim) == labels[None]).astype(float)


def _dice_terms(probs, labels, smooth):
    C = probs.shape[0]
    y = one_hot(labels, C)
    axes = tuple(range(1, probs.ndim))
    inter = np.sum(probs * y, axis=axes)
    denom = np.sum(probs, axis=axes) + np.sum(y, axis=axes) + smooth
    return y, inter, denom


def dice_loss(probs: np.ndarray, labels: np.ndarray, smooth: float = 1e-5) -> float:
    """Soft Dice averaged over the foreground classes (background excluded)."""
    _, inter, denom = _dice_terms(probs, labels, smooth)
    per_class = 1.0 - (2.0 * inter + smooth) / denom
    return float(np.mean(per_class[1:]))


def dice_grad(probs, labels, smooth: float = 1e-5) -> np.ndarray:
    y, inter, denom = _dice_terms(probs, labels, smooth)
    num = 2.0 * inter + smooth
    shape = (-1,) + (1,) * (probs.ndim - 1)
    g = -(2.0 * y * denom.reshape(shape) - num.reshape(shape)) / (denom ** 2).reshape(shape)
    g[0] = 0.0
    return g / (probs.shape[0] - 1)


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = np.take_along_axis(probs, labels[None].astype(np.intp), axis=0)[0]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def ce_grad(probs, labels) -> np.ndarray:
    y = one_hot(labels, probs.shape[0])
    safe = np.maximum(probs, PROB_FLOOR)
    return np.where((y > 0) & (probs > PROB_FLOOR), -y / safe, 0.0) / labels.size


def seg_loss(probs, labels, cfg: SegLossConfig = SegLossConfig()) -> float:
    return cfg.dice_weight * dice_loss(probs, labels, cfg.smooth) + cfg.ce_weight * ce_loss(probs, labels)


def seg_loss_and_grad(voxel_logits: np.ndarray, labels: np.ndarray, cfg: SegLossConfig = SegLossConfig()):
    """Loss from voxel logits and its gradient w.r.t. those logits.

    Returns ``(total, {"dice": .., "ce": ..}, grad)``.
    """
    probs = voxel_softmax(voxel_logits)
    dice = dice_loss(probs, labels, cfg.smooth)
    ce = ce_loss(probs, labels)
    g_p = np.zeros_like(probs)
    if cfg.dice_weight:
        g_p += cfg.dice_weight * dice_grad(probs, labels, cfg.smooth)
    if cfg.ce_weight:
        g_p += cfg.ce_weight * ce_grad(probs, labels)
    g_z = probs * (g_p - np.sum(probs * g_p, axis=0, keepdims=True))
    total = cfg.dice_weight * dice + cfg.ce_weight * ce
    return total, {"dice": dice, "ce": ce}, g_z


def node_seg_loss_and_grad(node_logits, labels, layout: PatchLayout, cfg: SegLossConfig = SegLossConfig()):
    """Seg loss of broadcast node logits; gradient returned per node ``(N, C)``."""
    vox = inverse_patch_map(node_logits, layout)
    total, parts, g_vox = seg_loss_and_grad(vox, labels, cfg)
    return total, parts, patch_sum(g_vox, layout)


def predict_labels(node_logits, layout: PatchLayout) -> np.ndarray:
    return np.argmax(inverse_patch_map(node_logits, layout), axis=0).astype(np.uint8)


# --- metrics ---------------------------------------------------------------------

def dsc_metric(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a face neighbor outside the mask or outside the volume."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure, border_value=0)


def volume_diagonal(shape, spacing) -> float:
    return float(np.sqrt(np.sum((np.asarray(shape, float) * np.asarray(spacing, float)) ** 2)))


def hd95_metric(pred: np.ndarray, truth: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ValueError("mask shapes differ")
    has_p, has_t = pred.any(), truth.any()
    if not has_p and not has_t:
        return 0.0
    if has_p != has_t:
        return volume_diagonal(pred.shape, spacing)
    scale = np.asarray(spacing, dtype=float)
    bp = np.argwhere(boundary(pred)) * scale
    bt = np.argwhere(boundary(truth)) * scale
    d_pt = cKDTree(bt).query(bp)[0]
    d_tp = cKDTree(bp).query(bt)[0]
    return float(np.percentile(np.concatenate([d_pt, d_tp]), 95))


def region_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    return {name: np.isin(labels, classes) for name, classes in REGIONS.items()}


def evaluate_regions(pred_labels: np.ndarray, true_labels: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> SegReport:
    if pred_labels.shape != true_labels.shape:
        raise ValueError("label volumes differ in shape")
    pm, tm = region_masks(pred_labels), region_masks(true_labels)
    return SegReport({r: dsc_metric(pm[r], tm[r]) for r in REGIONS},
                     {r: hd95_metric(pm[r], tm[r], spacing) for r in REGIONS})
