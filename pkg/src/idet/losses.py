"""Pixel-wise classification losses over two-channel change logits.

Ground truth is matched to each map's resolution by nearest-neighbor
downsampling, which keeps labels binary. Multiple supervision sums one
loss term per intermediate map plus the final map; single supervision
uses the final map alone.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .model import ChangeMaps
from .tensor import ConfigError, ShapeError, Tensor

LOSS_MODES = ("multi_ce", "single_ce", "multi_focal")


def resize_mask_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a (..., H, W) label mask."""
    h, w = mask.shape[-2], mask.shape[-1]
    if (h, w) == (out_h, out_w):
        return mask
    rows = np.minimum((np.arange(out_h) + 0.5) * h // out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w // out_w, w - 1).astype(int)
    return mask[..., rows[:, None], cols[None, :]]


def _check_gt(logits: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected (N,2,H,W) logits, got {logits.shape}")
    n, _, h, w = logits.shape
    if gt.shape != (n, h, w):
        raise ShapeError(f"mask shape {gt.shape} != ({n},{h},{w})")
    if not np.isin(gt, (0, 1)).all():
        raise ValueError("ground-truth mask must be binary (0/1)")
    return gt.astype(np.int64)


def cross_entropy_map(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]."""
    gt = _check_gt(logits, gt)
    return T.neg(T.mean_all(T.log_softmax_pick(logits, gt)))


def focal_loss_map(logits: Tensor, gt: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean of -(1 - p_t)**gamma * log(p_t); gamma == 0 is cross entropy."""
    if gamma < 0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    gt = _check_gt(logits, gt)
    logp = T.log_softmax_pick(logits, gt)
    weight = T.power(T.sub(1.0, T.exp(logp)), gamma)
    return T.neg(T.mean_all(T.mul(weight, logp)))


def total_loss(
    maps: ChangeMaps | Tensor,
    gt: np.ndarray,
    mode: str = "multi_ce",
    focal_gamma: float = 2.0,
) -> tuple[Tensor, dict[str, float]]:
    """Supervision over the predicted change maps.

    Returns the scalar loss and the per-map loss values keyed by map name
    (base, scale1.., final). The mask is given at input resolution and is
    resized per map.
    """
    if mode not in LOSS_MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; expected {LOSS_MODES}")
    gt = np.asarray(gt)

    def term(logits: Tensor) -> Tensor:
        small = resize_mask_nearest(gt, logits.shape[2], logits.shape[3])
        if mode == "multi_focal":
            return focal_loss_map(logits, small, focal_gamma)
        return cross_entropy_map(logits, small)

    if isinstance(maps, Tensor):
        if mode != "single_ce":
            raise ConfigError(
                f"mode {mode!r} needs intermediate maps; only final logits "
                f"were provided"
            )
        loss = term(maps)
        return loss, {"final": loss.item()}

    if mode == "single_ce":
        loss = term(maps.final_map)
        return loss, {"final": loss.item()}

    names = (
        ["base"]
        + [f"scale{i + 1}" for i in range(len(maps.scale_maps))]
        + ["final"]
    )
    per_map: dict[str, float] = {}
    loss = None
    for name, logits in zip(names, maps.supervised_maps()):
        part = term(logits)
        per_map[name] = part.item()
        loss = part if loss is None else T.add(loss, part)
    return loss, per_map
