"""Noise-degradation study of the fused feature difference.

For each evaluation pair the model is run up to its fused-difference
tap; zero-mean Gaussian noise with standard deviation
alpha * |inside mean - outside mean| is added to the unchanged region
only, and the forward pass is resumed to measure F1 versus the severity
alpha. Change-region values are never touched, per-image noise streams
are derived from (seed, image index, alpha index), and alpha = 0
reproduces the clean evaluation exactly.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import ImagePair
from .losses import resize_mask_nearest
from .metrics import binarize, confusion, metrics_from_confusion
from .model import ChangeMaps
from .tensor import ConfigError, ShapeError, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(float(a) for a in range(5, 101, 5))


class DegenerateRegionError(ValueError):
    """An image whose mask has no inside or no outside pixels."""


@dataclass
class DegradeConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seed: int = 0
    enhancement: str = "idet"  # "none" routes through the basic detector

    def __post_init__(self):
        if self.enhancement not in ("none", "idet"):
            raise ConfigError(
                f"enhancement must be 'none' or 'idet', got {self.enhancement!r}"
            )
        alphas = tuple(float(a) for a in self.alphas)
        if not alphas or any(a < 0 for a in alphas):
            raise ConfigError("alphas must be nonnegative")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise ConfigError(f"alphas must be strictly increasing: {alphas}")
        self.alphas = alphas


@dataclass
class SweepRecord:
    alpha: float
    mean_f1: float
    per_image: list[float]


@dataclass
class SweepCurve:
    enhancement: str
    records: list[SweepRecord] = field(default_factory=list)
    skipped: int = 0

    def mean_f1(self, alpha_min: float = 0.0) -> float:
        values = [r.mean_f1 for r in self.records if r.alpha >= alpha_min]
        return float(np.mean(values))

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("alpha,enhancement,mean_f1,n_images\n")
            for rec in self.records:
                fh.write(
                    f"{rec.alpha:.6f},{self.enhancement},"
                    f"{rec.mean_f1:.6f},{len(rec.per_image)}\n"
                )


def region_means(diff, gt_small: np.ndarray) -> tuple[float, float]:
    """Mean of the difference map inside and outside the change region.

    `diff` is (C, h, w) (or a Tensor of that shape); the mask must already
    be on the same (h, w) grid. Means pool over all channels.
    """
    d = diff.data if isinstance(diff, Tensor) else np.asarray(diff)
    if d.ndim != 3 or gt_small.shape != d.shape[1:]:
        raise ShapeError(
            f"difference {d.shape} and mask {gt_small.shape} grids differ"
        )
    inside = gt_small.astype(bool)
    n_in = int(inside.sum())
    n_out = inside.size - n_in
    if n_in == 0 or n_out == 0:
        raise DegenerateRegionError(
            f"mask has {n_in} inside / {n_out} outside pixels"
        )
    return float(d[:, inside].mean()), float(d[:, ~inside].mean())


def inject_noise(
    diff: np.ndarray,
    gt_small: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    sigma_unit: float | None = None,
) -> np.ndarray:
    """Add N(0, (alpha*sigma_unit)^2) noise to unchanged pixels only.

    sigma_unit defaults to |inside mean - outside mean| of `diff` itself.
    Changed-region values are returned bit-identical.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    d = np.asarray(diff)
    if sigma_unit is None:
        inside_mean, outside_mean = region_means(d, gt_small)
        sigma_unit = abs(inside_mean - outside_mean)
    sigma = alpha * sigma_unit
    outside = ~gt_small.astype(bool)
    out = d.copy()
    noise = rng.normal(0.0, sigma, size=(d.shape[0], int(outside.sum())))
    out[:, outside] += noise.astype(d.dtype)
    return out


def alpha_sweep(model, pairs: list[ImagePair], cfg: DegradeConfig) -> SweepCurve:
    """Evaluate F1 at every severity; one record per configured alpha."""
    expected_kind = "basic" if cfg.enhancement == "none" else "msidet"
    if model.kind != expected_kind:
        raise ConfigError(
            f"enhancement={cfg.enhancement!r} needs a {expected_kind!r} model, "
            f"got {model.kind!r}"
        )
    if model.trained_steps == 0:
        warnings.warn(
            "sweeping an untrained model: the resulting curve is meaningless",
            stacklevel=2,
        )
    model.eval()
    dtype = model.parameters()[0].data.dtype
    per_alpha: list[list[float]] = [[] for _ in cfg.alphas]
    skipped = 0
    with no_grad():
        for img_idx, pair in enumerate(pairs):
            x = Tensor(pair.x[None].astype(dtype))
            y = Tensor(pair.y[None].astype(dtype))
            fused, ctx = model.forward_to_diff(x, y)
            d = fused.data[0]
            gt_small = resize_mask_nearest(pair.gt, d.shape[1], d.shape[2])
            try:
                inside_mean, outside_mean = region_means(d, gt_small)
            except DegenerateRegionError as exc:
                logger.warning("skipping %s: %s", pair.id, exc)
                skipped += 1
                continue
            sigma_unit = abs(inside_mean - outside_mean)
            for a_idx, alpha in enumerate(cfg.alphas):
                rng = np.random.default_rng((cfg.seed, img_idx, a_idx))
                noisy = inject_noise(d, gt_small, alpha, rng, sigma_unit)
                output = model.predict_from_diff(Tensor(noisy[None]), ctx)
                logits = (
                    output.final_map if isinstance(output, ChangeMaps) else output
                )
                pred = binarize(logits)[0]
                f1 = metrics_from_confusion(confusion(pred, pair.gt)).f1
                per_alpha[a_idx].append(f1)
    model.train()
    curve = SweepCurve(enhancement=cfg.enhancement, skipped=skipped)
    for alpha, values in zip(cfg.alphas, per_alpha):
        curve.records.append(
            SweepRecord(
                alpha=alpha,
                mean_f1=float(np.mean(values)) if values else 0.0,
                per_image=values,
            )
        )
    return curve
