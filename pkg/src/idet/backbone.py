"""Siamese UNet feature extractor and the basic difference-based detector.

One network is applied to both images of a pair (shared weights), so
identical inputs produce identical pyramids and exactly-zero per-layer
feature differences. The per-layer absolute differences are resized to a
quarter of the input resolution, concatenated, and fused by a single
conv+ReLU into the working difference map; the basic detector maps that
fused difference straight to two-channel change logits with two convs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module, component_rng
from .tensor import ConfigError, ShapeError, Tensor

FUSED_CHANNELS = 32


@dataclass
class UNetConfig:
    base_channels: int = 16
    depth: int = 5
    in_channels: int = 3

    def __post_init__(self):
        if self.depth != 5:
            raise ConfigError(f"depth is fixed at 5, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")

    @property
    def encoder_channels(self) -> list[int]:
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 16 * b]

    @property
    def decoder_channels(self) -> list[int]:
        b = self.base_channels
        return [8 * b, 4 * b, 2 * b, b, b]


@dataclass
class FeaturePyramid:
    """Per-scale features of one image: encoder taps and decoder outputs.

    encoder_feats run coarse-ward (1/2 .. 1/32 of the input); decoder_reps
    run fine-ward (1/16 .. 1/1).
    """

    encoder_feats: list[Tensor] = field(default_factory=list)
    decoder_reps: list[Tensor] = field(default_factory=list)


def pyramid_shapes(cfg: UNetConfig, n: int, h: int, w: int):
    """Closed-form shape schedule for a given input size."""
    enc_sizes = []
    ch, cw = h, w
    for _ in range(cfg.depth):
        ch, cw = (ch + ch % 2) // 2, (cw + cw % 2) // 2
        enc_sizes.append((ch, cw))
    dec_sizes = [enc_sizes[cfg.depth - 2 - i] for i in range(cfg.depth - 1)]
    dec_sizes.append((h, w))
    enc = [
        (n, c, sh, sw) for c, (sh, sw) in zip(cfg.encoder_channels, enc_sizes)
    ]
    dec = [
        (n, c, sh, sw) for c, (sh, sw) in zip(cfg.decoder_channels, dec_sizes)
    ]
    return enc, dec


class _SqueezeStage(Module):
    """Two 3x3 conv+ReLU, then a stride-2 max pool (edge-padded if odd)."""

    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        if x.shape[2] % 2 or x.shape[3] % 2:
            x = T.pad2d(x, 0, x.shape[2] % 2, 0, x.shape[3] % 2, mode="edge")
        return T.pool2d("max", x, 2, 2)

    __call__ = forward


class _ExpandStage(Module):
    """Bilinear upsample to the skip's size, concat, two 3x3 conv+ReLU."""

    def __init__(self, cin, skip_channels, cout, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(cin + skip_channels, cout, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor | None, out_h: int, out_w: int) -> Tensor:
        x = T.upsample_bilinear(x, out_h, out_w)
        if skip is not None:
            x = T.concat_channels([x, skip])
        x = T.relu(self.conv1(x))
        return T.relu(self.conv2(x))

    __call__ = forward


class UNetBackbone(Module):
    """Five squeeze stages down, five expand stages back to full size."""

    def __init__(self, cfg: UNetConfig, seed: int, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        enc_ch = cfg.encoder_channels
        dec_ch = cfg.decoder_channels
        self.squeeze = _make_stage_list(
            _SqueezeStage,
            [(cfg.in_channels, enc_ch[0])]
            + [(enc_ch[i], enc_ch[i + 1]) for i in range(4)],
            seed,
            "backbone.squeeze",
            dtype,
        )
        expand_specs = []
        cin = enc_ch[4]
        for i in range(4):
            skip = enc_ch[3 - i]
            expand_specs.append((cin, skip, dec_ch[i]))
            cin = dec_ch[i]
        expand_specs.append((cin, 0, dec_ch[4]))
        self.expand = _make_stage_list(
            lambda a, b, c, rng, dt: _ExpandStage(a, b, c, rng, dt),
            expand_specs,
            seed,
            "backbone.expand",
            dtype,
        )

    def forward(self, image: Tensor) -> FeaturePyramid:
        h, w = image.shape[2], image.shape[3]
        if h < 32 or w < 32 or h % 16 or w % 16:
            raise ShapeError(
                f"input spatial size ({h},{w}) must be >= 32 and divisible by "
                f"16; pad or crop the images first"
            )
        feats = []
        x = image
        for stage in self.squeeze:
            x = stage(x)
            feats.append(x)
        reps = []
        x = feats[-1]
        for i, stage in enumerate(self.expand):
            if i < 4:
                skip = feats[3 - i]
                x = stage(x, skip, skip.shape[2], skip.shape[3])
            else:
                x = stage(x, None, h, w)
            reps.append(x)
        return FeaturePyramid(encoder_feats=feats, decoder_reps=reps)

    __call__ = forward


def _make_stage_list(factory, specs, seed, tag, dtype):
    from .nn import ModuleList

    stages = ModuleList()
    for i, spec in enumerate(specs):
        rng = component_rng(seed, f"{tag}.{i}")
        stages.append(factory(*spec, rng, dtype))
    return stages


def feature_difference(px: FeaturePyramid, py: FeaturePyramid) -> list[Tensor]:
    """Per-layer |F_x - F_y| over the encoder taps; symmetric, nonnegative."""
    if len(px.encoder_feats) != len(py.encoder_feats):
        raise ShapeError(
            f"pyramids have {len(px.encoder_feats)} vs "
            f"{len(py.encoder_feats)} encoder levels"
        )
    diffs = []
    for i, (fx, fy) in enumerate(zip(px.encoder_feats, py.encoder_feats)):
        if fx.shape != fy.shape:
            raise ShapeError(
                f"encoder level {i}: shapes {fx.shape} vs {fy.shape} differ"
            )
        diffs.append(T.abs_(T.sub(fx, fy)))
    return diffs


class DifferenceFusion(Module):
    """Resize per-layer differences to H/4 x W/4, concat, conv+ReLU."""

    def __init__(self, cfg: UNetConfig, seed: int, dtype=np.float32):
        super().__init__()
        cin = sum(cfg.encoder_channels)
        self.conv = Conv2d(
            cin, FUSED_CHANNELS, 3, component_rng(seed, "fuse.conv"),
            padding=1, dtype=dtype,
        )

    def forward(self, diffs: list[Tensor], input_h: int, input_w: int) -> Tensor:
        th, tw = input_h // 4, input_w // 4
        resized = [T.upsample_bilinear(d, th, tw) for d in diffs]
        return T.relu(self.conv(T.concat_channels(resized)))

    def pre_activation(self, diffs: list[Tensor], input_h: int, input_w: int) -> Tensor:
        """Fusion conv output before the ReLU (linearity test tap)."""
        th, tw = input_h // 4, input_w // 4
        resized = [T.upsample_bilinear(d, th, tw) for d in diffs]
        return self.conv(T.concat_channels(resized))

    __call__ = forward


class BasicHead(Module):
    """Two 3x3 convs (ReLU between), then bilinear upsample to full size."""

    def __init__(self, seed: int, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(
            FUSED_CHANNELS, FUSED_CHANNELS, 3,
            component_rng(seed, "basic_head.conv1"), padding=1, dtype=dtype,
        )
        self.conv2 = Conv2d(
            FUSED_CHANNELS, 2, 3, component_rng(seed, "basic_head.conv2"),
            padding=1, dtype=dtype,
        )

    def forward(self, fused: Tensor, out_h: int, out_w: int) -> Tensor:
        x = T.relu(self.conv1(fused))
        x = self.conv2(x)
        return T.upsample_bilinear(x, out_h, out_w)

    __call__ = forward


class BasicChangeDetector(Module):
    """Feature-difference change detector without any difference refinement."""

    kind = "basic"

    def __init__(self, cfg: UNetConfig | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        self.seed = seed
        self.backbone = UNetBackbone(self.cfg, seed, dtype)
        self.fuse = DifferenceFusion(self.cfg, seed, dtype)
        self.head = BasicHead(seed, dtype)
        self.trained_steps = 0

    def forward_to_diff(self, x: Tensor, y: Tensor):
        if x.shape != y.shape:
            raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
        px = self.backbone(x)
        py = self.backbone(y)
        diffs = feature_difference(px, py)
        fused = self.fuse(diffs, x.shape[2], x.shape[3])
        ctx = {"px": px, "py": py, "size": (x.shape[2], x.shape[3])}
        return fused, ctx

    def predict_from_diff(self, fused: Tensor, ctx: dict) -> Tensor:
        h, w = ctx["size"]
        return self.head(fused, h, w)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        fused, ctx = self.forward_to_diff(x, y)
        return self.predict_from_diff(fused, ctx)

    __call__ = forward

    def config_block(self) -> dict:
        return {
            "kind": self.kind,
            "unet.base_channels": self.cfg.base_channels,
            "unet.depth": self.cfg.depth,
            "unet.in_channels": self.cfg.in_channels,
            "seed": self.seed,
            "trained_steps": self.trained_steps,
        }
