"""The multi-scale change detector and its ablation variants.

The fused feature difference is resized to every decoder scale, refined
there by a difference enhancer, chained coarse-to-fine (each refined map
is concatenated with the upsampled previous fusion and convolved), and
every scale emits a two-channel change map. The final map fuses all scale
maps plus the map predicted straight from the fused difference.

Variants swap or bypass pieces of this pipeline:

- full             the complete model
- no_enhance       refined map := resized difference (no enhancer at all)
- cnn_enhance      enhancer replaced by four conv+BN+ReLU layers
- naive_multiscale per-scale fusion without the coarse-to-fine chain
- single_scale     only the finest decoder scale is refined and fused
- no_tau_diff      guided transformer replaced by a single 3x3 conv
- no_tau_refque    context transformers replaced by single 3x3 convs

Weight streams are keyed per component, so two variants share identical
weights on every component they have in common (given the same seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import DifferenceEnhancer, IdetConfig
from .backbone import (
    FUSED_CHANNELS,
    BasicChangeDetector,
    DifferenceFusion,
    UNetBackbone,
    UNetConfig,
    feature_difference,
)
from .nn import BatchNorm2d, Conv2d, Module, ModuleList, component_rng
from .tensor import ConfigError, ShapeError, Tensor

VARIANTS = (
    "full",
    "no_enhance",
    "cnn_enhance",
    "naive_multiscale",
    "single_scale",
    "no_tau_diff",
    "no_tau_refque",
)

# spatial-reduction ratio per decoder scale, coarse to fine: the finest
# scales carry the most tokens, so they get the strongest key/value pooling
SR_SCHEDULE = (1, 1, 2, 4, 8)


@dataclass
class MsIdetConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    idet: IdetConfig = field(default_factory=IdetConfig)
    scales: int = 5
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if self.scales != 5:
            raise ConfigError(f"scales is fixed at 5, got {self.scales}")


@dataclass
class ChangeMaps:
    """Every intermediate needed for supervision and for the noise study."""

    fused_diff: Tensor
    refined: list[Tensor]
    chained: list[Tensor]
    scale_maps: list[Tensor]
    base_map: Tensor
    final_map: Tensor

    def supervised_maps(self) -> list[Tensor]:
        """Maps that receive a loss term: base, per-scale, final."""
        return [self.base_map, *self.scale_maps, self.final_map]


class _ChainConv(Module):
    """Three 3x3 conv+ReLU stages: in -> in/2 -> in/2 -> out."""

    def __init__(self, cin, cout, rng, dtype):
        super().__init__()
        half = cin // 2
        self.conv1 = Conv2d(cin, half, 3, rng, padding=1, dtype=dtype)
        self.conv2 = Conv2d(half, half, 3, rng, padding=1, dtype=dtype)
        self.conv3 = Conv2d(half, cout, 3, rng, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        return T.relu(self.conv3(x))

    __call__ = forward


class _ConvEnhancer(Module):
    """Four conv+BN+ReLU layers standing in for the transformer refiner."""

    def __init__(self, channels, rng, dtype):
        super().__init__()
        self.convs = ModuleList()
        self.norms = ModuleList()
        cin = 3 * channels
        for _ in range(4):
            self.convs.append(Conv2d(cin, channels, 3, rng, padding=1, dtype=dtype))
            self.norms.append(BatchNorm2d(channels, dtype=dtype))
            cin = channels

    def forward(self, rx: Tensor, ry: Tensor, d: Tensor) -> Tensor:
        x = T.concat_channels([d, rx, ry])
        for conv, norm in zip(self.convs, self.norms):
            x = T.relu(norm(conv(x)))
        return x

    __call__ = forward


class MultiScaleChangeDetector(Module):
    kind = "msidet"

    def __init__(self, cfg: MsIdetConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.cfg = cfg or MsIdetConfig()
        self.seed = seed
        self.trained_steps = 0
        variant = self.cfg.variant
        c = self.cfg.idet.channels
        dec_ch = self.cfg.unet.decoder_channels

        self.backbone = UNetBackbone(self.cfg.unet, seed, dtype)
        self.fuse = DifferenceFusion(self.cfg.unet, seed, dtype)

        self.scale_indices = (
            [self.cfg.scales - 1] if variant == "single_scale"
            else list(range(self.cfg.scales))
        )
        self.proj_r = ModuleList()
        self.proj_d = ModuleList()
        self.enhancers = ModuleList()
        self.chain_convs = ModuleList()
        self.heads = ModuleList()
        for pos, idx in enumerate(self.scale_indices):
            tag = f"scale{idx}"
            self.proj_r.append(
                Conv2d(dec_ch[idx], c, 1, component_rng(seed, f"{tag}.proj_r"),
                       dtype=dtype)
            )
            self.proj_d.append(
                Conv2d(FUSED_CHANNELS, c, 1, component_rng(seed, f"{tag}.proj_d"),
                       dtype=dtype)
            )
            if variant == "cnn_enhance":
                self.enhancers.append(
                    _ConvEnhancer(c, component_rng(seed, f"{tag}.cnn"), dtype)
                )
            elif variant == "no_enhance":
                pass
            else:
                scale_cfg = IdetConfig(
                    channels=c,
                    heads=self.cfg.idet.heads,
                    sr_ratio=SR_SCHEDULE[idx],
                    mlp_ratio=self.cfg.idet.mlp_ratio,
                    iterations=self.cfg.idet.iterations,
                    mlp_reads_z=self.cfg.idet.mlp_reads_z,
                )
                self.enhancers.append(
                    DifferenceEnhancer(
                        scale_cfg,
                        component_rng(seed, f"{tag}.enhancer"),
                        use_context_transformers=variant != "no_tau_refque",
                        use_guided_transformer=variant != "no_tau_diff",
                        dtype=dtype,
                    )
                )
            chain_in = c if (pos == 0 or variant == "naive_multiscale") else 2 * c
            self.chain_convs.append(
                _ChainConv(chain_in, c, component_rng(seed, f"{tag}.chain"), dtype)
            )
            self.heads.append(
                Conv2d(c, 2, 3, component_rng(seed, f"{tag}.head"),
                       padding=1, dtype=dtype)
            )
        self.base_head = Conv2d(
            FUSED_CHANNELS, 2, 3, component_rng(seed, "base_head"),
            padding=1, dtype=dtype,
        )
        fusion_in = 2 * (len(self.scale_indices) + 1)
        if variant != "single_scale" and fusion_in != 12:
            raise ConfigError(
                f"final fusion expects 12 input channels, got {fusion_in}"
            )
        self.final_fusion = Conv2d(
            fusion_in, 2, 3, component_rng(seed, "final_fusion"),
            padding=1, dtype=dtype,
        )

    # -- staged forward: the noise study perturbs the fused difference ----

    def forward_to_diff(self, x: Tensor, y: Tensor):
        if x.shape != y.shape:
            raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
        px = self.backbone(x)
        py = self.backbone(y)
        diffs = feature_difference(px, py)
        fused = self.fuse(diffs, x.shape[2], x.shape[3])
        ctx = {"px": px, "py": py, "size": (x.shape[2], x.shape[3])}
        return fused, ctx

    def predict_from_diff(self, fused: Tensor, ctx: dict) -> ChangeMaps:
        px, py = ctx["px"], ctx["py"]
        h, w = ctx["size"]
        variant = self.cfg.variant

        refined: list[Tensor] = []
        chained: list[Tensor] = []
        scale_maps: list[Tensor] = []
        prev = None
        for pos, idx in enumerate(self.scale_indices):
            rx, ry = px.decoder_reps[idx], py.decoder_reps[idx]
            sh, sw = rx.shape[2], rx.shape[3]
            d_here = self.proj_d[pos](T.upsample_bilinear(fused, sh, sw))
            if variant == "no_enhance":
                d_hat = d_here
            else:
                rx_p = self.proj_r[pos](rx)
                ry_p = self.proj_r[pos](ry)
                d_hat = self.enhancers[pos](rx_p, ry_p, d_here)
            refined.append(d_hat)
            if prev is None or variant == "naive_multiscale":
                fused_in = d_hat
            else:
                prev_up = T.upsample_bilinear(prev, sh, sw)
                fused_in = T.concat_channels([d_hat, prev_up])
            prev = self.chain_convs[pos](fused_in)
            chained.append(prev)
            scale_maps.append(self.heads[pos](prev))

        base_map = self.base_head(fused)
        stacked = T.concat_channels(
            [T.upsample_bilinear(m, h, w) for m in [base_map, *scale_maps]]
        )
        if variant == "full":
            assert stacked.shape[1] == 12, (
                f"final fusion input has {stacked.shape[1]} channels"
            )
        final = self.final_fusion(stacked)
        return ChangeMaps(
            fused_diff=fused,
            refined=refined,
            chained=chained,
            scale_maps=scale_maps,
            base_map=base_map,
            final_map=final,
        )

    def forward(self, x: Tensor, y: Tensor) -> ChangeMaps:
        fused, ctx = self.forward_to_diff(x, y)
        return self.predict_from_diff(fused, ctx)

    __call__ = forward

    def config_block(self) -> dict:
        return {
            "kind": self.kind,
            "variant": self.cfg.variant,
            "unet.base_channels": self.cfg.unet.base_channels,
            "unet.depth": self.cfg.unet.depth,
            "unet.in_channels": self.cfg.unet.in_channels,
            "idet.channels": self.cfg.idet.channels,
            "idet.heads": self.cfg.idet.heads,
            "idet.mlp_ratio": self.cfg.idet.mlp_ratio,
            "idet.iterations": self.cfg.idet.iterations,
            "idet.mlp_reads_z": self.cfg.idet.mlp_reads_z,
            "scales": self.cfg.scales,
            "seed": self.seed,
            "trained_steps": self.trained_steps,
        }


def build_from_config(block: dict[str, str], dtype=np.float32):
    """Reconstruct a model from a checkpoint's key=value sidecar."""
    kind = block.get("kind")
    seed = int(block.get("seed", 0))
    unet = UNetConfig(
        base_channels=int(block.get("unet.base_channels", 16)),
        depth=int(block.get("unet.depth", 5)),
        in_channels=int(block.get("unet.in_channels", 3)),
    )
    if kind == "basic":
        model = BasicChangeDetector(unet, seed=seed, dtype=dtype)
    elif kind == "msidet":
        idet = IdetConfig(
            channels=int(block.get("idet.channels", 32)),
            heads=int(block.get("idet.heads", 4)),
            mlp_ratio=int(block.get("idet.mlp_ratio", 2)),
            iterations=int(block.get("idet.iterations", 2)),
            mlp_reads_z=block.get("idet.mlp_reads_z", "False") == "True",
        )
        cfg = MsIdetConfig(
            unet=unet,
            idet=idet,
            scales=int(block.get("scales", 5)),
            variant=block.get("variant", "full"),
        )
        model = MultiScaleChangeDetector(cfg, seed=seed, dtype=dtype)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    model.trained_steps = int(block.get("trained_steps", 0))
    return model
