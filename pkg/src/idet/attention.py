"""Transformer blocks that refine the fused feature difference.

Two context transformers summarize long-range structure in the reference
and query representations; their absolute difference, normalized and
passed through an MLP, becomes a guidance signal. A third, guided
transformer then updates the difference map, and can be applied
repeatedly, feeding each refined map back in as the next input.

Token layout is (N, H*W, C): row-major flattening of spatial positions,
so token k of a sample corresponds to pixel (k // W, k % W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class IdetConfig:
    channels: int = 32
    heads: int = 4
    sr_ratio: int = 1
    mlp_ratio: int = 2
    iterations: int = 2
    mlp_reads_z: bool = False  # alternative wiring of the guided block

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigError(
                f"channels ({self.channels}) must be divisible by heads "
                f"({self.heads})"
            )
        if self.sr_ratio not in (1, 2, 4, 8):
            raise ConfigError(f"sr_ratio must be one of 1/2/4/8, got {self.sr_ratio}")
        if not 0 <= self.iterations <= 8:
            raise ConfigError(
                f"iterations must be in [0, 8], got {self.iterations}"
            )


def tokenize(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, H*W, C) row-major token sequence."""
    n, c, h, w = x.shape
    return T.transpose(T.reshape(x, (n, c, h * w)), (0, 2, 1))


def detokenize(tokens: Tensor, h: int, w: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W); exact inverse of tokenize."""
    n, t, c = tokens.shape
    if t != h * w:
        raise ShapeError(f"token count {t} does not match {h}x{w}")
    return T.reshape(T.transpose(tokens, (0, 2, 1)), (n, c, h, w))


class EfficientSelfAttention(Module):
    """Multi-head self-attention with average-pooled keys/values.

    Queries come from every token; keys and values come from the token
    map spatially average-pooled by ``sr_ratio``, shrinking the attended
    sequence by sr_ratio**2. sr_ratio == 1 is plain attention.
    """

    def __init__(self, cfg: IdetConfig, rng, dtype=np.float32):
        super().__init__()
        c = cfg.channels
        self.heads = cfg.heads
        self.head_dim = c // cfg.heads
        self.sr_ratio = cfg.sr_ratio
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.q = Linear(c, c, rng, dtype)
        self.k = Linear(c, c, rng, dtype)
        self.v = Linear(c, c, rng, dtype)
        self.proj = Linear(c, c, rng, dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        x = T.reshape(x, (n, t, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        n, t, c = tokens.shape
        if t != h * w:
            raise ShapeError(f"token count {t} does not match {h}x{w}")
        source = tokens
        if self.sr_ratio > 1:
            if h % self.sr_ratio or w % self.sr_ratio:
                raise ConfigError(
                    f"sr_ratio {self.sr_ratio} does not divide spatial size "
                    f"({h},{w})"
                )
            pooled = T.pool2d("avg", detokenize(tokens, h, w), self.sr_ratio)
            source = tokenize(pooled)
        q = self._split_heads(self.q(tokens))
        k = self._split_heads(self.k(source))
        v = self._split_heads(self.v(source))
        attn = T.softmax_lastdim(
            T.mul(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        )
        out = T.bmm(attn, v)  # (N, heads, T, head_dim)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, t, c))
        return self.proj(out)

    __call__ = forward


class ContextTransformer(Module):
    """Pre-norm attention and MLP sub-blocks, each with a residual."""

    def __init__(self, cfg: IdetConfig, rng, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(cfg.channels, dtype=dtype)
        self.attn = EfficientSelfAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(cfg.channels, dtype=dtype)
        self.mlp = Mlp(cfg.channels, cfg.mlp_ratio, rng, dtype)

    def forward(self, tokens: Tensor, h: int, w: int) -> Tensor:
        z = T.add(self.attn(self.norm1(tokens), h, w), tokens)
        return T.add(self.mlp(self.norm2(z)), z)

    __call__ = forward


class DifferenceGuidance(Module):
    """|Tx - Ty| -> Norm -> MLP, producing the guidance token sequence."""

    def __init__(self, cfg: IdetConfig, rng, dtype=np.float32):
        super().__init__()
        self.norm = LayerNorm(cfg.channels, dtype=dtype)
        self.mlp = Mlp(cfg.channels, cfg.mlp_ratio, rng, dtype)

    def forward(self, tx: Tensor, ty: Tensor) -> Tensor:
        if tx.shape != ty.shape:
            raise ShapeError(f"token shapes differ: {tx.shape} vs {ty.shape}")
        return self.mlp(self.norm(T.abs_(T.sub(tx, ty))))

    __call__ = forward


class GuidedRefiner(Module):
    """Transformer block whose attention and MLP both read the guidance.

    Default wiring:  Z = MSA(Norm1(guide)) + d;  out = MLP(Norm2(guide)) + Z.
    With ``mlp_reads_z`` the MLP branch reads Norm2(Z) instead.
    """

    def __init__(self, cfg: IdetConfig, rng, dtype=np.float32):
        super().__init__()
        self.mlp_reads_z = cfg.mlp_reads_z
        self.norm1 = LayerNorm(cfg.channels, dtype=dtype)
        self.attn = EfficientSelfAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(cfg.channels, dtype=dtype)
        self.mlp = Mlp(cfg.channels, cfg.mlp_ratio, rng, dtype)

    def forward(self, d: Tensor, guide: Tensor, h: int, w: int) -> Tensor:
        if d.shape != guide.shape:
            raise ShapeError(
                f"difference/guidance token shapes differ: {d.shape} vs "
                f"{guide.shape}"
            )
        z = T.add(self.attn(self.norm1(guide), h, w), d)
        branch = z if self.mlp_reads_z else guide
        return T.add(self.mlp(self.norm2(branch)), z)

    __call__ = forward


class DifferenceEnhancer(Module):
    """One refinement unit: context transformers, guidance, guided updates.

    The guidance is computed once per call (the context inputs do not
    change across iterations); only the difference map is fed back. With
    ``iterations == 0`` the input map is returned untouched. The named
    transformers can each be swapped for a single 3x3 convolution, which
    is how the reduced variants are built.
    """

    def __init__(
        self,
        cfg: IdetConfig,
        rng,
        use_context_transformers: bool = True,
        use_guided_transformer: bool = True,
        dtype=np.float32,
    ):
        super().__init__()
        self.cfg = cfg
        self.use_context_transformers = use_context_transformers
        self.use_guided_transformer = use_guided_transformer
        c = cfg.channels
        if use_context_transformers:
            self.ref_block = ContextTransformer(cfg, rng, dtype)
            self.que_block = ContextTransformer(cfg, rng, dtype)
        else:
            self.ref_conv = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
            self.que_conv = Conv2d(c, c, 3, rng, padding=1, dtype=dtype)
        self.guidance = DifferenceGuidance(cfg, rng, dtype)
        if use_guided_transformer:
            self.refiner = GuidedRefiner(cfg, rng, dtype)
        else:
            self.refine_conv = Conv2d(2 * c, c, 3, rng, padding=1, dtype=dtype)

    def forward(self, rx: Tensor, ry: Tensor, d: Tensor) -> Tensor:
        if rx.shape != ry.shape:
            raise ShapeError(f"context shapes differ: {rx.shape} vs {ry.shape}")
        if d.shape[2:] != rx.shape[2:]:
            raise ShapeError(
                f"difference spatial size {d.shape[2:]} does not match "
                f"context {rx.shape[2:]}; resize the difference first"
            )
        if self.cfg.iterations == 0:
            return d
        h, w = d.shape[2], d.shape[3]
        if self.use_context_transformers:
            tx = self.ref_block(tokenize(rx), h, w)
            ty = self.que_block(tokenize(ry), h, w)
        else:
            tx = tokenize(self.ref_conv(rx))
            ty = tokenize(self.que_conv(ry))
        guide = self.guidance(tx, ty)
        if self.use_guided_transformer:
            d_tok = tokenize(d)
            for _ in range(self.cfg.iterations):
                d_tok = self.refiner(d_tok, guide, h, w)
            return detokenize(d_tok, h, w)
        guide_map = detokenize(guide, h, w)
        for _ in range(self.cfg.iterations):
            d = self.refine_conv(T.concat_channels([d, guide_map]))
        return d

    __call__ = forward
