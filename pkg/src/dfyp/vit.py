"""Compact vision transformer branch with learned positional embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, parameter
from .tensor import Tensor, add, gelu, matmul, mean, reshape, scale, softmax, transpose


@dataclass
class ViTConfig:
    image_size: int
    patch_size: int
    depth: int
    heads: int
    dim: int
    mlp_dim: int
    in_channels: int = 9
    head_dim: int | None = None

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide image size {self.image_size}")
        if min(self.depth, self.heads, self.dim, self.mlp_dim) < 1:
            raise ConfigError("depth, heads, dim and mlp_dim must be positive")
        if self.head_dim is None:
            # the sentinel2 preset pairs dim 128 with 6 heads; per-head width rounds up and
            # the Q/K/V projections map dim -> heads * head_dim.
            self.head_dim = math.ceil(self.dim / self.heads)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass
class PatchSequence:
    tokens: Tensor  # (N, num_patches, dim), positional table already added
    positions: Tensor  # (num_patches, dim)


def patchify(x: Tensor, patch: int) -> Tensor:
    """(N, C, H, W) -> (N, num_patches, C * patch * patch), patches row-major."""
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"{h}x{w} image is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    t = reshape(x, (n, c, gh, patch, gw, patch))
    t = transpose(t, (0, 2, 4, 1, 3, 5))
    return reshape(t, (n, gh * gw, c * patch * patch))


class PatchEmbed(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = Linear(cfg.in_channels * cfg.patch_size**2, cfg.dim, rng, init="xavier")
        self.pos = parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches, cfg.dim)))

    def forward(self, x: Tensor) -> PatchSequence:
        return patch_embed(x, self)


def patch_embed(x: Tensor, emb: PatchEmbed) -> PatchSequence:
    cfg = emb.cfg
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-1] != cfg.image_size or x.shape[-2] != cfg.image_size:
        raise ConfigError(f"ViT expects {cfg.image_size}x{cfg.image_size} input, got {x.shape[-2]}x{x.shape[-1]}")
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"ViT expects {cfg.in_channels} channels, got {x.shape[1]}")
    tokens = add(emb.proj(patchify(x, cfg.patch_size)), emb.pos)
    return PatchSequence(tokens, emb.pos)


class MHAParams(Module):
    def __init__(self, dim: int, inner: int, rng: np.random.Generator):
        self.q = Linear(dim, inner, rng, init="xavier")
        self.k = Linear(dim, inner, rng, init="xavier")
        self.v = Linear(dim, inner, rng, init="xavier")
        self.out = Linear(inner, dim, rng, init="xavier")
        self._last_attention: np.ndarray | None = None


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, tokens, inner = t.shape
    if inner % heads:
        raise ConfigError(f"projection width {inner} is not divisible by {heads} heads")
    return transpose(reshape(t, (n, tokens, heads, inner // heads)), (0, 2, 1, 3))


def mha(x: Tensor, params: MHAParams, heads: int) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated, then projected."""
    n, t, _ = x.shape
    q = _split_heads(params.q(x), heads)
    k = _split_heads(params.k(x), heads)
    v = _split_heads(params.v(x), heads)
    d_k = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d_k))
    attn = softmax(scores, axis=-1)
    params._last_attention = attn.data
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    return params.out(reshape(ctx, (n, t, heads * d_k)))


class EncoderBlock(Module):
    """Pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)) with GELU."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.heads = cfg.heads
        self.ln1 = LayerNorm(cfg.dim)
        self.attn = MHAParams(cfg.dim, cfg.inner_dim, rng)
        self.ln2 = LayerNorm(cfg.dim)
        self.ffn1 = Linear(cfg.dim, cfg.mlp_dim, rng, init="xavier")
        self.ffn2 = Linear(cfg.mlp_dim, cfg.dim, rng, init="xavier")

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, mha(self.ln1(x), self.attn, self.heads))
        return add(x, self.ffn2(gelu(self.ffn1(self.ln2(x)))))


def encoder_block(x: Tensor, block: EncoderBlock) -> Tensor:
    return block(x)


class ViTHead(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.ln = LayerNorm(cfg.dim)
        self.fc1 = Linear(cfg.dim, cfg.mlp_dim, rng, init="xavier")
        self.fc2 = Linear(cfg.mlp_dim, 1, rng, init="xavier")

    def forward(self, tokens: Tensor) -> Tensor:
        return vit_head(tokens, self)


def vit_head(tokens: Tensor, head: ViTHead) -> Tensor:
    pooled = head.ln(mean(tokens, axis=-2))
    out = head.fc2(gelu(head.fc1(pooled)))
    return reshape(out, out.shape[:-1])


class ViT(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.depth)]
        self.head = ViTHead(cfg, rng)

    def encode(self, x: Tensor) -> Tensor:
        tokens = self.embed(x).tokens
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.encode(x))

    def attention_maps(self) -> list[np.ndarray]:
        return [b.attn._last_attention for b in self.blocks]
