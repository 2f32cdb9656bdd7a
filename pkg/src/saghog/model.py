"""ViT masked autoencoder over 32x32 patches and the NetRVLAD encoding head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Tensor, param
from .autodiff import ops as T

IMG_SIZE = 32


@dataclass
class ViTConfig:
    patch_size: int = 4
    in_chans: int = 3
    dim: int = 512
    depth: int = 8
    heads: int | None = None
    decoder_dim: int = 256
    decoder_depth: int = 1
    decoder_heads: int | None = None
    mlp_ratio: float = 4.0
    target_dim: int = 9
    clusters: int = 100
    netrvlad_mode: str = "class_token"

    def __post_init__(self):
        if IMG_SIZE % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not divide {IMG_SIZE}")
        if self.heads is None:
            self.heads = max(1, self.dim // 64)
        if self.decoder_heads is None:
            self.decoder_heads = max(1, self.decoder_dim // 64)
        if self.dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("embedding dims must be divisible by their head counts")
        if self.netrvlad_mode not in ("class_token", "tokens"):
            raise ValueError(f"unknown NetRVLAD mode {self.netrvlad_mode!r}")

    @property
    def num_tokens(self) -> int:
        return (IMG_SIZE // self.patch_size) ** 2

    @property
    def token_pixels(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# input handling


def to_input(patches: np.ndarray, in_chans: int, dtype=np.float32) -> np.ndarray:
    """Map uint8 / bool patches to ``(B, 32, 32, C)`` floats in [-1, 1].

    Binary patches are rendered ink-dark. Gray input is repeated to 3
    channels when the model expects color, color is averaged when it expects
    one channel.
    """
    p = np.asarray(patches)
    if p.dtype == bool:
        x = np.where(p, 0.0, 1.0)
    else:
        x = p.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[..., None]
    if x.shape[-1] != in_chans:
        if in_chans == 3 and x.shape[-1] == 1:
            x = np.repeat(x, 3, axis=-1)
        elif in_chans == 1:
            x = x.mean(axis=-1, keepdims=True)
        else:
            raise ValueError(f"cannot adapt {x.shape[-1]} channels to {in_chans}")
    return (2.0 * x - 1.0).astype(dtype)


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """``(B, 32, 32, C)`` -> ``(B, N, p*p*C)``, row-major over token positions."""
    b, h, w, c = x.shape
    if h != IMG_SIZE or w != IMG_SIZE:
        raise ValueError(f"expected {IMG_SIZE}x{IMG_SIZE} input, got {h}x{w}")
    g = h // patch_size
    x = x.reshape(b, g, patch_size, g, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * c)


# ---------------------------------------------------------------------------
# masking


@dataclass
class MaskPlan:
    """Per-sample visible/masked token indices (class token excluded)."""

    visible: np.ndarray
    masked: np.ndarray
    ratio: float = 0.75

    def __len__(self) -> int:
        return self.visible.shape[0]


def mask_count(ratio: float, n: int = 64) -> int:
    # round half away from zero
    return int(np.floor(ratio * n + 0.5))


def plan_mask(rng: np.random.Generator, ratio: float = 0.75, batch: int = 1, n: int = 64) -> MaskPlan:
    """Uniform random masking, ``round(ratio * n)`` masked tokens per sample."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must be in (0, 1)")
    m = mask_count(ratio, n)
    order = np.argsort(rng.random((batch, n)), axis=1, kind="stable")
    masked = np.sort(order[:, :m], axis=1)
    visible = np.sort(order[:, m:], axis=1)
    return MaskPlan(visible=visible, masked=masked, ratio=ratio)


def token_dropout_mask(batch: int, n_tokens: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep-mask over ``1 + n_tokens`` positions; the class token (index 0) is always kept."""
    keep = np.ones((batch, n_tokens + 1), dtype=bool)
    if p > 0:
        keep[:, 1:] = rng.random((batch, n_tokens)) >= p
    return keep


def token_dropout(tokens: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    """Remove non-class tokens of one ``(1 + N, D)`` sequence independently with probability ``p``."""
    keep = token_dropout_mask(1, tokens.shape[0] - 1, p, rng)[0]
    return tokens[keep]


# ---------------------------------------------------------------------------
# transformer


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None, return_attn: bool = False):
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.matmul(q, T.swapaxes(k, -1, -2)) * float((d // h) ** -0.5)
        if key_mask is not None:
            att = T.where(key_mask[:, None, None, :], att, -1e9)
        att = T.softmax(att, axis=-1)
        out = T.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        out = self.proj(out)
        return (out, att.data) if return_attn else out


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2 * std, 2 * std)


class Encoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.token_pixels, cfg.dim, rng)
        self.cls_token = param(_trunc_normal(rng, (1, 1, cfg.dim)))
        self.pos_embed = param(_trunc_normal(rng, (cfg.num_tokens + 1, cfg.dim)))
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)

    def embed(self, x: np.ndarray, visible: np.ndarray | None = None) -> Tensor:
        """Token embeddings with the class token prepended, before any block."""
        tokens = patchify(x, self.cfg.patch_size)
        b = tokens.shape[0]
        if visible is None:
            visible = np.broadcast_to(np.arange(self.cfg.num_tokens), (b, self.cfg.num_tokens))
        else:
            tokens = np.take_along_axis(tokens, visible[..., None], axis=1)
        t = self.patch_embed(Tensor(tokens, dtype=self.pos_embed.dtype))
        t = t + T.embedding(self.pos_embed, visible + 1)
        cls = T.broadcast_to(self.cls_token + self.pos_embed[0:1][None], (b, 1, self.cfg.dim))
        return T.concat([cls, t], axis=1)

    def __call__(self, x: np.ndarray, visible: np.ndarray | None = None, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.embed(x, visible)
        for blk in self.blocks:
            h = blk(h, key_mask)
        return self.norm(h)


class Decoder(Module):
    """Lightweight decoder predicting one target vector per masked token."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = Linear(cfg.dim, cfg.decoder_dim, rng)
        self.mask_token = param(_trunc_normal(rng, (1, 1, cfg.decoder_dim)))
        self.pos_embed = param(_trunc_normal(rng, (cfg.num_tokens + 1, cfg.decoder_dim)))
        self.blocks = [Block(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, rng) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(cfg.decoder_dim)
        self.pred = Linear(cfg.decoder_dim, cfg.target_dim, rng)

    def __call__(self, latent: Tensor, plan: MaskPlan, mask_tokens: Tensor | None = None) -> Tensor:
        """Return predictions of shape ``(B, n_masked, target_dim)``.

        The sequence is laid out as ``[cls, visible..., masked...]``; position
        is conveyed only through the added embeddings, so no un-shuffling is
        needed. ``mask_tokens`` overrides the shared mask token (tests only).
        """
        b = latent.shape[0]
        m = plan.masked.shape[1]
        y = self.embed(latent)
        if mask_tokens is None:
            mask_tokens = T.broadcast_to(self.mask_token, (b, m, self.cfg.decoder_dim))
        pos_idx = np.concatenate([np.zeros((b, 1), dtype=int), plan.visible + 1, plan.masked + 1], axis=1)
        seq = T.concat([y, mask_tokens], axis=1) + T.embedding(self.pos_embed, pos_idx)
        for blk in self.blocks:
            seq = blk(seq)
        seq = self.norm(seq)
        n_keep = seq.shape[1] - m
        return self.pred(seq[:, n_keep:])


class NetRVLAD(Module):
    """Soft-assignment VLAD without centre subtraction.

    ``V_k = sum_i softmax_k(x_i W + b) x_i``, intra-normalized per cluster,
    flattened and l2-normalized.
    """

    def __init__(self, dim: int, clusters: int, rng: np.random.Generator):
        self.clusters = clusters
        self.weight = param(rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, clusters)))
        self.bias = param(np.zeros(clusters))

    def __call__(self, x: Tensor, token_mask: np.ndarray | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[1] == 0:
            raise ValueError("NetRVLAD needs at least one descriptor per sample")
        b, n, d = x.shape
        a = T.softmax(T.matmul(x, self.weight) + self.bias, axis=-1)
        if token_mask is not None:
            a = a * token_mask[..., None].astype(a.dtype)
        v = T.matmul(T.swapaxes(a, 1, 2), x)
        v = T.l2_normalize(v, axis=-1)
        return T.l2_normalize(v.reshape(b, self.clusters * d), axis=-1)


class MaskedAutoencoder(Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def __call__(self, x: np.ndarray, plan: MaskPlan) -> Tensor:
        return self.decoder(self.encoder(x, plan.visible), plan)


class WriterNet(Module):
    """Encoder followed by NetRVLAD, producing one unit-norm embedding per patch."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng)
        self.head = NetRVLAD(cfg.dim, cfg.clusters, rng)

    @property
    def out_dim(self) -> int:
        return self.cfg.dim * self.cfg.clusters

    def __call__(self, x: np.ndarray, keep: np.ndarray | None = None) -> Tensor:
        h = self.encoder(x, key_mask=keep)
        if self.cfg.netrvlad_mode == "class_token":
            return self.head(h[:, :1])
        return self.head(h[:, 1:], None if keep is None else keep[:, 1:])


def count_parameters(module: Module) -> int:
    return sum(p.data.size for p in module.parameters())
