"""Patch-transformer velocity network with timestep and caption conditioning.

Images enter as [C, H, W] pixel grids in [-1, 1], are right/bottom padded to
patch multiples, cut into non-overlapping patches, and processed by blocks
that combine adaptive layer-norm modulation (from timestep + pooled caption),
self-attention over patches, and cross-attention to caption tokens.  The
final head is zero-initialized so the predicted velocity is exactly zero at
initialization.

Positional encodings are 2-D sinusoidal functions of the patch row/column
only, so a small grid's encodings are a sub-block of a larger grid's and the
same weights serve every resolution up to the configured capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .util import ContractError


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 4
    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 4
    d_text: int = 64
    max_patches: int = 256
    channels: int = 3

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_patches < 1 or self.patch_size < 1:
            raise ContractError("max_patches and patch_size must be positive")

    @property
    def max_side(self) -> int:
        return self.patch_size * int(math.isqrt(self.max_patches))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass(frozen=True)
class PadSpec:
    """Original dims before right/bottom padding, for exact crop-back."""

    orig_h: int
    orig_w: int
    pad_h: int
    pad_w: int


def dynamic_pad(image: np.ndarray, patch_size: int, max_side: int,
                target: tuple[int, int] | None = None) -> tuple[np.ndarray, PadSpec]:
    """Zero-pad right/bottom to the next patch multiple, or to an explicit
    patch-aligned ``target`` canvas (for batching images of mixed sizes)."""
    if image.ndim != 3:
        raise ContractError(f"dynamic_pad: expected [C,H,W], got shape {image.shape}")
    c, h, w = image.shape
    if h > max_side or w > max_side:
        raise ContractError(f"dynamic_pad: {h}x{w} exceeds maximum side {max_side}")
    if target is None:
        th, tw = h + (-h) % patch_size, w + (-w) % patch_size
    else:
        th, tw = int(target[0]), int(target[1])
        if th % patch_size or tw % patch_size:
            raise ContractError(f"dynamic_pad: target {th}x{tw} not patch-aligned")
        if th < h or tw < w or th > max_side or tw > max_side:
            raise ContractError(
                f"dynamic_pad: target {th}x{tw} invalid for {h}x{w} (max side {max_side})")
    spec = PadSpec(orig_h=h, orig_w=w, pad_h=th - h, pad_w=tw - w)
    if spec.pad_h == 0 and spec.pad_w == 0:
        return image, spec
    out = np.zeros((c, th, tw), dtype=image.dtype)
    out[:, :h, :w] = image
    return out, spec


def crop_back(image: np.ndarray, spec: PadSpec) -> np.ndarray:
    return np.ascontiguousarray(image[:, : spec.orig_h, : spec.orig_w])


def pad_patch_mask(spec: PadSpec, patch_size: int) -> np.ndarray:
    """[h_p * w_p] booleans, True where a patch holds no real pixels."""
    hp = (spec.orig_h + spec.pad_h) // patch_size
    wp = (spec.orig_w + spec.pad_w) // patch_size
    rows = (np.arange(hp) * patch_size)[:, None]
    cols = (np.arange(wp) * patch_size)[None, :]
    mask = (rows >= spec.orig_h) | (cols >= spec.orig_w)
    return mask.reshape(-1)


def pad_pixel_mask(spec: PadSpec) -> np.ndarray:
    """[H, W] booleans, True on real (non-padding) pixels."""
    h = spec.orig_h + spec.pad_h
    w = spec.orig_w + spec.pad_w
    mask = np.zeros((h, w), dtype=bool)
    mask[: spec.orig_h, : spec.orig_w] = True
    return mask


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """[B,C,H,W] -> [B, h_p*w_p, C*P*P] raw pixel patches (pure reshape)."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ContractError(f"extract_patches: {h}x{w} not divisible by {patch_size}")
    hp, wp = h // patch_size, w // patch_size
    x = images.reshape(b, c, hp, patch_size, wp, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, hp * wp, c * patch_size * patch_size))


def assemble_patches(patches: np.ndarray, grid: tuple[int, int], channels: int,
                     patch_size: int) -> np.ndarray:
    """Inverse of extract_patches for numpy arrays."""
    hp, wp = grid
    b = patches.shape[0]
    x = patches.reshape(b, hp, wp, channels, patch_size, patch_size)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(x.reshape(b, channels, hp * patch_size, wp * patch_size))


def grid_position_encoding(hp: int, wp: int, d_model: int) -> np.ndarray:
    """[hp*wp, d_model] 2-D sinusoidal encoding; depends only on (row, col)."""
    if d_model % 2 != 0:
        raise ContractError("positional encoding needs even d_model")
    half = d_model // 2
    rows = np.repeat(np.arange(hp), wp).astype(np.float64)
    cols = np.tile(np.arange(wp), hp).astype(np.float64)
    remb = T.sinusoidal_embedding(rows, half).data
    cemb = T.sinusoidal_embedding(cols, half).data
    return np.concatenate([remb, cemb], axis=-1)


@dataclass
class PatchGrid:
    """Projected patch tokens plus grid geometry and padding mask."""

    tokens: Tensor          # [n_patches, d_model]
    grid: tuple[int, int]   # (h_p, w_p)
    pad_mask: np.ndarray    # [n_patches] bool, True = padding patch


class TimestepEmbedding(nn.Module):
    """Sinusoidal features of t in [0,1] through a 2-layer MLP -> [d_model]."""

    def __init__(self, rng: np.random.Generator, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.fc1 = nn.Linear(rng, d_model, d_model)
        self.fc2 = nn.Linear(rng, d_model, d_model)

    def __call__(self, t: np.ndarray) -> Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if (t < 0).any() or (t > 1).any():
            raise ContractError(f"timestep outside [0,1]: {t.min()}..{t.max()}")
        feats = T.sinusoidal_embedding(t * 1000.0, self.d_model)
        return self.fc2(T.gelu(self.fc1(feats)))


def _expand(per_image: Tensor, n: int, shape3: tuple[int, int, int]) -> Tensor:
    """[B, D] -> [B, n, D] tiling on the tape (adjoint sums back)."""
    return T.tile_rows(per_image, n)


class DiTBlock(nn.Module):
    """adaLN-modulated self-attention + cross-attention + MLP."""

    N_MOD = 9  # shift/scale/gate for self-attn and MLP, plus a gate trio slot for cross-attn

    def __init__(self, rng: np.random.Generator, d_model: int, d_text: int, n_heads: int):
        super().__init__()
        self.d_model = d_model
        self.mod = nn.Linear(rng, d_model, self.N_MOD * d_model, std=0.02)
        self.norm1 = nn.LayerNorm(d_model, affine=False)
        self.attn = nn.SelfAttention(rng, d_model, n_heads)
        self.norm_ca = nn.LayerNorm(d_model)
        self.cross = nn.CrossAttention(rng, d_model, d_text, n_heads)
        self.norm2 = nn.LayerNorm(d_model, affine=False)
        self.mlp = nn.MLP(rng, d_model)

    def _chunks(self, cond: Tensor, n_tokens: int, b: int) -> list[Tensor]:
        m = self.mod(T.gelu(cond))
        d = self.d_model
        out = []
        for i in range(self.N_MOD):
            piece = T.slice_(m, (slice(None), slice(i * d, (i + 1) * d)))
            out.append(_expand(piece, n_tokens, (b, n_tokens, d)))
        return out

    def __call__(self, x: Tensor, cond: Tensor, context: Tensor,
                 context_mask: np.ndarray, patch_key_mask: np.ndarray | None) -> Tensor:
        b, n, d = x.shape
        (shift1, scale1, gate1, gate_ca, shift2, scale2, gate2, scale_ca, shift_ca
         ) = self._chunks(cond, n, b)
        one = Tensor(np.ones(d, dtype=np.float32))

        h = self.norm1(x)
        h = T.add(T.mul(h, T.add(scale1, one)), shift1)
        x = T.add(x, T.mul(gate1, self.attn(h, key_mask=patch_key_mask)))

        h = self.norm_ca(x)
        h = T.add(T.mul(h, T.add(scale_ca, one)), shift_ca)
        x = T.add(x, T.mul(gate_ca, self.cross(h, context, context_mask=context_mask)))

        h = self.norm2(x)
        h = T.add(T.mul(h, T.add(scale2, one)), shift2)
        return T.add(x, T.mul(gate2, self.mlp(h)))


class VelocityDiT(nn.Module):
    """v_theta(x_t, t, caption): predicts the pixel-space velocity field."""

    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.patch_embed = nn.Linear(rng, patch_dim, cfg.d_model)
        self.t_embed = TimestepEmbedding(rng, cfg.d_model)
        self.cap_proj = nn.Linear(rng, cfg.d_text, cfg.d_model)
        self.blocks: list[DiTBlock] = []
        for i in range(cfg.n_layers):
            block = DiTBlock(rng, cfg.d_model, cfg.d_text, cfg.n_heads)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
        self.norm_final = nn.LayerNorm(cfg.d_model, affine=False)
        self.mod_final = nn.Linear(rng, cfg.d_model, 2 * cfg.d_model, std=0.02)
        self.head = nn.Linear(rng, cfg.d_model, patch_dim, std=0.0)

    def patchify(self, image: np.ndarray, pad_mask: np.ndarray | None = None) -> PatchGrid:
        """Single [C,H,W] image -> projected tokens with positions added."""
        cfg = self.config
        if image.ndim != 3 or image.shape[0] != cfg.channels:
            raise ContractError(f"patchify: expected [{cfg.channels},H,W], got {image.shape}")
        c, h, w = image.shape
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ContractError(f"patchify: {h}x{w} not patch-aligned; call dynamic_pad first")
        hp, wp = h // cfg.patch_size, w // cfg.patch_size
        raw = extract_patches(image[None], cfg.patch_size)[0]
        tokens = self.patch_embed(Tensor(raw))
        tokens = T.add(tokens, Tensor(grid_position_encoding(hp, wp, cfg.d_model)
                                      .astype(np.float32)))
        if pad_mask is None:
            pad_mask = np.zeros(hp * wp, dtype=bool)
        return PatchGrid(tokens=tokens, grid=(hp, wp), pad_mask=pad_mask)

    def __call__(self, x: np.ndarray, t: np.ndarray, context: Tensor,
                 context_mask: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        """Batched velocity: x [B,C,H,W] -> [B,C,H,W].

        pad_mask marks padding patches per image [B, n_patches]; their outputs
        are produced but excluded from attention keys, and the caller excludes
        them from the loss.
        """
        cfg = self.config
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or x.shape[1] != cfg.channels:
            raise ContractError(f"forward: expected [B,{cfg.channels},H,W], got {x.shape}")
        if not np.isfinite(x).all():
            raise ContractError("forward: non-finite input image")
        b, c, h, w = x.shape
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ContractError(f"forward: {h}x{w} not patch-aligned; call dynamic_pad first")
        hp, wp = h // cfg.patch_size, w // cfg.patch_size
        n = hp * wp
        if n > cfg.max_patches:
            raise ContractError(
                f"forward: {n} patches exceed capacity; requires max_patches >= {n}")
        if not isinstance(context, Tensor):
            context = Tensor(np.asarray(context, dtype=np.float32))
        if context.shape[0] != b or context.shape[2] != cfg.d_text:
            raise ContractError(
                f"forward: context shape {context.shape} incompatible with batch {b}, "
                f"d_text {cfg.d_text}")

        raw = extract_patches(x, cfg.patch_size)
        tokens = self.patch_embed(Tensor(raw.reshape(b * n, -1)))
        tokens = T.reshape(tokens, (b, n, cfg.d_model))
        pos = grid_position_encoding(hp, wp, cfg.d_model).astype(np.float32)
        tokens = T.add(tokens, Tensor(pos))

        pooled = nn.masked_mean_pool(context, context_mask)
        cond = T.add(self.t_embed(t), self.cap_proj(pooled))

        patch_key_mask = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        for block in self.blocks:
            tokens = block(tokens, cond, context, context_mask, patch_key_mask)

        tokens = self.norm_final(tokens)
        m = self.mod_final(T.gelu(cond))
        d = cfg.d_model
        shift = _expand(T.slice_(m, (slice(None), slice(0, d))), n, (b, n, d))
        sc = _expand(T.slice_(m, (slice(None), slice(d, 2 * d))), n, (b, n, d))
        one = Tensor(np.ones(d, dtype=np.float32))
        tokens = T.add(T.mul(tokens, T.add(sc, one)), shift)
        out = self.head(tokens)

        out = T.reshape(out, (b, hp, wp, c, cfg.patch_size, cfg.patch_size))
        out = T.permute(out, (0, 3, 1, 4, 2, 5))
        return T.reshape(out, (b, c, h, w))
