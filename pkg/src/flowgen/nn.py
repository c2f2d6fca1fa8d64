"""Model building blocks on top of the tensor tape.

Modules own named parameters; nesting builds dotted names so model state maps
one-to-one onto checkpoint entries.  All randomness in initialization comes
from a caller-supplied generator, which keeps model construction replayable.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .util import ContractError

NEG_INF = float("-inf")


class Module:
    """Base class: attribute assignment of Tensors / Modules registers them."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, p in self._params.items():
            out[f"{prefix}{name}"] = p
        for name, child in self._children.items():
            out.update(child.named_parameters(prefix=f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix).items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters(prefix)
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ContractError(f"checkpoint missing parameters: {missing[:5]}")
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ContractError(
                    f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr.astype(p.data.dtype, copy=False)


def param(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    if std == 0.0:
        data = np.zeros(shape, dtype=np.float32)
    else:
        data = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Tensor(data, requires_grad=True)


class Linear(Module):
    """y = x W + b; leading axes of x are flattened and restored."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 std: float | None = None, bias: bool = True):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        self.weight = param(rng, (d_in, d_out), std)
        self.has_bias = bias
        if bias:
            self.bias = param(rng, (d_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if x.shape[-1] != self.d_in:
            raise ContractError(f"Linear: input width {x.shape[-1]} != {self.d_in}")
        flat = T.reshape(x, (-1, self.d_in)) if len(x.shape) != 2 else x
        y = T.matmul(flat, self.weight)
        if self.has_bias:
            y = T.add(y, self.bias)
        if len(lead) != 1:
            y = T.reshape(y, (*lead, self.d_out))
        return y


class LayerNorm(Module):
    """Learned-affine layer norm over the last axis."""

    def __init__(self, d: int, affine: bool = True):
        super().__init__()
        self.d = d
        self.affine = affine
        if affine:
            self.gain = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
            self.bias = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.affine:
            return T.layernorm(x, self.gain, self.bias)
        return T.layernorm(x)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, T, D] -> [B*h, T, D/h]"""
    b, t, d = x.shape
    dh = d // n_heads
    x = T.reshape(x, (b, t, n_heads, dh))
    x = T.permute(x, (0, 2, 1, 3))
    return T.reshape(x, (b * n_heads, t, dh))


def _merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B*h, T, D/h] -> [B, T, D]"""
    bh, t, dh = x.shape
    b = bh // n_heads
    x = T.reshape(x, (b, n_heads, t, dh))
    x = T.permute(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, n_heads * dh))


def _key_mask_bias(key_mask: np.ndarray | None, n_heads: int, t_q: int) -> np.ndarray | None:
    """Turn a [B, T_k] boolean mask (True = real) into an additive [B*h, T_q, T_k]
    bias with -inf on masked keys.  Constant, so it never enters the tape."""
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    b, tk = key_mask.shape
    bias = np.where(key_mask[:, None, None, :], 0.0, NEG_INF).astype(np.float32)
    return np.broadcast_to(bias, (b, n_heads, t_q, tk)).reshape(b * n_heads, t_q, tk)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
              key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with optional key masking.

    q: [B, T_q, D]; k, v: [B, T_k, D].  Masked keys receive exactly zero
    weight; a fully-masked query row yields a zero output vector.
    """
    b, t_q, d = q.shape
    if d % n_heads != 0:
        raise ContractError(f"attention: width {d} not divisible by {n_heads} heads")
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scores = T.matmul(qh, T.transpose(kh))
    scores = T.scale(scores, 1.0 / math.sqrt(d // n_heads))
    weights = T.softmax(scores, bias=_key_mask_bias(key_mask, n_heads, t_q))
    out = T.matmul(weights, vh)
    return _merge_heads(out, n_heads)


class SelfAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.out = Linear(rng, d_model, d_model)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        y = attention(self.q(x), self.k(x), self.v(x), self.n_heads, key_mask)
        return self.out(y)


class CrossAttention(Module):
    """Queries from the token stream, keys/values from a context sequence."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_context: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_context, d_model)
        self.v = Linear(rng, d_context, d_model)
        self.out = Linear(rng, d_model, d_model, std=0.02)

    def __call__(self, x: Tensor, context: Tensor,
                 context_mask: np.ndarray | None = None) -> Tensor:
        y = attention(self.q(x), self.k(context), self.v(context), self.n_heads, context_mask)
        return self.out(y)


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, expansion: int = 4):
        super().__init__()
        self.fc1 = Linear(rng, d_model, expansion * d_model)
        self.fc2 = Linear(rng, expansion * d_model, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer block: self-attention + MLP with residuals."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        super().__init__()
        self.norm1 = LayerNorm(d_model)
        self.attn = SelfAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.mlp = MLP(rng, d_model)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), key_mask))
        return T.add(x, self.mlp(self.norm2(x)))


def expand_rows(per_group: Tensor, group_size: int) -> Tensor:
    """Tile a [B, D] tensor to [B*group_size, D] rows (grad scatter-adds back).

    This is the sanctioned route for per-image conditioning applied to every
    patch token, replacing general broadcasting.
    """
    b = per_group.shape[0]
    ids = np.repeat(np.arange(b), group_size)
    return T.gather_rows(per_group, ids)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-normalize a [B, D] tensor to unit L2 norm (on the tape)."""
    if len(x.shape) != 2:
        raise ContractError(f"l2_normalize expects [B,D], got {x.shape}")
    sq = T.sum_(T.mul(x, x), axis=-1, keepdims=True)
    inv = T.pow_scalar(T.add(sq, Tensor(np.float32(eps))), -0.5)
    ones = Tensor(np.ones((1, x.shape[1]), dtype=np.float32))
    return T.mul(x, T.matmul(inv, ones))


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over real (mask=True) positions of a [B, T, D] sequence -> [B, D]."""
    mask = np.asarray(mask, dtype=bool)
    b, t, d = x.shape
    if mask.shape != (b, t):
        raise ContractError(f"pool mask shape {mask.shape} != {(b, t)}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ContractError("pool: a sequence has no real positions")
    w = (mask.astype(np.float32) / counts[:, None].astype(np.float32))
    weighted = T.mul(x, Tensor(w[:, :, None] * np.ones((1, 1, d), dtype=np.float32)))
    return T.sum_(weighted, axis=1)
