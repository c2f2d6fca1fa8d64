"""Dense float tensors with a reverse-mode tape.

The op set is deliberately closed: matmul, elementwise add/sub/mul, scalar
scale, reshape, permute, concat, slice, sum/mean, softmax, log-softmax,
layer norm, GELU, exp/log/pow, row gather, and sinusoidal embeddings.  That
is everything the models in this package need.  Default dtype is float32;
float64 is supported so numerical verification (grad_check) can run above
the float32 noise floor.

Broadcasting is restricted to leading-axis expansion: the smaller operand's
shape must be an exact suffix of the larger one's.  Anything fancier has to
go through explicit reshape or gather, which keeps every adjoint auditable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .util import ContractError, NonFiniteError

DEFAULT_DTYPE = np.float32
_ALLOWED_DTYPES = (np.float32, np.float64)


class Tensor:
    """A shaped array plus an optional gradient slot.

    Data is row-major; product(shape) == data.size always holds because the
    array itself enforces it.  ``grad`` is populated by :func:`backward` for
    leaves with ``requires_grad`` and matches ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        if not _fast_finite(self.data):
            raise NonFiniteError(f"tensor data contains non-finite values (shape {arr.shape})")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; the free functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One tape entry: the op name, its inputs, the produced tensor and the
    function mapping the output gradient to input gradients."""

    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class ComputeGraph:
    """Append-only tape.  Insertion order is topological order by construction,
    so the backward pass is a single reverse sweep."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


_ACTIVE_GRAPH = ComputeGraph()
_GRAD_ENABLED = True


def active_graph() -> ComputeGraph:
    return _ACTIVE_GRAPH


@contextmanager
def use_graph(graph: ComputeGraph):
    """Confine recording to a caller-owned tape (one graph per training thread)."""
    global _ACTIVE_GRAPH
    prev = _ACTIVE_GRAPH
    _ACTIVE_GRAPH = graph
    try:
        yield graph
    finally:
        _ACTIVE_GRAPH = prev


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _fast_finite(a: np.ndarray) -> bool:
    """True iff the array has no NaN/Inf.  A pairwise sum goes non-finite
    whenever any element is (inf + -inf is NaN), so one native-dtype
    reduction replaces the much slower isfinite scan.  The sum itself can
    overflow on large finite values, so a non-finite sum falls back to the
    exact scan before condemning the array."""
    if a.size == 0:
        return True
    if math.isfinite(float(a.sum())):
        return True
    return bool(np.isfinite(a).all())


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            vjp: Callable, check: bool = True) -> Tensor:
    if check and not _fast_finite(out_data):
        raise NonFiniteError(f"{op}: produced non-finite values "
                             f"(output shape {out_data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out.grad = None
    if out.requires_grad:
        _ACTIVE_GRAPH.nodes.append(Node(op, inputs, out, vjp))
    return out


def _suffix_broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ContractError(
            f"{op}: shapes {sa} and {sb} do not conform "
            "(broadcast is leading-axis only: the smaller shape must be an exact suffix)"
        )


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original leading-suffix shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast_check("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast_check("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _record("mul", (a, b), out, vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NonFiniteError(f"scale: factor {s} is not finite")
    out = a.data * a.data.dtype.type(s)

    def vjp(g):
        return (g * s,)

    return _record("scale", (a,), out, vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NonFiniteError("exp: overflow produced non-finite output")

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    if not np.isfinite(out).all():
        raise NonFiniteError("log: non-positive input")
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _record("log", (a,), out, vjp)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a float exponent; used for sqrt and rsqrt."""
    p = float(p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = a.data ** a.data.dtype.type(p)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"pow: a**{p} produced non-finite values")
    ad = a.data

    def vjp(g):
        return (g * p * ad ** a.data.dtype.type(p - 1.0),)

    return _record("pow", (a,), out, vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + a*x^3)))."""
    x = a.data
    dt = x.dtype.type
    u = dt(_GELU_C) * (x + dt(_GELU_A) * x * x * x)
    th = np.tanh(u)
    out = dt(0.5) * x * (dt(1.0) + th)

    def vjp(g):
        du = dt(_GELU_C) * (dt(1.0) + dt(3.0 * _GELU_A) * x * x)
        sech2 = dt(1.0) - th * th
        return (g * (dt(0.5) * (dt(1.0) + th) + dt(0.5) * x * sech2 * du),)

    return _record("gelu", (a,), out, vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product or stacked 3-D product with equal leading dims."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ContractError(f"matmul: inner dims differ, {ad.shape} vs {bd.shape}")
        out = ad @ bd

        def vjp(g):
            return g @ bd.T, ad.T @ g

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ContractError(f"matmul: stacked shapes do not conform, {ad.shape} vs {bd.shape}")
        out = ad @ bd

        def vjp(g):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    else:
        raise ContractError(f"matmul: rank must be 2 or 3 on both sides, got {ad.shape} vs {bd.shape}")
    return _record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}") from e
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record("reshape", (a,), np.ascontiguousarray(out), vjp, check=False)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ContractError(f"permute: axes {axes} are not a permutation for shape {a.shape}")
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("permute", (a,), out, vjp, check=False)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    nd = a.data.ndim
    if nd < 2:
        raise ContractError(f"transpose needs rank >= 2, got shape {a.shape}")
    axes = list(range(nd - 2)) + [nd - 1, nd - 2]
    return permute(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ContractError(f"concat: shapes {shapes} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [s[axis] for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _record("concat", tuple(tensors), out, vjp, check=False)


def slice_(a: Tensor, key: tuple) -> Tensor:
    """Basic slicing with python slice objects (one per axis)."""
    if not isinstance(key, tuple):
        key = (key,)
    if any(not isinstance(k, slice) for k in key):
        raise ContractError("slice: only slice objects are supported")
    out = np.ascontiguousarray(a.data[key])
    orig = a.shape

    def vjp(g):
        full = np.zeros(orig, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record("slice", (a,), out, vjp, check=False)


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    orig = a.shape

    def vjp(g):
        gk = g
        if not keepdims:
            shp = list(orig)
            for ax in axes:
                shp[ax] = 1
            gk = g.reshape(shp)
        return (np.ascontiguousarray(np.broadcast_to(gk, orig)),)

    return _record("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalizers


def softmax(a: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  -inf logits get exactly zero weight; rows
    that are entirely -inf come out as all zeros (used for fully masked rows).

    `bias` is an optional constant additive term (may contain -inf for key
    masking); gradients never flow into it."""
    x = a.data
    if bias is not None:
        if np.isnan(bias).any() or np.isposinf(bias).any():
            raise NonFiniteError("softmax: bias must be finite or -inf")
        x = x + bias.astype(x.dtype)
    if np.isnan(x).any():
        raise NonFiniteError("softmax: NaN in logits")
    m = np.max(x, axis=-1, keepdims=True)
    dead = ~np.isfinite(m)
    m_safe = np.where(dead, 0.0, m)
    with np.errstate(invalid="ignore"):
        e = np.exp(x - m_safe)
    e = np.where(np.isfinite(x), e, 0.0).astype(x.dtype)
    denom = e.sum(axis=-1, keepdims=True)
    denom_safe = np.where(denom == 0, 1.0, denom).astype(x.dtype)
    out = e / denom_safe

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax", (a,), out, vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis; inputs must be finite (loss-side use)."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    s = x - m
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    out = s - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (a,), out, vjp)


def layernorm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
              eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; optional affine."""
    x = a.data
    d = x.shape[-1]
    dt = x.dtype.type
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + dt(eps))
    xhat = xc * inv
    inputs: list[Tensor] = [a]
    if gain is not None:
        if gain.shape != (d,):
            raise ContractError(f"layernorm: gain shape {gain.shape} != ({d},)")
        inputs.append(gain)
    if bias is not None:
        if bias.shape != (d,):
            raise ContractError(f"layernorm: bias shape {bias.shape} != ({d},)")
        inputs.append(bias)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g * gain.data if gain is not None else g
        # d/dx of (x - mu) * inv with mu, var functions of x
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        da = inv * (gx - m1 - xhat * m2)
        grads = [da.astype(x.dtype)]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _record("layernorm", tuple(inputs), out, vjp)


# ---------------------------------------------------------------- lookups


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather (embedding lookup).  Also the sanctioned way to expand a
    per-group vector to per-element rows: the adjoint scatter-adds."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("gather: ids must be integers")
    if table.data.ndim != 2:
        raise ContractError(f"gather: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"gather: id out of range [0, {table.shape[0]}), ids span [{ids.min()}, {ids.max()}]")
    flat = ids.reshape(-1)
    out = table.data[flat]
    tshape = table.shape

    def vjp(g):
        dt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(dt, flat, g.reshape(len(flat), tshape[1]))
        return (dt,)

    return _record("gather", (table,), out, vjp, check=False)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """[B, ...] -> [B, n, ...]: repeat each row along a new second axis.
    The adjoint is a plain sum, much cheaper than a scatter-add."""
    if n < 1:
        raise ContractError(f"tile_rows: n must be >= 1, got {n}")
    b = a.shape[0]
    out = np.broadcast_to(a.data[:, None], (b, n) + a.shape[1:])

    def vjp(g):
        return (g.sum(axis=1),)

    return _record("tile_rows", (a,), out, vjp, check=False)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """[...] -> [n, ...]: repeat the whole tensor along a new leading axis."""
    if n < 1:
        raise ContractError(f"tile_leading: n must be >= 1, got {n}")
    out = np.broadcast_to(a.data[None], (n,) + a.shape)

    def vjp(g):
        return (g.sum(axis=0),)

    return _record("tile_leading", (a,), out, vjp, check=False)


def sinusoidal_embedding(values: np.ndarray | float, dim: int, max_period: float = 10000.0,
                         dtype=DEFAULT_DTYPE) -> Tensor:
    """Fixed sin/cos features of scalar positions; constant, carries no grad."""
    if dim % 2 != 0:
        raise ContractError(f"sinusoidal embedding dim must be even, got {dim}")
    v = np.atleast_1d(np.asarray(values, dtype=np.float64))
    if not np.isfinite(v).all():
        raise NonFiniteError("sinusoidal embedding: non-finite positions")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    ang = v[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(ang), np.sin(ang)], axis=-1).astype(dtype)
    return Tensor(emb)


# ---------------------------------------------------------------- autodiff


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Every requires_grad leaf reachable from the loss receives (accumulates)
    its gradient in ``.grad``; the tape is cleared.  Returns the leaf -> grad
    map for convenience.
    """
    g = graph if graph is not None else _ACTIVE_GRAPH
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not g.nodes:
        raise ContractError("backward: compute graph is empty")

    produced = {id(n.out) for n in g.nodes}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}

    for node in reversed(g.nodes):
        gout = pending.pop(id(node.out), None)
        if gout is None:
            continue
        input_grads = node.vjp(gout)
        for inp, ginp in zip(node.inputs, input_grads):
            if ginp is None or not inp.requires_grad:
                continue
            if ginp.shape != inp.shape:
                raise ContractError(
                    f"internal: adjoint of {node.op} produced shape {ginp.shape} for input {inp.shape}")
            if id(inp) in produced:
                acc = pending.get(id(inp))
                pending[id(inp)] = ginp if acc is None else acc + ginp
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += ginp.astype(inp.data.dtype, copy=False)
                leaf_grads[inp] = inp.grad
    g.clear()
    return leaf_grads


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 internally; float32 function evaluation sits above the
    tolerance this check is meant to certify.  ``f`` must be pure and
    scalar-valued.
    """
    if not (1e-5 <= h <= 1e-2):
        raise ContractError(f"grad_check: h must lie in [1e-5, 1e-2], got {h}")
    base = x.data.astype(np.float64)

    probe = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    with use_graph(ComputeGraph()):
        y = f(probe)
        if y.data.size != 1:
            raise ContractError("grad_check: f must be scalar-valued")
        backward(y)
    if probe.grad is None:
        analytic = np.zeros_like(base)
    else:
        analytic = probe.grad.astype(np.float64)

    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            shifted = flat.copy()
            try:
                shifted[i] = flat[i] + h
                fp = f(Tensor(shifted.reshape(base.shape), dtype=np.float64)).item()
                shifted[i] = flat[i] - h
                fm = f(Tensor(shifted.reshape(base.shape), dtype=np.float64)).item()
            except NonFiniteError as e:
                raise NonFiniteError(
                    f"grad_check: f non-finite at probe for coordinate {i}: {e}") from e
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"grad_check: f non-finite at probe for coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            an = float(analytic.reshape(-1)[i])
            err = abs(an - num) / (abs(an) + abs(num) + 1e-8)
            if err > worst:
                worst = err
    return worst
