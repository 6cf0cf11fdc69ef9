"""Tape-based reverse-mode differentiation over dense float64 grids.

Every operation here is deterministic: identical inputs produce
bit-identical outputs, and gradient accumulation follows strict reverse
tape order. Grids are channel-first numpy arrays without a batch axis.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Contract violation: incompatible shapes fed to a primitive."""


class Tensor:
    """A dense float64 array participating in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named learnable leaf; its gradient buffer persists across steps."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "vjp", "recompute")

    def __init__(self, out, parents, vjp, recompute):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.recompute = recompute


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives.

    Within a ``with Tape() as t:`` block every primitive appends one node.
    ``backward`` visits nodes in strict reverse execution order, which fixes
    the gradient accumulation order and makes runs bit-reproducible.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, output: Tensor, cotangent=None) -> None:
        """Seed ``output`` with ``cotangent`` and accumulate leaf gradients."""
        if cotangent is None:
            cotangent = np.ones_like(output.data)
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != output.data.shape:
            raise ShapeError(
                f"backward: cotangent shape {cot.shape} != output shape {output.data.shape}"
            )
        for node in self.nodes:
            node.out.grad = None
        output.grad = cot.copy()
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.vjp(g)

    def replay(self) -> None:
        """Re-execute every recorded primitive in order (bit-identical)."""
        for node in self.nodes:
            node.out.data = node.recompute()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data, parents, vjp, recompute) -> Tensor:
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(out, tuple(parents), vjp, recompute))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def vjp(g):
            _accum(a, g)

        return _make(a.data + c, (a,), vjp, lambda: a.data + c)
    _check_same_shape("add", a, b)

    def vjp(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), vjp, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def vjp(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), vjp, lambda: a.data - b.data)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        _accum(a, -g)

    return _make(-a.data, (a,), vjp, lambda: -a.data)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)

        def vjp(g):
            _accum(a, g * c)

        return _make(a.data * c, (a,), vjp, lambda: a.data * c)
    _check_same_shape("mul", a, b)

    def vjp(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), vjp, lambda: a.data * b.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)

    def vjp(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), vjp, lambda: a.data / b.data)


def log(a: Tensor) -> Tensor:
    def vjp(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), vjp, lambda: np.log(a.data))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def vjp(g):
        if p == 0.0:
            return
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(a.data ** p, (a,), vjp, lambda: a.data ** p)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    def vjp(g):
        inside = (a.data >= lo) & (a.data <= hi)
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), vjp, lambda: np.clip(a.data, lo, hi))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def vjp(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), vjp, lambda: _sigmoid(a.data))


def relu(a: Tensor) -> Tensor:
    def vjp(g):
        _accum(a, g * (a.data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), vjp, lambda: np.maximum(a.data, 0.0))


def detach(a: Tensor) -> Tensor:
    """Constant copy of ``a``: gradients stop here, replay still tracks it."""

    def vjp(g):
        return None

    out = _make(a.data.copy(), (), vjp, lambda: a.data.copy())
    return out


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shp = tuple(int(s) for s in shape)

    def vjp(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shp), (a,), vjp, lambda: a.data.reshape(shp))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    ax = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(ax))

    def vjp(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(ax), (a,), vjp, lambda: a.data.transpose(ax))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        vjp,
        lambda: np.concatenate([p.data for p in parts], axis=axis),
    )


def take(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Gather from the row-major flattening of ``a``."""
    idx = np.asarray(flat_indices, dtype=np.int64)

    def vjp(g):
        if not a.requires_grad:
            return
        buf = np.zeros(a.data.size, dtype=np.float64)
        np.add.at(buf, idx.ravel(), g.ravel())
        _accum(a, buf.reshape(a.data.shape))

    return _make(a.data.ravel()[idx], (a,), vjp, lambda: a.data.ravel()[idx])


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def tsum(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)

    def expand(g):
        shape = list(a.data.shape)
        for i in ax:
            shape[i] = 1
        return np.broadcast_to(g.reshape(shape), a.data.shape)

    def vjp(g):
        _accum(a, expand(g).copy())

    return _make(a.data.sum(axis=ax), (a,), vjp, lambda: a.data.sum(axis=ax))


def tmean(a: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, a.ndim)
    count = float(np.prod([a.data.shape[i] for i in ax])) if ax else 1.0

    def vjp(g):
        shape = list(a.data.shape)
        for i in ax:
            shape[i] = 1
        _accum(a, np.broadcast_to(g.reshape(shape) / count, a.data.shape).copy())

    return _make(a.data.mean(axis=ax), (a,), vjp, lambda: a.data.mean(axis=ax))


def amax(a: Tensor, axis: int) -> Tensor:
    """Max over one axis; ties route the gradient to the first maximum."""
    axis = axis % a.ndim

    def vjp(g):
        if not a.requires_grad:
            return
        idx = np.argmax(a.data, axis=axis)
        buf = np.zeros_like(a.data)
        np.put_along_axis(
            buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        _accum(a, buf)

    return _make(a.data.max(axis=axis), (a,), vjp, lambda: a.data.max(axis=axis))


# ---------------------------------------------------------------------------
# linear algebra and convolution
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of row vectors: (N, I) @ (O, I)^T + (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with w {w.shape}")

    def vjp(g):
        _accum(x, g @ w.data)
        _accum(w, g.T @ x.data)
        _accum(b, g.sum(axis=0))

    return _make(
        x.data @ w.data.T + b.data,
        (x, w, b),
        vjp,
        lambda: x.data @ w.data.T + b.data,
    )


def _conv_check(op, x, w, b, spatial_ndim):
    if x.ndim != 1 + spatial_ndim:
        raise ShapeError(f"{op}: input {x.shape} is not channel-first {spatial_ndim}D")
    if w.ndim != 2 + spatial_ndim or w.shape[1] != x.shape[0]:
        raise ShapeError(f"{op}: weight {w.shape} incompatible with input {x.shape}")
    k = w.shape[2]
    if any(w.shape[2 + i] != k for i in range(spatial_ndim)) or k not in (1, 3):
        raise ShapeError(f"{op}: kernel {w.shape[2:]} not square with extent 1 or 3")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"{op}: bias {b.shape} incompatible with weight {w.shape}")
    return k


def _taps(k: int, nd: int):
    if nd == 2:
        return [(u, v) for u in range(k) for v in range(k)]
    return [(u, v, t) for u in range(k) for v in range(k) for t in range(k)]


def _im2col(x: np.ndarray, k: int, spatial: tuple[int, ...]) -> np.ndarray:
    """Stack every kernel tap of the zero-padded input: (Cin*k^d, cells)."""
    cin = x.shape[0]
    p = k // 2
    xp = np.zeros((cin,) + tuple(s + 2 * p for s in spatial))
    xp[(slice(None),) + tuple(slice(p, p + s) for s in spatial)] = x
    taps = _taps(k, len(spatial))
    col = np.empty((cin, len(taps)) + spatial)
    for t_idx, offs in enumerate(taps):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(offs, spatial))
        col[:, t_idx] = xp[sl]
    return col.reshape(cin * len(taps), int(np.prod(spatial)))


def _col2im(gcol: np.ndarray, cin: int, k: int, spatial: tuple[int, ...]) -> np.ndarray:
    p = k // 2
    gxp = np.zeros((cin,) + tuple(s + 2 * p for s in spatial))
    taps = _taps(k, len(spatial))
    g3 = gcol.reshape((cin, len(taps)) + spatial)
    for t_idx, offs in enumerate(taps):
        sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(offs, spatial))
        gxp[sl] += g3[:, t_idx]
    return gxp[(slice(None),) + tuple(slice(p, p + s) for s in spatial)]


def _conv(x: Tensor, w: Tensor, b: Tensor, spatial_ndim: int, op: str) -> Tensor:
    k = _conv_check(op, x, w, b, spatial_ndim)
    spatial = x.shape[1:]
    cin, cout = x.shape[0], w.shape[0]
    n = int(np.prod(spatial))
    w2_shape = (cout, cin * k**spatial_ndim)
    cache: dict[str, np.ndarray] = {}

    def forward():
        if k == 1:
            flat = w.data.reshape(cout, cin) @ x.data.reshape(cin, n)
        else:
            col = _im2col(x.data, k, spatial)
            if w.requires_grad:
                cache["col"] = col
            flat = w.data.reshape(w2_shape) @ col
        return (flat + b.data[:, None]).reshape((cout,) + spatial)

    def vjp(g):
        _accum(b, g.sum(axis=tuple(range(1, g.ndim))))
        g2 = g.reshape(cout, n)
        if k == 1:
            if x.requires_grad:
                _accum(x, (w.data.reshape(cout, cin).T @ g2).reshape(x.data.shape))
            if w.requires_grad:
                _accum(w, (g2 @ x.data.reshape(cin, n).T).reshape(w.data.shape))
            return
        if x.requires_grad:
            gcol = w.data.reshape(w2_shape).T @ g2
            _accum(x, _col2im(gcol, cin, k, spatial))
        if w.requires_grad:
            col = cache.get("col")
            if col is None:
                col = _im2col(x.data, k, spatial)
            _accum(w, (g2 @ col.T).reshape(w.data.shape))
            cache.pop("col", None)

    return _make(forward(), (x, w, b), vjp, forward)


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Extent-preserving 2D convolution (kernel 1 or 3, stride 1, zero pad)."""
    return _conv(x, w, b, 2, "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Extent-preserving 3D convolution (kernel 1 or 3, stride 1, zero pad)."""
    return _conv(x, w, b, 3, "conv3d")


def dot_channels(p: Tensor, f: Tensor) -> Tensor:
    """Per-cell dot products: (N, C) x (C, *S) -> (N, *S)."""
    if p.ndim != 2 or p.shape[1] != f.shape[0]:
        raise ShapeError(f"dot_channels: {p.shape} incompatible with {f.shape}")
    spatial_axes = tuple(range(1, f.ndim))

    def vjp(g):
        if p.requires_grad:
            _accum(p, np.tensordot(g, f.data, axes=(spatial_axes, spatial_axes)))
        if f.requires_grad:
            _accum(f, np.tensordot(p.data, g, axes=(0, 0)))

    return _make(
        np.tensordot(p.data, f.data, axes=(1, 0)),
        (p, f),
        vjp,
        lambda: np.tensordot(p.data, f.data, axes=(1, 0)),
    )


# ---------------------------------------------------------------------------
# broadcasted gates
# ---------------------------------------------------------------------------

def scale_channels(x: Tensor, gamma: Tensor) -> Tensor:
    """Gate a channel-first grid by one scalar per channel."""
    if gamma.shape != (x.shape[0],):
        raise ShapeError(f"scale_channels: gamma {gamma.shape} vs grid {x.shape}")
    gshape = (x.shape[0],) + (1,) * (x.ndim - 1)
    spatial = tuple(range(1, x.ndim))

    def vjp(g):
        _accum(x, g * gamma.data.reshape(gshape))
        if gamma.requires_grad:
            _accum(gamma, (g * x.data).sum(axis=spatial))

    return _make(
        x.data * gamma.data.reshape(gshape),
        (x, gamma),
        vjp,
        lambda: x.data * gamma.data.reshape(gshape),
    )


def scale_cells(x: Tensor, s: Tensor) -> Tensor:
    """Gate a channel-first grid by one scalar per spatial cell."""
    if s.shape != x.shape[1:]:
        raise ShapeError(f"scale_cells: map {s.shape} vs grid {x.shape}")

    def vjp(g):
        _accum(x, g * s.data[None])
        if s.requires_grad:
            _accum(s, (g * x.data).sum(axis=0))

    return _make(x.data * s.data[None], (x, s), vjp, lambda: x.data * s.data[None])


# ---------------------------------------------------------------------------
# softmax and cross-entropy
# ---------------------------------------------------------------------------

def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    axis = axis % a.ndim
    s = _softmax(a.data, axis)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - inner))

    return _make(s, (a,), vjp, lambda: _softmax(a.data, axis))


def cross_entropy(logits: Tensor, labels: np.ndarray, valid=None) -> Tensor:
    """Mean softmax cross-entropy over cells; axis 0 indexes classes.

    ``labels`` holds class indices shaped like the spatial extent;
    ``valid`` optionally restricts the mean to a boolean subset.
    """
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[1:]:
        raise ShapeError(f"cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    if valid is None:
        vmask = np.ones(lab.shape, dtype=bool)
    else:
        vmask = np.asarray(valid, dtype=bool)
    n = int(vmask.sum())

    def forward():
        if n == 0:
            return np.float64(0.0)
        z = logits.data - logits.data.max(axis=0, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=0))
        picked = np.take_along_axis(z, lab[None], axis=0)[0]
        return ((lse - picked) * vmask).sum() / n

    def vjp(g):
        if n == 0 or not logits.requires_grad:
            return
        soft = _softmax(logits.data, 0)
        onehot = np.zeros_like(soft)
        np.put_along_axis(onehot, lab[None], 1.0, axis=0)
        _accum(logits, (soft - onehot) * vmask[None] * (float(g) / n))

    return _make(forward(), (logits,), vjp, forward)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def _name_seed(master_seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int(master_seed) & 0xFFFFFFFF, int.from_bytes(digest[:8], "little")]


RELU_GAIN = np.sqrt(6.0)  # keeps activation scale through stacked relu layers


class ParameterStore:
    """Creates and holds uniquely named parameters.

    Initialization is uniform in +-gain/sqrt(fan_in) with an RNG seeded
    from (master_seed, name), so parameter values never depend on creation
    order. Hidden relu layers pass ``gain=RELU_GAIN`` to keep activation
    scale; prediction layers keep the default gain of 1.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._params: dict[str, Parameter] = {}

    def create(
        self, name: str, shape: Sequence[int], fan_in: int, gain: float = 1.0
    ) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        bound = gain / np.sqrt(max(int(fan_in), 1))
        rng = np.random.default_rng(_name_seed(self.master_seed, name))
        p = Parameter(name, rng.uniform(-bound, bound, size=tuple(shape)))
        self._params[name] = p
        return p

    def create_constant(self, name: str, shape: Sequence[int], value: float) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, np.full(tuple(shape), float(value)))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def parameters(self) -> list[Parameter]:
        return [self._params[n] for n in self.names()]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: self._params[n].data for n in self.names()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        mine = set(self._params)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
        for n, arr in arrays.items():
            p = self._params[n]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"parameter {n}: shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = np.asarray(arr, dtype=np.float64).copy()
