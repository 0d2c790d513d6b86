"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray.  Operations on tensors record nodes onto a
tape (Graph); ``backward`` on a scalar result walks the tape once in
reverse and deposits gradients on the participating leaves.  The tape is
rebuilt on every forward pass and a graph is consumed by its backward
call, so there is no retain/free protocol to get wrong: reusing a
consumed graph raises, and gradients of gradients are out of scope by
design (the samplers that need chain derivatives use analytic adjoints
instead).

Only float32 and float64 tensors exist.  Elementwise binary ops accept
equal shapes, a scalar operand, or a single leading batch dimension on
one side; anything else raises ShapeError rather than silently
broadcasting.  Every op checks its result for NaN/Inf.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64
_ALLOWED = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class DtypeError(TypeError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Graph:
    """One recorded forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._leaves: dict[int, tuple[int, "Tensor"]] = {}

    def add(self, parents, backward) -> int:
        self.nodes.append(_Node(parents, backward))
        return len(self.nodes) - 1

    def leaf_id(self, t: "Tensor") -> int:
        hit = self._leaves.get(id(t))
        if hit is not None:
            return hit[0]
        nid = self.add((), None)
        self._leaves[id(t)] = (nid, t)
        return nid


class Tensor:
    """ndarray plus optional tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "_node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.type not in _ALLOWED:
            if dtype is None and arr.dtype.kind in "iub":
                arr = arr.astype(DEFAULT_DTYPE)
            else:
                raise DtypeError(f"tensors are float32/float64 only, got {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self._node_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single element, got shape {self.data.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DtypeError("tensor/tensor division is not an op; divide by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(np.asarray(x), dtype=like.dtype)


def _join_graph(inputs) -> Graph | None:
    g = None
    for t in inputs:
        if t._graph is None:
            continue
        if t._graph.consumed:
            raise GraphError(
                "input comes from a graph already consumed by backward(); "
                "detach() it or rerun the forward pass"
            )
        if g is None:
            g = t._graph
        elif g is not t._graph:
            raise GraphError("inputs belong to two different graphs")
    return g


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor(out_data)
    if not any(t.requires_grad for t in inputs):
        return out
    g = _join_graph(inputs)
    if g is None:
        g = Graph()
    parents = tuple(
        (g.leaf_id(t) if t._graph is None else t._node_id) if t.requires_grad or t._graph is not None else None
        for t in inputs
    )
    out.requires_grad = True
    out._graph = g
    out._node_id = g.add(parents, backward_fn)
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into .grad of every requires_grad leaf.

    root must hold exactly one element.  A root with no recorded graph
    (all-constant computation) is a silent no-op.  Each graph supports a
    single backward pass.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._graph is None:
        if root.requires_grad:
            seed = np.ones_like(root.data)
            root.grad = seed if root.grad is None else root.grad + seed
        return
    g = root._graph
    if g.consumed:
        raise GraphError("backward() was already called on this graph")
    g.consumed = True
    leaf_by_nid = {nid: t for nid, t in g._leaves.values()}
    grads: dict[int, np.ndarray] = {root._node_id: np.ones_like(root.data)}
    for nid in range(len(g.nodes) - 1, -1, -1):
        gout = grads.pop(nid, None)
        if gout is None:
            continue
        node = g.nodes[nid]
        if node.backward is None:
            t = leaf_by_nid[nid]
            t.grad = gout.copy() if t.grad is None else t.grad + gout
            continue
        for pid, pgrad in zip(node.parents, node.backward(gout)):
            if pid is None or pgrad is None:
                continue
            buf = grads.get(pid)
            grads[pid] = pgrad if buf is None else buf + pgrad
    # leaves on dead branches still get a (zero) gradient
    for _, leaf in g._leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    """Returns (out_shape, reduce_a, reduce_b) for an elementwise op.

    reduce_* says how to map the output gradient back onto that operand:
    None for same-shape, "scalar" for a 0-d/1-element operand, 0 for an
    operand missing the leading batch axis.
    """
    sa, sb = a.data.shape, b.data.shape
    if a.data.dtype != b.data.dtype:
        raise DtypeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype} in '{op}'")
    if sa == sb:
        return sa, None, None

    def mode(shape, size, out):
        if shape == out:
            return None
        if size == 1:
            return "scalar"
        if len(out) == len(shape) + 1 and out[1:] == shape:
            return 0
        raise ShapeError(f"'{op}' got shapes {sa} and {sb}; only equal shapes, a scalar, "
                         f"or one leading batch axis may differ")

    try:
        out_shape = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"'{op}' got incompatible shapes {sa} and {sb}") from None
    return out_shape, mode(sa, a.data.size, out_shape), mode(sb, b.data.size, out_shape)


def _reduce_to(grad: np.ndarray, mode, shape):
    if mode is None:
        return grad
    if mode == "scalar":
        return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)
    return grad.sum(axis=0)


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _, ra, rb = _binary_shapes(a, b, "add")
    out = a.data + b.data

    def back(g):
        return _reduce_to(g, ra, a.data.shape), _reduce_to(g, rb, b.data.shape)

    return _record("add", out, (a, b), back)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _, ra, rb = _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def back(g):
        return _reduce_to(g, ra, a.data.shape), _reduce_to(-g, rb, b.data.shape)

    return _record("sub", out, (a, b), back)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _as_tensor(a, b)
    b = _as_tensor(b, a)
    _, ra, rb = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        return _reduce_to(g * bd, ra, ad.shape), _reduce_to(g * ad, rb, bd.shape)

    return _record("mul", out, (a, b), back)


def square(a: Tensor) -> Tensor:
    ad = a.data
    out = ad * ad

    def back(g):
        return (2.0 * g * ad,)

    return _record("square", out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.dtype != bd.dtype:
        raise DtypeError(f"mixed dtypes {ad.dtype} and {bd.dtype} in 'matmul'")
    if ad.ndim != 2 or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul supports (M,K)@(K,N) and (M,K)@(K,), got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    if bd.ndim == 2:
        def back(g):
            return g @ bd.T, ad.T @ g
    else:
        def back(g):
            return np.outer(g, bd), ad.T @ g

    return _record("matmul", out, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.data.shape} to {shape}") from e

    def back(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", out, (a,), back)


def tsum(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    if axis is None:
        out = np.asarray(ad.sum(), dtype=ad.dtype)

        def back(g):
            return (np.broadcast_to(g, ad.shape),)
    else:
        axis = int(axis)
        out = ad.sum(axis=axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axis), ad.shape),)

    return _record("sum", out, (a,), back)


def tmean(a: Tensor, axis=None) -> Tensor:
    ad = a.data
    if axis is None:
        n = ad.size
        out = np.asarray(ad.mean(), dtype=ad.dtype)

        def back(g):
            return (np.broadcast_to(g / n, ad.shape),)
    else:
        axis = int(axis)
        n = ad.shape[axis]
        out = ad.mean(axis=axis)

        def back(g):
            return (np.broadcast_to(np.expand_dims(g / n, axis), ad.shape),)

    return _record("mean", out, (a,), back)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    ad = a.data
    out = np.where(ad > 0, ad, slope * ad)
    # gradient at exactly 0 is defined as slope
    scale = np.where(ad > 0, ad.dtype.type(1.0), ad.dtype.type(slope))

    def back(g):
        return (g * scale,)

    return _record("leaky_relu", out, (a,), back)


# -- conv2d -------------------------------------------------------------
#
# im2col layout: columns are (C*kh*kw, N*Ho*Wo) so each layer is a single
# GEMM in both directions, which is what keeps the single-core image runs
# affordable.  The fold in the input-gradient is an explicit kh*kw loop of
# strided adds; np.add.at would be correct but is an order of magnitude
# slower.


def _conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _conv_check(xs, ws, stride, padding):
    n, c, h, w = xs
    o, ci, kh, kw = ws
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {xs} vs kernel {ws}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {ws} does not fit input {xs} with padding {padding}")
    ho, wo = _conv_out_size(h, kh, stride, padding), _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {xs}, kernel {ws}, "
                         f"stride {stride}, padding {padding}")
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    _, _, ho, wo, _, _ = win.shape
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col_fold(gcols: np.ndarray, x_shape, kh, kw, stride, padding, ho, wo):
    # scatter-add column gradients back onto the (padded) input
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    g6 = gcols.reshape(c, kh, kw, n, ho, wo)
    gxp = np.zeros((n, c, hp, wp), dtype=gcols.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += \
                g6[:, di, dj].transpose(1, 0, 2, 3)
    if padding:
        return gxp[:, :, padding:hp - padding, padding:wp - padding]
    return gxp


def _conv2d_forward(x, w, b, stride, padding):
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out2 = w.reshape(o, -1) @ cols
    out2 += b[:, None]
    out = np.ascontiguousarray(out2.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    return out, cols, ho, wo


def _conv2d_input_grad(gout, w, x_shape, stride, padding, ho, wo):
    o, _, kh, kw = w.shape
    n = x_shape[0]
    g2 = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
    gcols = w.reshape(o, -1).T @ g2
    return _col_fold(gcols, x_shape, kh, kw, stride, padding, ho, wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with bias, NCHW layout."""
    xd, wd, bd = x.data, w.data, b.data
    if not (xd.dtype == wd.dtype == bd.dtype):
        raise DtypeError(f"conv2d dtypes disagree: {xd.dtype}, {wd.dtype}, {bd.dtype}")
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d wants NCHW input and OIKK kernel, got {xd.shape} and {wd.shape}")
    if bd.shape != (wd.shape[0],):
        raise ShapeError(f"conv2d bias shape {bd.shape} does not match {wd.shape[0]} output channels")
    stride, padding = int(stride), int(padding)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    _conv_check(xd.shape, wd.shape, stride, padding)

    out, cols, ho, wo = _conv2d_forward(xd, wd, bd, stride, padding)
    o = wd.shape[0]
    n = xd.shape[0]

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gx = _conv2d_input_grad(g, wd, xd.shape, stride, padding, ho, wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gb = g2.sum(axis=1)
        return gx, gw, gb

    return _record("conv2d", out, (x, w, b), back)
