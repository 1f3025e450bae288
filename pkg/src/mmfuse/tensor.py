"""A small reverse-mode differentiable array engine on top of numpy.

Every primitive records its operands and an adjoint closure on the tensor it
produces. Tensors carry a monotonically increasing creation index, so the
computation record is simply "all reachable nodes ordered by index"; replaying
adjoints in decreasing index order is a valid reverse topological order
because an output is always created after its operands.

Storage is float32 by default. Wrap gradient checks in ``precision(np.float64)``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading

import numpy as np

from .errors import BoundsError, ContractError, DimensionError, NumericError

_counter = itertools.count()


class _State(threading.local):
    # per thread, so concurrent no_grad() blocks in worker threads cannot leak
    dtype = np.float32
    grad_enabled = True
    debug = False


_state = _State()


def get_default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled=True):
    """Audit every op output for NaN/Inf while active."""
    prev = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by op '{op}'")


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or _state.dtype, order="C", copy=True)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_counter)

    @classmethod
    def _result(cls, data, op, parents, backward):
        out = cls.__new__(cls)
        data = np.asarray(data)
        if not data.flags.c_contiguous:
            data = data.copy(order="C")
        out.data = data
        if _state.debug:
            _check_finite(out.data, op)
        out.grad = None
        out.op = op
        out._id = next(_counter)
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data.copy()

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # -- reverse pass --------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        if self.is_leaf:
            raise ContractError("forward record is empty: loss is a leaf tensor")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
        leaves = [n for n in order if n.is_leaf]
        for leaf in leaves:
            if leaf.grad is not None:
                raise ContractError(
                    "gradient already populated on a leaf; call zero_grad() before another backward()"
                )

        grads = {self._id: np.ones_like(self.data)}
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, node.op)
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose_last2(self)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# -- pointwise -----------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, "mul", (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return Tensor._result(a.data * a.data.dtype.type(c), "scale", (a,), lambda g: (g * c,))


def exp(a):
    out_data = np.exp(a.data)
    return Tensor._result(out_data, "exp", (a,), lambda g: (g * out_data,))


def log(a, floor=0.0):
    """Natural log; values below ``floor`` are clamped (zero gradient there)."""
    x = a.data
    if floor > 0:
        clamped = np.maximum(x, x.dtype.type(floor))
        mask = x >= floor
    else:
        if np.any(x <= 0):
            raise NumericError("op 'log' received a non-positive value")
        clamped, mask = x, None

    def backward(g):
        with np.errstate(over="ignore"):  # overflow is reported by the NaN/Inf audit
            gx = g / clamped
        return (gx if mask is None else gx * mask,)

    return Tensor._result(np.log(clamped), "log", (a,), backward)


def relu(a):
    x = a.data
    return Tensor._result(np.maximum(x, 0), "relu", (a,), lambda g: (g * (x > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * (x * x * x)))
    out = 0.5 * x * (1 + t)

    def backward(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return Tensor._result(out, "gelu", (a,), backward)


# -- reductions ----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise BoundsError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum_axis(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean_axis(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty axis")
    shape = a.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(a.data.mean(axis=axes, keepdims=keepdims), "mean_axis", (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold batch axes into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return Tensor._result(ad @ bd, "matmul", (a, b), backward)


def softmax_lastdim(x):
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, "softmax", (x,), backward)


def layer_norm(x, gain, shift, eps=1e-5):
    """Normalize over the last axis, then apply per-feature gain and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm: gain/shift {gain.shape}/{shift.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        dgain = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dshift

    return Tensor._result(xhat * gd + shift.data, "layer_norm", (x, gain, shift), backward)


# -- shape manipulation ----------------------------------------------------------


def transpose_last2(x):
    return swapaxes(x, -1, -2)


def swapaxes(x, a1, a2):
    if x.ndim < 2:
        raise DimensionError(f"cannot swap axes of a {x.ndim}-d tensor")
    return Tensor._result(
        np.swapaxes(x.data, a1, a2), "swapaxes", (x,),
        lambda g: (np.swapaxes(g, a1, a2).copy(order="C"),),
    )


def reshape(x, shape):
    shape = tuple(shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} into {shape}") from None
    return Tensor._result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def expand(x, shape):
    """Broadcast ``x`` to ``shape`` (materialized copy)."""
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot expand {old} to {shape}") from None
    return Tensor._result(out, "expand", (x,), lambda g: (_unbroadcast(g, old),))


def concat_axis(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one operand")
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {ax}: shapes {ref} and {t.shape} disagree off-axis"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)].copy())
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._result(data, "concat", tensors, backward)


def slice_axis(x, axis, start, stop):
    ax = _norm_axes(axis, x.ndim)[0]
    n = x.shape[ax]
    if not (0 <= start <= stop <= n):
        raise BoundsError(f"slice [{start}:{stop}] out of range for axis {ax} of extent {n}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return Tensor._result(x.data[idx].copy(), "slice", (x,), backward)


# -- helpers for tests and oracles --------------------------------------------------


def numerical_grad(fn, x, step=1e-5, indices=None):
    """Central finite differences of scalar ``fn()`` wrt entries of ``x.data``.

    ``indices`` restricts the probe to a list of flat positions; the returned
    array then holds one derivative per listed position.
    """
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = []
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            out.append((up - down) / (2 * step))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def relative_error(a, b, tiny=1e-12):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), tiny))
