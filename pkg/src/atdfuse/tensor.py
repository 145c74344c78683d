"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each differentiable op records its parents and a closure mapping the
upstream gradient to one gradient per parent. :meth:`Tensor.backward` walks
the recorded graph in reverse topological order; gradients are summed for
fan-out and accumulated into ``.grad`` only on leaf tensors, so calling
``backward`` twice without zeroing doubles the leaf gradients.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Shapes or axes are incompatible for an operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed):
    """Seeded PCG64 generator; every random draw in the package goes through one."""
    return np.random.Generator(np.random.PCG64(seed))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad=False):
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False):
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autodiff -------------------------------------------------------------
    def backward(self):
        """Propagate d(self)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


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


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _norm_axis(axis, ndim, opname):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"{opname}: axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b),
                          lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), backward)


def scale(x, c):
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x):
    """Tanh-approximated GELU."""
    flat = np.ascontiguousarray(x.data).reshape(-1)
    shape = x.shape
    out = kernels.gelu(flat).reshape(shape)

    def backward(g):
        return (kernels.gelu_backward(flat, np.ascontiguousarray(g).reshape(-1)).reshape(shape),)

    return Tensor._result(out, (x,), backward)


def exp(x):
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,))


def log(x):
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    xd = x.data
    return Tensor._result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# -- linear algebra ---------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._result(out, (a, b), backward)


def _rows_view(x, axis, opname):
    """Move ``axis`` last and flatten to a contiguous 2-D array."""
    (ax,) = _norm_axis(axis, x.ndim, opname)
    moved = np.moveaxis(x.data, ax, -1)
    return ax, moved.shape, np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])


def softmax(x, axis=-1):
    ax, moved_shape, rows = _rows_view(x, axis, "softmax")
    y = kernels.softmax_rows(rows)
    out = np.moveaxis(y.reshape(moved_shape), -1, ax)

    def backward(g):
        grows = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(y.shape)
        dx = kernels.softmax_rows_backward(y, grows)
        return (np.moveaxis(dx.reshape(moved_shape), -1, ax),)

    return Tensor._result(out, (x,), backward)


def log_softmax(x, axis=-1):
    (ax,) = _norm_axis(axis, x.ndim, "log_softmax")
    xd = x.data
    shifted = xd - xd.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return Tensor._result(out, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def layer_norm(x, eps=1e-5):
    """Normalize over the last axis (no affine part)."""
    shape = x.shape
    rows = np.ascontiguousarray(x.data).reshape(-1, shape[-1])
    xhat, rstd = kernels.layernorm_rows(rows, eps)

    def backward(g):
        grows = np.ascontiguousarray(g).reshape(xhat.shape)
        return (kernels.layernorm_rows_backward(xhat, rstd, grows).reshape(shape),)

    return Tensor._result(xhat.reshape(shape), (x,), backward)


# -- reductions -------------------------------------------------------------
def reduce_sum(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim, "reduce_sum")
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (x,), backward)


def _shifted_mean(data, axes):
    # anchoring on the first element makes the mean of a constant slice exact
    if axes is None:
        anchor = data.reshape(-1)[:1].reshape((1,) * data.ndim) if data.size else 0.0
    else:
        anchor = data[tuple(slice(0, 1) if i in axes else slice(None) for i in range(data.ndim))]
    return anchor + (data - anchor).mean(axis=axes, keepdims=True)


def reduce_mean(x, axis=None, keepdims=False):
    axes = _norm_axis(axis, x.ndim, "reduce_mean")
    shape = x.shape
    n = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
    m = _shifted_mean(x.data, axes)
    out = m if keepdims else m.reshape([s for i, s in enumerate(shape)
                                        if axes is not None and i not in axes])

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        elif axes is None:
            g = np.reshape(g, (1,) * len(shape))
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (x,), backward)


def reduce_std(x, axis=None, eps=1e-5, keepdims=False):
    """Biased standard deviation with the variance floored at ``eps**2``."""
    if not eps > 0:
        raise ContractError(f"reduce_std: eps must be positive, got {eps}")
    axes = _norm_axis(axis, x.ndim, "reduce_std")
    shape = x.shape
    n = x.size if axes is None else int(np.prod([shape[a] for a in axes]))
    centered = x.data - _shifted_mean(x.data, axes)
    var = (centered * centered).mean(axis=axes, keepdims=True)
    live = var > eps * eps
    std_k = np.sqrt(np.where(live, var, eps * eps))
    out = std_k if keepdims else std_k.reshape([s for i, s in enumerate(shape)
                                                if axes is not None and i not in axes])

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        elif axes is None:
            g = np.reshape(g, (1,) * len(shape))
        coef = np.where(live, g / (n * std_k), 0.0)
        return (coef * centered,)

    return Tensor._result(np.asarray(out, dtype=np.float64), (x,), backward)


# -- shape manipulation -----------------------------------------------------
def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = np.argsort([a % x.ndim for a in axes])
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return Tensor._result(out, (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x, a1, a2):
    axes = list(range(x.ndim))
    a1, a2 = a1 % x.ndim, a2 % x.ndim
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    (ax,) = _norm_axis(axis, tensors[0].ndim, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(out, tuple(tensors), backward)


def getitem(x, index):
    """Indexing/slicing; always copies. Fancy indices scatter-add on backward."""
    try:
        out = np.array(x.data[index], dtype=np.float64)
    except IndexError as exc:
        raise DimensionError(f"getitem: {exc}") from None
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._result(out, (x,), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._result(table.data[ids], (table,), backward)


# -- losses -----------------------------------------------------------------
def mse_loss(pred, target):
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    return reduce_mean(square(pred - target))


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits, axis=1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return -reduce_mean(picked)


# -- gradient checking ------------------------------------------------------
@dataclass
class GradCheckReport:
    """Worst relative error per checked input plus the overall verdict."""

    max_rel_error: list
    tol: float
    coords_checked: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_error)

    @property
    def worst(self):
        return max(self.max_rel_error, default=0.0)


def relative_error(analytic, numeric, floor=1e-4):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f, inputs, h=1e-5, tol=1e-4, max_coords=None, rng=None, floor=1e-4):
    """Compare backprop gradients with central differences.

    ``f`` is a zero-argument callable that rebuilds the graph from the
    current values of ``inputs`` and returns a tensor (summed if not scalar).
    With ``max_coords`` set, that many coordinates per input are sampled
    (using ``rng``) instead of checking every element. The relative error
    uses ``max(|a|, |n|, floor)`` as denominator so exact zeros compare in
    absolute terms.
    """
    if not h > 0:
        raise ContractError(f"grad_check: h must be positive, got {h}")
    inputs = list(inputs)
    rng = rng if rng is not None else make_rng(0)

    def scalar():
        out = f()
        return out if out.size == 1 else reduce_sum(out)

    for t in inputs:
        t.zero_grad()
    loss = scalar()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    errors, counts = [], []
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            n = flat.size
            if max_coords is not None and n > max_coords:
                coords = rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = scalar().item()
                flat[i] = orig - h
                fm = scalar().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                worst = max(worst, relative_error(ga.reshape(-1)[i], num, floor))
            errors.append(worst)
            counts.append(len(coords))
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(max_rel_error=errors, tol=tol, coords_checked=counts)
