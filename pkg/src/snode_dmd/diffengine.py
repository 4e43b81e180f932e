"""Reverse-mode differentiation over a recorded graph of numpy operations.

Every operation on a :class:`Tensor` records its inputs and a closure that
maps the output cotangent to input cotangents. :func:`backward` orders the
recorded nodes topologically and replays the closures in reverse. The op
set is deliberately small: affine maps, a handful of elementwise
functions, reductions, indexing/reshaping and the batched covariance
sandwich ``A S A^T`` (dispatched to the compiled kernel).

Parameters live in a :class:`ParamStore`, a flat float64 vector carved
into named segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """A recorded operation produced NaN or inf."""

    def __init__(self, op, where=""):
        self.op = op
        super().__init__(f"non-finite value produced by '{op}'" + (f" ({where})" if where else ""))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An array value plus the information needed to differentiate through it."""

    __slots__ = ("value", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward=None, op="const", requires_grad=False,
                 name=None):
        self.value = np.asarray(value, dtype=float)
        self._parents = parents
        self._backward = backward
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward, op):
    if not np.isfinite(value).all():
        raise NonFiniteError(op)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(value, op=op)
    return Tensor(value, parents, backward, op, True)


# -- elementwise binary -----------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)), "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def bw(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _node(av @ bv, (a, b), bw, "matmul")


# -- elementwise unary ------------------------------------------------------

def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.value)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.value)
    return _node(y, (x,), lambda g: (g / x.value,), "log")


def sin(x):
    x = as_tensor(x)
    return _node(np.sin(x.value), (x,), lambda g: (g * np.cos(x.value),), "sin")


def cos(x):
    x = as_tensor(x)
    return _node(np.cos(x.value), (x,), lambda g: (-g * np.sin(x.value),), "cos")


def softplus(x):
    x = as_tensor(x)
    v = x.value
    y = np.logaddexp(0.0, v)
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return _node(y, (x,), lambda g: (g * sig,), "softplus")


def square(x):
    x = as_tensor(x)
    return _node(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; zero gradient outside the interval."""
    x = as_tensor(x)
    mask = (x.value >= lo) & (x.value <= hi)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * mask,), "clip")


# -- reductions and shape ops ----------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(y, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x, a1, a2):
    x = as_tensor(x)
    return _node(np.swapaxes(x.value, a1, a2), (x,),
                 lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx):
    x = as_tensor(x)

    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), bw, "getitem")


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(xs, axis=0):
    xs = [as_tensor(x) for x in xs]
    return _node(np.stack([x.value for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _node(np.broadcast_to(x.value, shape).copy(), (x,),
                 lambda g: (_unbroadcast(g, x.shape),), "broadcast")


# -- composite ops ----------------------------------------------------------

def sandwich(A, S):
    """Batched ``A S A^T`` for (B, n, n) inputs."""
    A, S = as_tensor(A), as_tensor(S)
    return _node(kernels.sandwich(A.value, S.value), (A, S),
                 lambda g: kernels.sandwich_grad(A.value, S.value, g), "sandwich")


def straight_through(x, value):
    """Replace the value of ``x`` while passing gradients through unchanged."""
    x = as_tensor(x)
    return _node(np.asarray(value, dtype=float), (x,), lambda g: (g,), "straight_through")


def complex_mul(a, b):
    """Elementwise complex product in the real lift; last axis holds (re, im)."""
    ar, ai = a[..., 0], a[..., 1]
    br, bi = b[..., 0], b[..., 1]
    return stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)


def gaussian_sample(mu, log_var, eps):
    """Reparameterized draw ``mu + exp(log_var / 2) * eps`` with fixed noise ``eps``."""
    return mu + exp(log_var * 0.5) * eps


# -- backward pass -----------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor):
    """Return ``{id(node): gradient}`` for every node that ``root`` depends on."""
    if root.value.size != 1:
        raise ValueError("backward needs a scalar output")
    grads = {id(root): np.ones_like(root.value)}
    if not root.requires_grad:
        return grads
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if node._backward is None or g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(node.op, "in backward pass")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


# -- parameters ------------------------------------------------------------------

class ParamStore:
    """Named float64 parameter segments backed by one flat vector."""

    def __init__(self, shapes: dict | None = None, flat=None):
        self._shapes: dict[str, tuple] = {}
        self._offsets: dict[str, int] = {}
        total = 0
        for name, shape in (shapes or {}).items():
            shape = tuple(int(s) for s in shape)
            self._shapes[name] = shape
            self._offsets[name] = total
            total += int(np.prod(shape))
        self.flat = np.zeros(total) if flat is None else np.array(flat, dtype=float)
        if self.flat.shape != (total,):
            raise ValueError(f"flat vector has length {self.flat.size}, layout needs {total}")

    @property
    def names(self):
        return list(self._shapes)

    @property
    def size(self):
        return self.flat.size

    def shape(self, name):
        return self._shapes[name]

    def segment(self, name):
        o = self._offsets[name]
        return slice(o, o + int(np.prod(self._shapes[name])))

    def __getitem__(self, name):
        return self.flat[self.segment(name)].reshape(self._shapes[name])

    def __setitem__(self, name, value):
        self.flat[self.segment(name)] = np.asarray(value, dtype=float).ravel()

    def __contains__(self, name):
        return name in self._shapes

    def unflatten(self, flat=None) -> dict:
        flat = self.flat if flat is None else flat
        return {n: flat[self.segment(n)].reshape(s).copy() for n, s in self._shapes.items()}

    def flatten(self, values: dict):
        out = np.empty(self.size)
        for n in self._shapes:
            out[self.segment(n)] = np.asarray(values[n], dtype=float).ravel()
        return out

    def copy(self) -> "ParamStore":
        return ParamStore(self._shapes, self.flat)

    def with_flat(self, flat) -> "ParamStore":
        return ParamStore(self._shapes, flat)

    def layout(self):
        return [{"name": n, "shape": list(s)} for n, s in self._shapes.items()]

    @classmethod
    def from_layout(cls, layout, flat=None):
        return cls({e["name"]: tuple(e["shape"]) for e in layout}, flat)

    def leaves(self) -> dict:
        """Fresh gradient-tracking tensors, one per segment."""
        return {n: Tensor(self[n].copy(), op=f"param:{n}", requires_grad=True, name=n)
                for n in self._shapes}

    def gather(self, leaves: dict, grads: dict):
        out = np.zeros(self.size)
        for n, t in leaves.items():
            g = grads.get(id(t))
            if g is not None:
                out[self.segment(n)] = np.asarray(g).ravel()
        return out


@dataclass
class GradResult:
    loss: float
    grads: np.ndarray
    aux: dict = field(default_factory=dict)


def evaluate_with_gradients(f, params: ParamStore, inputs=None, seed: int = 0) -> GradResult:
    """Run ``f(leaves, inputs, seed)`` and differentiate its scalar output.

    ``f`` may return a scalar Tensor, or a ``(Tensor, aux_dict)`` pair whose
    auxiliary values are passed through untouched.
    """
    leaves = params.leaves()
    out = f(leaves, inputs, seed)
    aux = {}
    if isinstance(out, tuple):
        out, aux = out
    out = as_tensor(out)
    grads = backward(out)
    flat = params.gather(leaves, grads)
    if not np.isfinite(flat).all():
        raise NonFiniteError("gradient assembly")
    return GradResult(float(out.value), flat, aux)


def _value(f, params, inputs, seed):
    out = f(params.leaves(), inputs, seed)
    if isinstance(out, tuple):
        out = out[0]
    return float(as_tensor(out).value)


@dataclass
class FDReport:
    rel_errors: np.ndarray
    checked: np.ndarray
    excluded: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        ok = ~np.isnan(self.rel_errors)
        return float(self.rel_errors[ok].max()) if ok.any() else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self, k=5):
        e = np.nan_to_num(self.rel_errors, nan=-1.0)
        order = np.argsort(e)[::-1][:k]
        return [(int(self.checked[i]), float(self.rel_errors[i])) for i in order]


def finite_difference_check(f, params: ParamStore, inputs=None, h: float = 1e-5,
                            tol: float = 1e-4, seed: int = 0, coords=None) -> FDReport:
    """Compare reverse-mode gradients with central differences.

    Relative error per coordinate is ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    Coordinates where the one-sided slopes disagree by more than
    ``sqrt(h) * (1 + |slope|)`` sit on a kink and are excluded.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    res = evaluate_with_gradients(f, params, inputs, seed)
    coords = np.arange(params.size) if coords is None else np.asarray(coords, dtype=int)
    f0 = _value(f, params, inputs, seed)
    errs = np.full(len(coords), np.nan)
    excluded = []
    probe = params.copy()
    for n, i in enumerate(coords):
        x = probe.flat[i]
        probe.flat[i] = x + h
        fp = _value(f, probe, inputs, seed)
        probe.flat[i] = x - h
        fm = _value(f, probe, inputs, seed)
        probe.flat[i] = x
        right, left = (fp - f0) / h, (f0 - fm) / h
        if abs(right - left) > np.sqrt(h) * (1.0 + max(abs(right), abs(left))):
            excluded.append(int(i))
            continue
        gfd = (fp - fm) / (2.0 * h)
        errs[n] = abs(res.grads[i] - gfd) / (abs(gfd) + 1e-8)
    return FDReport(errs, coords, np.asarray(excluded, dtype=int), tol)


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator addressed by ``(seed, *keys)``, e.g. (seed, step, site)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
