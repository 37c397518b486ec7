"""Dense tensors with reverse-mode automatic differentiation.

Every operation that involves a tensor with ``requires_grad=True`` records a
node holding its parents, the name of its backward rule and whatever forward
activations that rule needs. Nodes receive increasing integer ids at creation,
so sorting the reachable nodes by id yields a valid topological order (the
"tape") without a separate recording context.

Values are stored as float64 numpy arrays. Backward rules are looked up by name
in a registry, which is also what lets a verification run deliberately corrupt
one rule and confirm that the gradient checker notices.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError

_ids = itertools.count()
_RULES: dict[str, Callable] = {}


def _rule(name):
    def register(fn):
        _RULES[name] = fn
        return fn

    return register


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "ctx", "id")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.op: str | None = None
        self.ctx = None
        self.id = next(_ids)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _node(cls, data, parents: Sequence["Tensor"], op: str, ctx=None) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.id = next(_ids)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.op = op
            out.ctx = ctx
        else:
            out.requires_grad = False
            out.parents = ()
            out.op = None
            out.ctx = None
        return out

    # -- introspection ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}"
        ) from None


# -- binary elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._node(a.data + b.data, (a, b), "add")


@_rule("add")
def _add_back(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._node(a.data - b.data, (a, b), "sub")


@_rule("sub")
def _sub_back(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._node(a.data * b.data, (a, b), "mul")


@_rule("mul")
def _mul_back(node, g):
    a, b = node.parents
    ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return Tensor._node(a.data / b.data, (a, b), "div")


@_rule("div")
def _div_back(node, g):
    a, b = node.parents
    ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return Tensor._node(a.data * s, (a,), "scale", s)


@_rule("scale")
def _scale_back(node, g):
    return (g * node.ctx,)


# -- unary elementwise ---------------------------------------------------------


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return Tensor._node(y, (x,), "sigmoid", y)


@_rule("sigmoid")
def _sigmoid_back(node, g):
    y = node.ctx
    return (g * y * (1.0 - y),)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._node(y, (x,), "tanh", y)


@_rule("tanh")
def _tanh_back(node, g):
    y = node.ctx
    return (g * (1.0 - y * y),)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._node(np.where(mask, x.data, 0.0), (x,), "relu", mask)


@_rule("relu")
def _relu_back(node, g):
    # subgradient 0 at exactly 0
    return (g * node.ctx,)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return Tensor._node(y, (x,), "exp", y)


@_rule("exp")
def _exp_back(node, g):
    return (g * node.ctx,)


def log(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(np.log(x.data), (x,), "log")


@_rule("log")
def _log_back(node, g):
    return (g / node.parents[0].data,)


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(x.data * x.data, (x,), "square")


@_rule("square")
def _square_back(node, g):
    return (2.0 * g * node.parents[0].data,)


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return Tensor._node(np.clip(x.data, lo, hi), (x,), "clip", inside)


@_rule("clip")
def _clip_back(node, g):
    return (g * node.ctx,)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(name: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch one of sigmoid, tanh, relu, add, mul, sub or scale by name."""
    if name in _UNARY:
        (x,) = inputs
        return _UNARY[name](x)
    if name in _BINARY:
        a, b = inputs
        return _BINARY[name](a, b)
    if name == "scale":
        (x,) = inputs
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(x, factor)
    raise ValueError(f"unknown elementwise op {name!r}")


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        ) from None
    return Tensor._node(a.data @ b.data, (a, b), "matmul")


@_rule("matmul")
def _matmul_back(node, g):
    a, b = node.parents
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
    return ga, gb


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    return Tensor._node(np.transpose(x.data, axes), (x,), "transpose", axes)


@_rule("transpose")
def _transpose_back(node, g):
    return (np.transpose(g, np.argsort(node.ctx)),)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(x.data.reshape(shape), (x,), "reshape")


@_rule("reshape")
def _reshape_back(node, g):
    return (g.reshape(node.parents[0].shape),)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(x.data[idx], (x,), "getitem", idx)


@_rule("getitem")
def _getitem_back(node, g):
    out = np.zeros_like(node.parents[0].data)
    np.add.at(out, node.ctx, g)
    return (out,)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    return Tensor._node(np.stack([t.data for t in ts], axis=axis), ts, "stack", axis)


@_rule("stack")
def _stack_back(node, g):
    return tuple(np.moveaxis(g, node.ctx, 0))


# -- reductions --------------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(
        np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", (axis, keepdims)
    )


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


@_rule("sum")
def _sum_back(node, g):
    axis, keepdims = node.ctx
    shape = node.parents[0].shape
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return Tensor._node(
        np.mean(x.data, axis=axis, keepdims=keepdims), (x,), "mean", (axis, keepdims)
    )


@_rule("mean")
def _mean_back(node, g):
    axis, keepdims = node.ctx
    shape = node.parents[0].shape
    count = np.prod(shape) if axis is None else np.prod(
        [shape[a] for a in np.atleast_1d(axis)]
    )
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)


# -- normalisation and attention primitives ----------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} in shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor._node(y, (x,), "softmax", (y, axis))


@_rule("softmax")
def _softmax_back(node, g):
    y, axis = node.ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def softmax_lastdim(x) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then apply gamma/beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"layer_norm: empty feature axis in shape {x.shape}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return Tensor._node(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", (xhat, rstd))


@_rule("layer_norm")
def _layer_norm_back(node, g):
    x, gamma, beta = node.parents
    xhat, rstd = node.ctx
    lead = tuple(range(g.ndim - 1))
    gx = None
    if x.requires_grad:
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
    ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
    gbeta = g.sum(axis=lead) if beta.requires_grad else None
    return gx, ggamma, gbeta


def pooling_matrix(T: int, n: int) -> np.ndarray:
    """Averaging matrix of shape (n, T) for contiguous, front-loaded chunks."""
    if not 1 <= n <= T:
        raise ValueError(f"pool target length must be in [1, {T}], got {n}")
    base, rem = divmod(T, n)
    P = np.zeros((n, T))
    start = 0
    for i in range(n):
        size = base + (1 if i < rem else 0)
        P[i, start : start + size] = 1.0 / size
        start += size
    return P


def mean_pool_segments(x, n: int) -> Tensor:
    """Average the second-to-last (time) axis down to ``n`` rows."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"mean_pool_segments needs (..., T, d), got {x.shape}")
    P = pooling_matrix(x.shape[-2], n)
    return Tensor._node(P @ x.data, (x,), "mean_pool", P)


@_rule("mean_pool")
def _mean_pool_back(node, g):
    return (node.ctx.T @ g,)


# -- backward pass -----------------------------------------------------------------


def topological_order(loss: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``loss``, parents first."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    todo = [loss]
    while todo:
        n = todo.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen.add(n.id)
        nodes.append(n)
        todo.extend(n.parents)
    nodes.sort(key=lambda n: n.id)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaf gradients are overwritten, not accumulated across calls, so running
    backward twice on the same graph gives identical results.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if node.op is None:
            node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for p, pg in zip(node.parents, _RULES[node.op](node, g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5):
    """Temporarily scale the gradients produced by one backward rule.

    Used as a negative control: a gradient check run inside this context on a
    function that uses ``op`` must fail.
    """
    if op not in _RULES:
        raise ValueError(f"no backward rule named {op!r}; known: {sorted(_RULES)}")
    original = _RULES[op]

    def broken(node, g):
        return tuple(None if x is None else x * factor for x in original(node, g))

    _RULES[op] = broken
    try:
        yield
    finally:
        _RULES[op] = original


def backward_rule_names() -> list[str]:
    return sorted(_RULES)


# -- finite-difference checking ------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[str, int] | None
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central finite differences.

    ``f`` takes no arguments and closes over ``params``, which are perturbed in
    place. The per-entry error is ``|analytic - numeric| / max(|analytic|,
    |numeric|, floor)``; the floor keeps entries whose true gradient is zero
    from dividing roundoff by zero. ``max_entries`` optionally samples that
    many entries per tensor instead of checking them all.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    for p in params.values():
        p.grad = None
    backward(loss)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    worst_err, worst, count = 0.0, None, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value perturbing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > worst_err:
                worst_err, worst = err, (name, int(i))
    return GradCheckReport(worst_err, tol, worst, count)
