"""Dense float64 tensors with reverse-mode differentiation.

Each operation returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``Tensor.backward``
walks the graph in reverse topological order and accumulates into the
``grad`` of every leaf that requires gradients.

The op set is deliberately closed: only what the encoder, the policy and the
losses of this package need. Elementwise binary ops accept equal shapes or a
size-1 operand; bias-style row broadcasting goes through :func:`add_bias` and
:func:`linear`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LAYERNORM_EPS = 1e-5
NORM_EPS = 1e-12

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation and sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- operators --------------------------------------------------------
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
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Gradients add onto whatever the leaves already hold; call
        ``zero_grad`` (or an optimizer's) between steps.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_fit(g, a.shape), _fit(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_fit(g * b.data, a.shape), _fit(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("div", a, b)
    out = a.data / b.data

    def back(g):
        return _fit(g / b.data, a.shape), _fit(-g * out / b.data, b.shape)

    return _make(out, (a, b), back, "div")


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "negate")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair("minimum", a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_fit(np.where(pick_a, g, 0.0), a.shape), _fit(np.where(pick_a, 0.0, g), b.shape)),
        "minimum",
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; zero gradient where clamping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),), "clip")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(a.data * on, (a,), lambda g: (g * on,), "relu")


_UNARY = {"negate": negate, "exp": exp, "log": log, "tanh": tanh, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, negate, exp, log, tanh, square."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def take(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), back, "take")


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) for an integer array ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding ids out of range [0, {V})")
    return _make(table.data[ids], (table,), back, "embedding")


def pick(a, index) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), back, "pick")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, back, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D operands, equal-batch stacks, or ``(..., k) @ (k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ in {a.shape} and {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def add_bias(x, bias) -> Tensor:
    """``x[..., n] + bias[n]``."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {x.shape} and {bias.shape}")
    return _make(
        x.data + bias.data,
        (x, bias),
        lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)),
        "add_bias",
    )


def linear(x, weight, bias=None) -> Tensor:
    """``x[..., k] @ weight[k, n] (+ bias[n])`` as one recorded op."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, back, "linear")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def _masked_shift(x: np.ndarray, axis: int, mask) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    return x - m


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax. ``mask`` (bool, broadcastable) marks allowed entries;
    disallowed entries get probability exactly 0."""
    x = as_tensor(x)
    e = np.exp(_masked_shift(x.data, axis, mask))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Log-sum-exp stabilised log-softmax; masked entries are -inf."""
    x = as_tensor(x)
    z = _masked_shift(x.data, axis, mask)
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        gz = np.where(np.isfinite(out), g, 0.0)
        return (gz - p * gz.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


def layernorm(x, gain, bias, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then
    apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        g2 = g.reshape(-1, n)
        ggain = (g2 * xhat.reshape(-1, n)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back, "layernorm")


def l2_normalize(x, eps: float = NORM_EPS) -> Tensor:
    """Rows divided by ``max(||row||, eps)``; a zero row stays zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x.data / safe
    active = norm > eps

    def back(g):
        proj = np.where(active, (g * y).sum(axis=-1, keepdims=True), 0.0)
        return ((g - y * proj) / safe,)

    return _make(y, (x,), back, "l2_normalize")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

class NonFiniteError(FloatingPointError):
    pass


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated after each in-place perturbation of a parameter
    element. Relative error is ``|a - n| / max(1e-8, |a| + |n|)``. When
    ``elements`` is given, at most that many entries per parameter are
    checked (chosen with a fixed-seed generator).
    """
    params = list(params)
    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if elements is not None and flat.size > elements:
                idx = np.sort(rng.choice(flat.size, size=elements, replace=False))
            a_flat = analytic[pi].reshape(-1)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + h
                fp = float(f().data)
                flat[j] = orig - h
                fm = float(f().data)
                flat[j] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite value perturbing parameter {pi} element {j}")
                num = (fp - fm) / (2.0 * h)
                a = a_flat[j]
                err = abs(a - num) / max(1e-8, abs(a) + abs(num))
                worst = max(worst, err)
    zero_grads(params)
    return worst
