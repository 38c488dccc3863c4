"""Dense float64 tensors with a dynamic reverse-mode tape.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure mapping the output adjoint to input adjoints.
``backward`` walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _FreezeTape:
    """Records stop-gradient values on one pass and replays them on later passes.

    Finite differences must differentiate the same surrogate that backward
    does, in which every ``sg(.)`` term is a constant.
    """

    def __init__(self):
        self.mode: Optional[str] = None
        self.values: list = []
        self.cursor = 0

    def __call__(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if self.mode is None or self.mode == "off":
            return compute()
        if self.mode == "record":
            v = compute()
            # copy: the caller may perturb the source buffer in place later
            self.values.append(np.array(v, copy=True) if isinstance(v, np.ndarray) else v)
            return v
        if self.cursor >= len(self.values):
            raise ContractError("replayed pass issued more frozen values than the recorded pass")
        v = self.values[self.cursor]
        self.cursor += 1
        return v


_freeze = _FreezeTape()


def frozen(compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Evaluate a non-differentiable quantity, honouring an active record/replay tape."""
    return _freeze(compute)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Optional[tuple] = None
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._released = False
        rg = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = rg
        if rg:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = None
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)
    return Tensor._from_op(ad / bd, (a, b), bw, "div")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return Tensor._from_op(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._from_op(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------- shape / reduction

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # (..., m, k) @ (k, n): fold leading axes into one GEMM
        k = ad.shape[-1]
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        return Tensor._from_op(out, (a, b), bw2, "matmul")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb
    return Tensor._from_op(out, (a, b), bw, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return Tensor._from_op(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return Tensor._from_op(np.swapaxes(x.data, a1, a2), (x,),
                           lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; the adjoint scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    rows, width = table.shape

    def bw(g):
        out = np.zeros((rows, width))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, width))
        return (out,)
    return Tensor._from_op(table.data[ids], (table,), bw, "embedding")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(frozen(lambda: x.data))


def straight_through(continuous: Tensor, discrete: Tensor) -> Tensor:
    """Forward value of ``discrete``; adjoint routed unchanged to ``continuous``.

    Equivalent to ``continuous + sg(discrete - continuous)`` except that the
    forward value is bitwise the discrete one.
    """
    if continuous.shape != discrete.shape:
        raise DimensionError(f"straight_through: {continuous.shape} vs {discrete.shape}")
    if _freeze.mode == "replay":
        out = continuous.data + _freeze(lambda: None)
    else:
        out = discrete.data.copy()
        _freeze(lambda: discrete.data - continuous.data)
    return Tensor._from_op(out, (continuous,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------- fused ops

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Numerically stable softmax; ``mask`` (True = keep) zeroes excluded entries."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax: NaN in input")
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    if mask is not None and np.isneginf(m).any():
        raise ContractError("softmax: a row has every entry masked")
    e = np.exp(xd - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return Tensor._from_op(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(xd - m).sum(axis=axis, keepdims=True))
    y = xd - lse
    p = np.exp(y)
    return Tensor._from_op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),),
                           "log_softmax")


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over all leading positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no positions carry weight")
    xd = logits.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = (xd - m - np.log(z))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / total

    def bw(g):
        grad = e / z
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (w / total)[..., None] * g,)
    return Tensor._from_op(np.asarray(loss), (logits,), bw, "cross_entropy")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._from_op(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit L2 norm; all-zero rows pass through untouched."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    y = xd / safe

    def bw(g):
        proj = np.where(zero, 0.0, (g * y).sum(axis=axis, keepdims=True))
        return ((g - y * proj) / safe,)
    return Tensor._from_op(y, (x,), bw, "l2_normalize")


def dropout(x: Tensor, rate: float, seed=None, training: bool = True) -> Tensor:
    """Inverted dropout. ``seed`` may be an int or a ``numpy.random.Generator``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from a scalar loss.

    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise ContractError("backward already ran on this graph; rebuild it with a new forward pass")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring a gradient")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._parents is None:
            if node._released:
                raise ContractError("graph segment already consumed by an earlier backward")
            if g is not None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        if g is not None:
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = None
        node._backward = None
        node._released = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@contextlib.contextmanager
def _tape(mode: str):
    prev = (_freeze.mode, _freeze.cursor)
    _freeze.mode, _freeze.cursor = mode, 0
    try:
        yield
    finally:
        _freeze.mode, _freeze.cursor = prev


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                      freeze: bool = True) -> float:
    """Max relative error between ``backward`` and central differences of ``f`` at ``x``.

    ``f`` must read ``x`` afresh on every call; coordinates of ``x.data`` are
    perturbed in place and restored. With ``freeze`` the stop-gradient values
    (and anything else routed through :func:`frozen`, e.g. argmax choices) of
    the unperturbed pass are replayed in every probe. Leaves ``x.grad``
    holding the analytic gradient.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if not x.requires_grad:
        raise ContractError("finite_diff_check needs a tensor with requires_grad=True")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    x.grad = None
    saved = _freeze.values
    _freeze.values = []
    try:
        with _tape("record" if freeze else "off"):
            loss = f(x)
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad(), _tape("replay" if freeze else "off"):
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                _freeze.cursor = 0
                fp = f(x).item()
                flat[i] = orig - eps
                _freeze.cursor = 0
                fm = f(x).item()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * eps)
    finally:
        _freeze.values = saved
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
