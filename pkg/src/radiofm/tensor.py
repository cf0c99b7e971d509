"""Minimal float64 tensor with reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``backward`` walks the nodes in
reverse topological order, writes ``.grad`` on leaf tensors and then
drops the graph so each training step starts from a clean slate.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import math
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
LOG_FLOOR = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    tracked = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract {b.shape} from {a.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply {a.shape} and {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def log(t: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the input clipped to ``floor``; clipped cells get zero gradient."""
    x = t.data
    clipped = np.maximum(x, floor)
    keep = x >= floor
    return _make(np.log(clipped), (t,), lambda g: (np.where(keep, g / clipped, 0.0),))


def gelu(t: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = t.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _make(out, (t,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot matmul {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bw)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(t.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _make(np.asarray(data, dtype=DTYPE), (t,), bw)


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = t.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([t.shape[a] for a in axes]))
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_lastdim(t: Tensor) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (t,), bw)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each last-dim slice to zero mean / unit variance, then apply gain and bias."""
    d = t.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx = g * gain.data
        gx_in = inv * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return gx_in, g_gain, g_bias

    return _make(out, (t, gain, bias), bw)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(t: Tensor, shape) -> Tensor:
    try:
        data = t.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}") from exc
    return _make(data, (t,), lambda g: (g.reshape(t.shape),))


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inverse),))


def index(t: Tensor, key) -> Tensor:
    data = t.data[key]

    def bw(g):
        full = np.zeros_like(t.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(data, dtype=DTYPE), (t,), bw)


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(t.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {t.shape} to {shape}") from exc
    return _make(data, (t,), lambda g: (_unbroadcast(g, t.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(x) for x in tensors]
    try:
        data = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat operands disagree off the concat axis") from exc
    bounds = np.cumsum([x.shape[axis] for x in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tensors, bw)


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: ``t`` is (N, M, d), ``idx`` is (N, L) -> (N, L, d)."""
    idx = np.asarray(idx, dtype=np.intp)
    if t.ndim != 3 or idx.ndim != 2 or idx.shape[0] != t.shape[0]:
        raise ShapeError(f"gather_rows expects (N,M,d) and (N,L), got {t.shape} and {idx.shape}")
    data = np.take_along_axis(t.data, idx[:, :, None], axis=1)

    def bw(g):
        full = np.zeros_like(t.data)
        rows = np.arange(t.shape[0])[:, None]
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(data, (t,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate; call ``ParamSet.zero_grad`` between steps.
    The recorded graph is released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Ordered name -> Tensor map with a set of frozen names."""

    def __init__(self, entries: dict[str, np.ndarray | Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        self.frozen_names: set[str] = set()
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def freeze(self, names: Iterable[str]) -> None:
        self.frozen_names.update(names)

    def freeze_prefix(self, prefix: str) -> None:
        self.freeze(self.names(prefix))

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def num_params(self, prefix: str = "") -> int:
        return sum(self._entries[n].size for n in self.names(prefix))

    def digest(self, prefix: str = "") -> str:
        """sha256 over names, shapes and raw bytes of the selected entries."""
        h = hashlib.sha256()
        for n in self.names(prefix):
            t = self._entries[n]
            h.update(n.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._entries.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, t in self._entries.items():
            if n not in state:
                if strict:
                    raise ContractError(f"missing parameter {n!r}")
                continue
            arr = np.asarray(state[n], dtype=DTYPE)
            if arr.shape != t.shape:
                raise ShapeError(f"{n}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()


class AdamW:
    """Adam with decoupled weight decay; frozen parameters are skipped entirely.

    Weight decay only touches tensors of rank >= 2 (biases, norms and the mask
    token are not decayed).
    """

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}

    @property
    def hyper(self) -> dict[str, float]:
        return {
            "learning_rate": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            if name in self.params.frozen_names:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(p.data)
                self.second_moment[name] = np.zeros_like(p.data)
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.first_moment:
            out[f"m.{name}"] = self.first_moment[name]
            out[f"v.{name}"] = self.second_moment[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = int(step_count)
        self.first_moment = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("m.")}
        self.second_moment = {k[2:]: np.array(v) for k, v in state.items() if k.startswith("v.")}


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(model_fn: Callable[[], Tensor], params: ParamSet, tolerance: float = 1e-4,
               step: float = 1e-5, per_tensor: int = 4, max_coords: int = 5000,
               seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``model_fn`` takes no arguments and returns a scalar loss built from
    ``params``. Up to ``per_tensor`` coordinates are sampled from every entry
    (all of them for tiny tensors), capped at ``max_coords`` overall. Returns
    the max of ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    with no_grad():
        first = model_fn().data.copy()
        second = model_fn().data.copy()
    if not np.array_equal(first, second):
        raise ContractError("model_fn is not deterministic: two forward passes disagree")

    params.zero_grad()
    loss = model_fn()
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.items()}

    rng = np.random.default_rng(seed)
    coords: list[tuple[str, int]] = []
    for name, t in params.items():
        k = min(per_tensor, t.size)
        for flat in rng.choice(t.size, size=k, replace=False):
            coords.append((name, int(flat)))
    coords = coords[:max_coords]

    worst = 0.0
    for name, flat in coords:
        t = params[name]
        view = t.data.reshape(-1)
        orig = view[flat]
        with no_grad():
            view[flat] = orig + step
            up = float(model_fn().data)
            view[flat] = orig - step
            down = float(model_fn().data)
        view[flat] = orig
        numeric = (up - down) / (2 * step)
        a = float(analytic[name].reshape(-1)[flat])
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    if worst > tolerance:
        logger.warning("gradient check failed: max relative error %.3e > %.1e", worst, tolerance)
    params.zero_grad()
    return worst
