"""Dense reverse-mode automatic differentiation on numpy arrays.

Small-model engine: everything is float64, graphs are built per
forward/backward episode and garbage-collected afterwards, and every op
allocates fresh output storage (no views shared between tensors). The op
set is exactly what the tracker needs; there is no broadcasting cleverness
beyond numpy's own rules plus gradient un-broadcasting.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Array = np.ndarray

# When False, ops do not record backward rules. Used for inference paths
# where building the graph would only burn memory and time.
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> Array:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a gradient over the axes numpy broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in a reverse-mode graph wrapping a float64 numpy array.

    ``requires_grad`` marks leaf parameters: after ``backward`` their
    ``.grad`` buffer holds the accumulated gradient. Interior nodes carry
    gradients only transiently during the reverse sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_rule", "_needs")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._rule: Optional[Callable[[Array], Sequence[Optional[Array]]]] = None
        self._needs = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape})"

    # arithmetic sugar; all real work happens in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: Array, parents: tuple, rule) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p._needs for p in parents):
        out._parents = parents
        out._rule = rule
        out._needs = True
    return out


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    # iterative DFS; recursion would overflow on long clip graphs
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if parent._needs and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss into parameter ``.grad``.

    Additive over calls: repeated backward passes on fresh graphs sum into
    the same grad buffers, so gradient accumulation across clips is just
    repeated calls without an intervening zero.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss._needs:
        return
    order = _toposort(loss)
    grads: dict = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._rule is None:
            continue
        parent_grads = node._rule(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent._needs:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), rule)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data**e

    def rule(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(data, (a,), rule)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def rule(g):
        return (g * data,)

    return _make(data, (a,), rule)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def rule(g):
        return (g / a.data,)

    return _make(data, (a,), rule)


def sin(a) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        return (g * np.cos(a.data),)

    return _make(np.sin(a.data), (a,), rule)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def rule(g):
        return (g * -np.sin(a.data),)

    return _make(np.cos(a.data), (a,), rule)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # numerically symmetric form; never overflows
    data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                    np.exp(a.data) / (1.0 + np.exp(a.data)))

    def rule(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), rule)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def rule(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), rule)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)

    def rule(g):
        # subgradient 0 at the kink
        return (g * np.sign(a.data),)

    return _make(data, (a,), rule)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)

    def rule(g):
        take_a = a.data >= b.data  # ties route to the first argument
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(data, (a, b), rule)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)

    def rule(g):
        take_a = a.data <= b.data
        return (
            _unbroadcast(g * take_a, a.data.shape),
            _unbroadcast(g * ~take_a, b.data.shape),
        )

    return _make(data, (a, b), rule)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul wants 2-D operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), rule)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose wants a 2-D tensor, got shape {a.shape}")

    def rule(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), rule)


def take(a, key) -> Tensor:
    """Basic/fancy indexing with scatter-add backward (repeats accumulate)."""
    a = as_tensor(a)
    data = np.array(a.data[key], dtype=np.float64)

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(data, (a,), rule)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.data.shape).copy(),)

    return _make(data, (a,), rule)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.array(piece) for piece in np.split(g, splits, axis=axis))

    return _make(data, tuple(parts), rule)


def masked_softmax(logits, mask: Optional[Array] = None, ) -> Tensor:
    """Row-wise softmax over the last axis with hard masking.

    ``mask`` is boolean with True meaning "exclude this position". Masked
    positions come out exactly 0.0. A fully masked row returns all zeros
    rather than NaN; its backward contribution is zero as well.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {x.shape}")
        keep = ~mask
        any_keep = keep.any(axis=-1, keepdims=True)
        shifted = np.where(keep, x, -np.inf)
        row_max = np.where(any_keep, shifted.max(axis=-1, keepdims=True), 0.0)
        e = np.exp(np.where(keep, x - row_max, -np.inf))
        e = np.where(keep, e, 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    else:
        row_max = x.max(axis=-1, keepdims=True)
        e = np.exp(x - row_max)
        out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        # d softmax: s * (g - <g, s>); zero rows stay zero
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (logits,), rule)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis."""
    x = as_tensor(x)
    mu = reduce_mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = reduce_mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def dropout(x, rate: float, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. rate 0 is the identity (returns the input tensor)."""
    if rate <= 0.0:
        return as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout with rate > 0 needs an explicit rng")
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def sincos_embed(values, d_model: int, temperature: float = 10000.0,
                 scale: float = 2.0 * math.pi) -> Tensor:
    """Interleaved sin/cos encoding of coordinate columns.

    ``values`` is [N, k]; each of the k coordinates gets a contiguous block
    of d_model // k entries laid out [sin, cos, sin, cos, ...] over
    geometric frequencies. Differentiable in the coordinates, so position
    embeddings of refined boxes stay inside the graph.
    """
    values = as_tensor(values)
    if values.ndim != 2:
        raise ValueError(f"sincos_embed wants [N, k] input, got shape {values.shape}")
    n, k = values.data.shape
    if d_model % (2 * k) != 0:
        raise ValueError(f"d_model {d_model} must be divisible by {2 * k} for {k} coordinates")
    per = d_model // k
    half = per // 2
    freqs = scale / temperature ** (2.0 * np.arange(half) / per)  # [half]
    angles = values.data[:, :, None] * freqs[None, None, :]  # [N, k, half]
    block = np.empty((n, k, per), dtype=np.float64)
    block[:, :, 0::2] = np.sin(angles)
    block[:, :, 1::2] = np.cos(angles)
    data = block.reshape(n, d_model)

    def rule(g):
        gb = g.reshape(n, k, per)
        d_angle = gb[:, :, 0::2] * np.cos(angles) - gb[:, :, 1::2] * np.sin(angles)
        return ((d_angle * freqs[None, None, :]).sum(axis=2),)

    return _make(data, (values,), rule)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named, seeded parameter registry.

    Parameters are created on first use; creation order fixes the rng
    stream, so a model built the same way twice from the same seed holds
    bit-identical weights. Reuse returns the identical Tensor object;
    asking for an existing name with a different shape is an error.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, shape: tuple, fan_in: Optional[int] = None,
                  init: str = "uniform", value: Optional[float] = None) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if name in self._params:
            existing = self._params[name]
            if existing.data.shape != shape:
                raise ValueError(
                    f"parameter {name!r} exists with shape {existing.data.shape}, requested {shape}")
            return existing
        if init == "uniform":
            fi = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = 1.0 / math.sqrt(max(1, fi))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "constant":
            if value is None:
                raise ValueError("constant init needs a value")
            data = np.full(shape, float(value))
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for name in names:
            p = self._params[name]
            p.requires_grad = flag
            p._needs = True  # parameters always stay in the graph
            if not flag:
                p.grad = None

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_arrays(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: dict[str, Array]) -> None:
        missing = [n for n in self._params if n not in arrays]
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in self._params.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != p.data.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {incoming.shape} != expected {p.data.shape}")
            p.data = incoming.copy()


def finite_diff_check(fn: Callable[[], Tensor], store: ParameterStore,
                      eps: float = 1e-5, samples_per_param: int = 4) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn`` must be a deterministic closure rebuilding the scalar loss from
    the store's current parameter values. Returns the max relative error
    |analytic - central| / max(1e-8, |central|) over sampled coordinates.

    Per parameter, the coordinates with the largest analytic gradient
    magnitudes are probed. Central differences of a double-precision loss
    carry evaluation noise around |loss|·1e-13/eps, so coordinates whose
    derivative sits below that floor measure only noise; the largest
    coordinates give the best signal, and structural backward bugs (a
    wrong factor, a dropped term, a zeroed buffer) distort exactly those.
    A parameter whose analytic gradient is spuriously all zero still
    fails: the probe then lands where the central difference is not zero.
    """
    store.zero_grads()
    backward(fn())
    worst = 0.0
    for name, p in store.items():
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        n = flat.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            order = np.argsort(-np.abs(gflat), kind="stable")
            coords = np.sort(order[:samples_per_param])
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = float(fn().data)
            flat[idx] = original - eps
            f_minus = float(fn().data)
            flat[idx] = original
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(gflat[idx]) - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return worst
