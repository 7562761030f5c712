"""Dense array engine with reverse-mode gradients.

Tensors wrap numpy arrays. Every differentiable op records its parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks the recorded graph in reverse topological order. Leaf tensors that
require gradients (typically :class:`Parameter`) accumulate into ``.grad``
until :meth:`ParamStore.zero_grad` or :meth:`Tensor.zero_grad` is called.

The heavier kernels used by the model (convolution, layer norm, masked
softmax, rotary embedding, cross entropy) are fused ops with hand-written
backward passes rather than compositions of primitives.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, ndtr

_DTYPE = np.float64
_GRAD_ENABLED = True

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand extents do not agree."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value."""


def set_default_dtype(dtype) -> None:
    """Switch the float width used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tensor_sum(self, axis)


class Parameter(Tensor):
    """A named leaf tensor whose gradient slot always exists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, requires_grad: bool = True):
        super().__init__(np.array(data, dtype=_DTYPE), requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
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
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tensor_sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    out = np.flip(a.data, axis=axis)
    return _make(out, (a,), lambda g: (np.flip(g, axis=axis),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def take_rows(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    out = weight.data[ids]

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return _make(out, (weight,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # (..., K) @ (K, M): one 2-D product over all leading rows
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw2)

    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _make(out, (a, b), bw)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = ndtr(x)
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# fused kernels


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """'Same'-padded 1-D cross-correlation along the sequence axis.

    Args:
        x: (..., N, C_in) input.
        kernel: (k, C_in, C_out) taps, k odd.
        bias: (C_out,).

    Returns:
        (..., N, C_out); tap j reads input position i + j - (k-1)//2.
    """
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel size, got {k}")
    if x.shape[-1] != kernel.shape[1] or bias.shape != (kernel.shape[2],):
        raise ShapeError(
            f"conv1d_same shape mismatch: input {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    n = x.shape[-2]
    pad = (k - 1) // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-1] + (kernel.shape[2],), dtype=x.data.dtype)
    for j in range(k):
        out += xp[..., j : j + n, :] @ kernel.data[j]
    out += bias.data

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j : j + n, :] += g @ kernel.data[j].T
            gx = gxp[..., pad : pad + n, :]
        if kernel.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gk = np.stack(
                [xp[..., j : j + n, :].reshape(-1, xp.shape[-1]).T @ g2 for j in range(k)]
            )
        if bias.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None,
            _unbroadcast(g, bias.shape) if bias.requires_grad else None,
        )

    return _make(out, (x, gain, bias), bw)


def masked_softmax(scores: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allow``; others are exactly 0."""
    allow = np.asarray(allow, dtype=bool)
    if not allow.any(axis=-1).all():
        raise ContractError("masked_softmax: a row has no allowed positions")
    neg = np.where(allow, 0.0, -np.inf).astype(scores.data.dtype)
    s = scores.data + neg
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s, out=s)
    e /= e.sum(axis=-1, keepdims=True)
    out = e

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (scores,), bw)


def rope_tables(positions: np.ndarray, dim: int, base: float = 10000.0,
                ntk_factor: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), dim // 2)."""
    if dim % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {dim}")
    if ntk_factor is not None and ntk_factor != 1.0:
        if dim <= 2:
            raise ConfigError("NTK scaling needs head dim > 2")
        base = base * ntk_factor ** (dim / (dim - 2))
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(_DTYPE), np.sin(ang).astype(_DTYPE)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs (2j, 2j+1) of the last axis by per-position angles.

    ``cos``/``sin`` have shape (N, d/2) and broadcast over leading axes of
    ``x`` (..., N, d).
    """
    if x.shape[-1] % 2:
        raise ConfigError(f"rotary embedding needs an even head dim, got {x.shape[-1]}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(out, (x,), bw)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy_masked(logits: Tensor, targets, position_mask) -> Tensor:
    """Mean negative log-likelihood over the positions selected by ``position_mask``."""
    targets = np.asarray(targets)
    sel = np.asarray(position_mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or sel.shape != targets.shape:
        raise ShapeError(
            f"cross_entropy_masked shape mismatch: logits {logits.shape}, "
            f"targets {targets.shape}, mask {sel.shape}"
        )
    count = int(sel.sum())
    if count == 0:
        raise ContractError("cross_entropy_masked: position mask selects nothing")
    v = logits.shape[-1]
    if targets[sel].min() < 0 or targets[sel].max() >= v:
        raise ContractError("cross_entropy_masked: target id outside vocabulary")
    logp = log_softmax_np(logits.data)
    safe_t = np.where(sel, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * sel).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (sel[..., None] * (g / count)),)

    return _make(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# parameters, randomness, checking


class ParamStore:
    """Ordered name -> Parameter mapping; names are unique."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise ConfigError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def numel(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}


class RandomSource:
    """Seeded PCG64 stream whose full state can be saved and restored."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "RandomSource":
        """Independent child stream derived from (seed, key)."""
        child = RandomSource(self.seed)
        child.gen = np.random.Generator(np.random.PCG64([self.seed, int(key)]))
        return child

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self.gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.gen.bit_generator.state = state["bit_generator"]

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(_DTYPE)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    out = f(x)
    if not isinstance(out, Tensor):
        out = as_tensor(out)
    x.grad = np.zeros_like(x.data)
    backward(out)
    analytic = x.grad.copy()

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            xp = base.copy().reshape(-1)
            xp[i] += h
            fp = float(f(Tensor(xp.reshape(base.shape))).data)
            xp[i] -= 2 * h
            fm = float(f(Tensor(xp.reshape(base.shape))).data)
            flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                      h: float = 1e-5, coords_per_param: int | None = None,
                      rng: RandomSource | None = None) -> float:
    """Finite-difference check of ``loss_fn`` against its parameter gradients.

    When ``coords_per_param`` is set, only that many randomly chosen
    coordinates of each parameter are probed.
    """
    for p in params:
        p.grad = np.zeros_like(p.data)
    backward(loss_fn())
    worst = 0.0
    rng = rng or RandomSource(0)
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.gen.choice(flat.size, coords_per_param, replace=False)
        ga = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(ga[i])))
    return worst
