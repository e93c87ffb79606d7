"""Minimal differentiable computation engine.

Only the operations the stain-transformation networks and their losses need
are provided. Every operation takes and returns :class:`Tensor` objects and
records a backward closure, so ``loss.backward()`` fills ``.grad`` on every
tensor created with ``requires_grad=True``.

Image tensors use the logical layout ``(n, c, h, w)``. Convolution outputs are
views whose physical memory order is channels-last; elementwise operations
preserve that order, which keeps the next convolution's packing step cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's preconditions."""


class GradientCheckError(RuntimeError):
    """Raised when a gradient check produces non-finite values."""


class Tensor:
    """A node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes do not keep their gradient once propagated
                    node.grad = None

    # arithmetic sugar used by the loss functions
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


class Param(Tensor):
    """A learnable leaf tensor carrying Adam moment accumulators."""

    __slots__ = ("m1", "m2", "step_count")

    def __init__(self, value: np.ndarray):
        super().__init__(np.array(value), requires_grad=True)
        self.m1 = np.zeros_like(self.data)
        self.m2 = np.zeros_like(self.data)
        self.step_count = 0

    @property
    def value(self) -> np.ndarray:
        return self.data

    def copy(self) -> "Param":
        p = Param(self.data.copy())
        p.m1 = self.m1.copy()
        p.m2 = self.m2.copy()
        p.step_count = self.step_count
        p.requires_grad = self.requires_grad
        return p

    def astype(self, dtype) -> "Param":
        p = Param(self.data.astype(dtype))
        p.m1 = self.m1.astype(dtype)
        p.m2 = self.m2.astype(dtype)
        p.step_count = self.step_count
        return p

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    if isinstance(x, Param) and not x.requires_grad:
        # a frozen parameter enters the graph as a constant, so gradients stay
        # out of it even if backward() runs after the freeze is lifted
        return Tensor(x.data)
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64) if np.isscalar(x) else np.asarray(x))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if g.flags.writeable and g.base is None else np.array(g)
    else:
        t.grad = t.grad + g


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and reduction ops
# --------------------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)


def add(a, b) -> Tensor:
    if _is_number(b):
        a, b = b, a
    if _is_number(a):
        b = as_tensor(b)
        out = Tensor(b.data + float(a))
        if b.requires_grad:
            out.requires_grad = True
            out._parents = (b,)
            out._backward = lambda g: _accum(b, g)
        return out
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    if _needs_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def backward(g):
            _accum(a, _reduce_to(g, a.shape))
            _accum(b, _reduce_to(g, b.shape))

        out._backward = backward
    return out


def sub(a, b) -> Tensor:
    if _is_number(b):
        return add(a, -float(b))
    if _is_number(a):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    if _needs_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def backward(g):
            _accum(a, _reduce_to(g, a.shape))
            _accum(b, _reduce_to(-g, b.shape))

        out._backward = backward
    return out


def mul(a, b) -> Tensor:
    if _is_number(a):
        a, b = b, a
    if _is_number(b):
        a = as_tensor(a)
        c = float(b)
        out = Tensor(a.data * c)
        if a.requires_grad:
            out.requires_grad = True
            out._parents = (a,)
            out._backward = lambda g: _accum(a, g * c)
        return out
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    if _needs_grad(a, b):
        out.requires_grad = True
        out._parents = (a, b)

        def backward(g):
            if a.requires_grad:
                _accum(a, _reduce_to(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _reduce_to(g * a.data, b.shape))

        out._backward = backward
    return out


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data * x.data)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, 2.0 * g * x.data)
    return out


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.abs(x.data))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, g * np.sign(x.data))
    return out


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    x = as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, np.full(x.shape, g, dtype=x.dtype))
    return out


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return mul(total(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, g.reshape(x.shape))
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch dimension (logical ``c, h, w`` order)."""
    return reshape(x, (x.shape[0], -1))


def slice_spatial(x: Tensor, rows: slice, cols: slice) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data[:, :, rows, cols])
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward(g):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, :, rows, cols] = g
            _accum(x, full)

        out._backward = backward
    return out


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    if _needs_grad(*xs):
        out.requires_grad = True
        out._parents = tuple(xs)
        bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

        def backward(g):
            for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                if x.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(x, g[tuple(idx)])

        out._backward = backward
    return out


# --------------------------------------------------------------------------
# network ops
# --------------------------------------------------------------------------


def _conv_offsets(w: int) -> list[int]:
    return [ky * (w + 2) + kx for ky in range(3) for kx in range(3)]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output size equals input size).

    ``weight`` has shape ``(c_out, c_in, 3, 3)`` and ``bias`` shape ``(c_out,)``.
    Computed as cross-correlation, like every deep learning framework.

    Implementation: the zero-padded batch is laid out as one flat
    ``(rows, c_in)`` buffer, where a spatial tap ``(ky, kx)`` becomes a fixed
    row offset. Each tap is then a single contiguous matrix product.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects a (c_out, c_in, 3, 3) kernel, got {weight.shape}")
    n, ci, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {ci}, kernel expects {weight.shape[1]}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d bias must have shape ({co},), got {bias.shape}")

    dtype = np.result_type(x.data, weight.data)
    P = (h + 2) * (w + 2)
    Lv = (n - 1) * P + h * (w + 2)
    offs = _conv_offsets(w)
    xp = np.zeros((n * P + 2, ci), dtype=dtype)
    xp[: n * P].reshape(n, h + 2, w + 2, ci)[:, 1:-1, 1:-1] = x.data.transpose(0, 2, 3, 1)
    w9 = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(9, ci, co), dtype=dtype)

    full = np.empty((n * P, co), dtype=dtype)
    acc = full[:Lv]
    np.matmul(xp[0:Lv], w9[0], out=acc)
    for k in range(1, 9):
        acc += xp[offs[k] : offs[k] + Lv] @ w9[k]
    if bias is not None:
        acc += bias.data.astype(dtype, copy=False)
    out = Tensor(full.reshape(n, h + 2, w + 2, co)[:, :h, :w].transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = parents

        def backward(g):
            gp = np.zeros((n * P, co), dtype=dtype)
            gp.reshape(n, h + 2, w + 2, co)[:, :h, :w] = g.transpose(0, 2, 3, 1)
            gv = gp[:Lv]
            if weight.requires_grad:
                dw9 = np.empty_like(w9)
                for k in range(9):
                    np.matmul(xp[offs[k] : offs[k] + Lv].T, gv, out=dw9[k])
                _accum(weight, dw9.reshape(3, 3, ci, co).transpose(3, 2, 0, 1).astype(weight.dtype, copy=False))
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3)).astype(bias.dtype, copy=False))
            if x.requires_grad:
                dxp = np.zeros((n * P + 2, ci), dtype=dtype)
                for k in range(9):
                    dxp[offs[k] : offs[k] + Lv] += gv @ w9[k].T
                dx = dxp[: n * P].reshape(n, h + 2, w + 2, ci)[:, 1:-1, 1:-1].transpose(0, 3, 1, 2)
                _accum(x, dx.astype(x.dtype, copy=False))

        out._backward = backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """``x`` for ``x > 0`` and ``slope * x`` otherwise."""
    x = as_tensor(x)
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, x.data * x.data.dtype.type(slope)))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, np.where(pos, g, g * g.dtype.type(slope)))
    return out


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2. Odd spatial sizes are rejected."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2 expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = Tensor(blocks.mean(axis=(3, 5)))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward(g):
            q = g * g.dtype.type(0.25)
            _accum(x, np.broadcast_to(q[:, :, :, None, :, None], (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w))

        out._backward = backward
    return out


def _keys_kernel(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    return np.where(
        s <= 1,
        (a + 2) * s**3 - (a + 3) * s**2 + 1,
        np.where(s < 2, a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a, 0.0),
    )


@lru_cache(maxsize=64)
def bicubic_matrix(size: int) -> np.ndarray:
    """``(2 * size, size)`` matrix of Keys (a=-0.5) weights for 2x upsampling.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) / 2 - 0.5``;
    taps beyond the border are clamped to the edge sample.
    """
    m = np.zeros((2 * size, size))
    for i in range(2 * size):
        src = (i + 0.5) / 2.0 - 0.5
        base = int(np.floor(src))
        for j in range(base - 1, base + 3):
            m[i, min(max(j, 0), size - 1)] += _keys_kernel(np.asarray(src - j))
    m.setflags(write=False)
    return m


def bicubic_up2(x: Tensor) -> Tensor:
    """Separable bicubic 2x upsampling."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"bicubic_up2 expects a 4-D input, got shape {x.shape}")
    n, c, h, w = x.shape
    mh = bicubic_matrix(h).astype(x.dtype)
    mw = bicubic_matrix(w).astype(x.dtype)
    # conv outputs are channels-last views; batched matmul is much faster on contiguous data
    tmp = np.matmul(np.ascontiguousarray(x.data), mw.T)
    out = Tensor(np.matmul(mh, tmp))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, np.matmul(np.matmul(mh.T, np.ascontiguousarray(g)), mw))
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer ``y = x @ W.T + b`` for a batch of vectors.

    ``x`` is ``(n, in)`` (or a single ``(in,)`` vector); ``weight`` is ``(out, in)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if weight.data.ndim != 2 or weight.shape[1] != xd.shape[1]:
        raise ShapeError(f"dense: weight {weight.shape} does not accept input length {xd.shape[1]}")
    y = xd @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
    out = Tensor(y[0] if single else y)
    parents = (x, weight) if bias is None else (x, weight, bias)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = parents

        def backward(g):
            g2 = g[None, :] if single else g
            if weight.requires_grad:
                _accum(weight, g2.T @ xd)
            if bias is not None and bias.requires_grad:
                _accum(bias, g2.sum(axis=0))
            if x.requires_grad:
                dx = g2 @ weight.data
                _accum(x, dx[0] if single else dx)

        out._backward = backward
    return out


def sigmoid(x) -> Tensor:
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype if d.dtype.kind == "f" else np.float64)
    out = Tensor(s)
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)
        out._backward = lambda g: _accum(x, g * s * (1.0 - s))
    return out


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def adam_step(p: Param, cfg: AdamConfig) -> Param:
    """Apply one bias-corrected Adam update in place and clear the gradient."""
    g = p.grad
    p.step_count += 1
    t = p.step_count
    if g is None:
        g = np.zeros_like(p.data)
    dt = p.data.dtype.type
    p.m1 *= dt(cfg.beta1)
    p.m1 += dt(1.0 - cfg.beta1) * g
    p.m2 *= dt(cfg.beta2)
    p.m2 += dt(1.0 - cfg.beta2) * (g * g)
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    # lr * (m1 / c1) / (sqrt(m2 / c2) + eps), evaluated in one scratch buffer
    denom = np.sqrt(p.m2)
    denom *= dt(1.0 / np.sqrt(c2))
    denom += dt(cfg.eps)
    np.divide(p.m1, denom, out=denom)
    denom *= dt(cfg.lr / c1)
    p.data -= denom
    p.grad = None
    return p


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def grad_check(
    op: Callable[..., Tensor],
    *inputs: np.ndarray,
    step: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Compare backpropagated gradients of ``op`` with central finite differences.

    The scalar objective is ``sum(r * op(*inputs))`` for a fixed random ``r``.
    Returns the maximum elementwise relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor * scale)`` over all
    inputs, where ``scale = max(1, max|analytic|)`` for that input. Scaling the
    floor keeps roundoff at entries whose true gradient is zero from dominating.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    rng = np.random.default_rng(seed)
    r = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
    total(mul(out, r)).backward()

    def objective() -> float:
        return float(np.sum(op(*[Tensor(a) for a in arrays]).data * r))

    worst = 0.0
    for a, t in zip(arrays, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        if not np.all(np.isfinite(analytic)):
            raise GradientCheckError("backpropagated gradient contains non-finite values")
        numeric = np.zeros_like(a)
        flat, nflat = a.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            raise GradientCheckError("finite-difference gradient contains non-finite values")
        scale = max(1.0, float(np.max(np.abs(analytic)))) if analytic.size else 1.0
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


class frozen:
    """Context manager that stops gradient accumulation into ``params``."""

    def __init__(self, params: Iterable[Param]):
        self.params = list(params)

    def __enter__(self):
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p in self.params:
            p.requires_grad = True
        return False
