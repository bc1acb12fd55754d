"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the CyclingNet layer stack needs are provided. Images are
laid out row-major as (batch, height, width, channels). Forward passes run in
32-bit floats; every op preserves the dtype of its inputs, so the same code
runs in 64-bit for gradient checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float32

ArrayLike = Union[np.ndarray, float, int, Sequence]

_ACTIVE_TAPES: list["Tape"] = []
# op name -> factor applied to that op's input gradients (test hook only)
_GRADIENT_PERTURBATIONS: dict[str, float] = {}


class Tensor:
    """An n-dimensional float array that can take part in a recorded computation."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.floating)) and np.issubdtype(data.dtype, np.floating):
            # 0-d arithmetic yields numpy scalars; keep their precision too
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named model weight. Non-trainable parameters never receive gradients."""

    def __init__(self, data: ArrayLike, name: str = "", trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class _Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records differentiable operations executed while the tape is active.

    Use as a context manager; any op whose inputs require gradients is
    appended in execution order and replayed in reverse by :meth:`backward`.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.visited: list[str] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        produced = {id(node.out) for node in self.nodes}
        self.visited = []
        for node in reversed(self.nodes):
            self.visited.append(node.op)
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            factor = _GRADIENT_PERTURBATIONS.get(node.op)
            for tensor, gi in zip(node.inputs, in_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                if factor is not None:
                    gi = gi * factor
                key = id(tensor)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = tensor
        for key, g in grads.items():
            tensor = leaves.get(key)
            if tensor is None:
                continue
            g = g.astype(tensor.dtype, copy=False).reshape(tensor.shape)
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``.grad`` of every leaf recorded on ``tape``."""
    tape.backward(loss)


@contextlib.contextmanager
def perturbed_gradient(op: str, factor: float) -> Iterator[None]:
    """Scale the input gradients of ``op`` while active. Harness sanity checks only."""
    _GRADIENT_PERTURBATIONS[op] = factor
    try:
        yield
    finally:
        _GRADIENT_PERTURBATIONS.pop(op, None)


def _record(op: str, out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(op, out, tuple(inputs), fn))
    return out


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# initialisation


def he_normal_init(shape: Sequence[int], fan_in: int, seed: Union[int, np.random.Generator] = 0,
                   dtype=DEFAULT_DTYPE) -> Tensor:
    """Zero-mean normal samples with standard deviation sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)).astype(dtype))


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    b = _lift(b, a)
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    b = _lift(b, a)
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    b = _lift(b, a)
    out = Tensor(a.data / b.data)
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", Tensor(-a.data), (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def _back(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        a2 = a.data if a.ndim > 1 else a.data[None, :]
        g2 = g if a.ndim > 1 else g[None, :]
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), _back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype))

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), _back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record("transpose", out, (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor(np.array(a.data[index]))

    def _back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _record("getitem", out, (a,), _back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    n = len(tensors)
    return _record("stack", out, tensors,
                   lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    return _record("exp", out, (a,), lambda g: (g * out.data,))


def log(a: Tensor) -> Tensor:
    return _record("log", Tensor(np.log(a.data)), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient passes only where the input lies inside [lo, hi]."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0).astype(a.dtype, copy=False))
    return _record("relu", out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(expit(a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out.data * (1 - out.data),))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    return _record("tanh", out, (a,), lambda g: (g * (1 - out.data * out.data),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activate(a: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    return _record("softmax", out, (a,),
                   lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def dropout(a: Tensor, rate: float, training: bool,
            rng: Union[int, np.random.Generator, None] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so the expectation is kept."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = ((rng.random(a.shape) >= rate) / (1.0 - rate)).astype(a.dtype)
    out = Tensor(a.data * mask)
    return _record("dropout", out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights + bias`` over the last axis."""
    if x.shape[-1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weights {weights.shape}, "
                         f"bias {bias.shape}")
    return add(matmul(x, weights), bias)


def conv_output_size(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of an NHWC batch with (kh, kw, C, F) kernels.

    A 3-d (H, W, C) input is treated as a batch of one.
    """
    if x.ndim == 3:
        y = conv2d(reshape(x, (1,) + x.shape), kernels, bias, stride)
        return reshape(y, y.shape[1:])
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    batch, height, width, channels = x.shape
    kh, kw, kc, filters = kernels.shape
    if kc != channels:
        raise ValueError(f"kernel expects {kc} channels, input has {channels}")
    if kh > height or kw > width:
        raise ValueError(f"kernel {kh}x{kw} larger than input {height}x{width}")
    if bias.shape != (filters,):
        raise ValueError(f"bias shape {bias.shape} does not match {filters} filters")
    out_h = conv_output_size(height, kh, stride)
    out_w = conv_output_size(width, kw, stride)
    xd, kd = x.data, kernels.data

    def window(i, j):
        return (slice(None), slice(i, i + stride * (out_h - 1) + 1, stride),
                slice(j, j + stride * (out_w - 1) + 1, stride), slice(None))

    out = np.empty((batch, out_h, out_w, filters), dtype=np.result_type(xd, kd))
    out[...] = bias.data
    for i in range(kh):
        for j in range(kw):
            out += xd[window(i, j)] @ kd[i, j]

    def _back(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        g2 = g.reshape(-1, filters)
        for i in range(kh):
            for j in range(kw):
                idx = window(i, j)
                gk[i, j] = xd[idx].reshape(-1, channels).T @ g2
                gx[idx] += g @ kd[i, j].T
        return gx, gk, g.sum(axis=(0, 1, 2))

    return _record("conv2d", Tensor(out), (x, kernels, bias), _back)


def max_pool2d(x: Tensor, pool: int = 2) -> Tensor:
    """Non-overlapping pool x pool maxima; trailing odd rows/columns are dropped."""
    if x.ndim == 3:
        y = max_pool2d(reshape(x, (1,) + x.shape), pool)
        return reshape(y, y.shape[1:])
    batch, height, width, channels = x.shape
    if height < pool or width < pool:
        raise ValueError(f"input {height}x{width} smaller than pool {pool}")
    out_h, out_w = height // pool, width // pool
    cropped = x.data[:, :out_h * pool, :out_w * pool, :]
    windows = (cropped.reshape(batch, out_h, pool, out_w, pool, channels)
               .transpose(0, 1, 3, 5, 2, 4)
               .reshape(batch, out_h, out_w, channels, pool * pool))
    arg = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, arg, axis=-1)[..., 0]

    def _back(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gw = (gw.reshape(batch, out_h, out_w, channels, pool, pool)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(batch, out_h * pool, out_w * pool, channels))
        gx = np.zeros_like(x.data)
        gx[:, :out_h * pool, :out_w * pool, :] = gw
        return (gx,)

    return _record("max_pool2d", Tensor(out), (x,), _back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, moving_mean: Tensor, moving_var: Tensor,
               training: bool, momentum: float = 0.99, epsilon: float = 1e-3) -> Tensor:
    """Per-channel (last axis) normalisation.

    In training mode batch statistics are used and the moving statistics are
    updated in place as ``m = momentum * m + (1 - momentum) * batch_stat``.
    """
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError(f"batch_norm expects {channels} channels, got gamma {gamma.shape}")
    axes = tuple(range(x.ndim - 1))
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = ((xd - mu) ** 2).mean(axis=axes)
        moving_mean.data[...] = momentum * moving_mean.data + (1 - momentum) * mu
        moving_var.data[...] = momentum * moving_var.data + (1 - momentum) * var
    else:
        mu, var = moving_mean.data, moving_var.data
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = ((xd - mu) * inv_std).astype(xd.dtype, copy=False)
    out = Tensor((gamma.data * xhat + beta.data).astype(xd.dtype, copy=False))
    count = xd.size // channels

    def _back(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_xhat = g * gamma.data
        if training:
            gx = (inv_std / count) * (count * g_xhat - g_xhat.sum(axis=axes)
                                      - xhat * (g_xhat * xhat).sum(axis=axes))
        else:
            gx = g_xhat * inv_std
        return gx.astype(xd.dtype, copy=False), g_gamma, g_beta

    return _record("batch_norm", out, (x, gamma, beta), _back)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int
    worst: Optional[tuple] = None
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:g}, {self.checked} entries)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               step: float = 1e-4, seed: int = 0, max_checks: Optional[int] = None,
               name: str = "op", floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``fn(*inputs)`` with central finite differences.

    The scalar probed is ``sum(fn(*inputs) * R)`` for a fixed random ``R``.
    ``inputs`` are mutated in place during probing and restored afterwards,
    so ``fn`` may also close over them (e.g. model parameters). With
    ``max_checks`` only that many randomly chosen entries per input are probed.
    Run it on float64 data; 32-bit differences are too noisy for 1e-4.
    Gradients smaller than ``floor`` are compared in absolute terms.
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    probe_out = fn(*inputs)
    projection = rng.standard_normal(probe_out.shape).astype(probe_out.dtype)

    with Tape() as tape:
        out = fn(*inputs)
        loss = tsum(mul(out, Tensor(projection)))
    tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)
                for t in inputs]

    def probe() -> float:
        return float((fn(*inputs).data * projection).sum())

    worst, worst_err, checked, errors = None, 0.0, 0, []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            positions = rng.choice(flat.size, size=max_checks, replace=False)
        numeric = np.empty(len(positions))
        for n, p in enumerate(positions):
            original = flat[p]
            flat[p] = original + step
            up = probe()
            flat[p] = original - step
            down = probe()
            flat[p] = original
            numeric[n] = (up - down) / (2 * step)
        err = relative_error(analytic[k].reshape(-1)[positions], numeric, floor)
        errors.append(err)
        checked += len(positions)
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (k, int(positions[err.argmax()]))
    for t, flag in zip(inputs, saved_flags):
        t.requires_grad = flag
        if isinstance(t, Parameter):
            t.zero_grad()
        else:
            t.grad = None
    return GradCheckReport(name, worst_err, tolerance, checked, worst, errors)
