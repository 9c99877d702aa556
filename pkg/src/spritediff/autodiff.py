"""Small dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every primitive records a backward rule
on the active tape when gradients are enabled and any input requires grad;
``backward`` replays the tape in reverse. The tape and the grad-enabled flag
are thread-local, so independent sessions/steps can run in parallel as long
as each stays on its own thread.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Shape mismatch, bad arguments, or other contract violations."""


class NonFiniteError(NumericsError):
    """A stored value became NaN or Inf."""


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


class Tape:
    """Ordered record of primitive ops; reverse iteration is reverse topological order."""

    def __init__(self):
        self._entries = []  # (out, inputs, backward_fn)

    def record(self, out, inputs, backward_fn):
        self._entries.append((out, inputs, backward_fn))

    def clear(self):
        self._entries.clear()

    def truncate(self, n: int):
        del self._entries[n:]

    def __len__(self):
        return len(self._entries)

    def replay_backward(self):
        # Entries were appended in execution order (outputs after inputs),
        # so the reversed list is a valid reverse topological order. Interior
        # grads are consumed as we go; only leaves keep their buffers, which
        # is what lets separate backward calls accumulate cleanly.
        for out, inputs, backward_fn in reversed(self._entries):
            if out._grad is None:
                continue
            backward_fn(out._grad)
            out._grad = None


_state = _State()


def active_tape() -> Tape:
    return _state.tape


class no_grad:
    """Context manager that suspends tape recording on this thread."""

    def __enter__(self):
        self._prev = _state.grad_enabled
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class use_tape:
    """Context manager that swaps in a given (or fresh) tape on this thread."""

    def __init__(self, tape: Tape | None = None):
        self.tape = tape if tape is not None else Tape()

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def _tracking(*tensors) -> bool:
    return _state.grad_enabled and any(t.requires_grad for t in tensors)


class Tensor:
    """Dense float64 array with optional gradient buffer.

    Values are checked finite on construction; tensors are treated as
    immutable after construction except for ``update_`` (parameter steps
    between training iterations) and gradient accumulation.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, g):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def zero_grad(self):
        self._grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def update_(self, new_data):
        """In-place parameter update; only legal between training steps."""
        new_data = np.asarray(new_data, dtype=np.float64)
        if new_data.shape != self.data.shape:
            raise NumericsError(f"update_ shape {new_data.shape} != {self.data.shape}")
        if not np.all(np.isfinite(new_data)):
            raise NonFiniteError("update_ with non-finite values")
        self.data[...] = new_data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def mean(self, axis=None):
        return mean(self, axis=axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make_out(arr, *inputs):
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced non-finite values")
    out.data = arr
    out.requires_grad = _tracking(*inputs)
    out._grad = None
    return out


def _broadcast_check(a: Tensor, b: Tensor):
    # Only scalar-with-array and equal-shape broadcasting are supported.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise NumericsError(f"shapes {a.shape} and {b.shape} do not broadcast")


def _reduce_to(g, shape):
    """Collapse a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    # Broadcasting is restricted to scalar-with-array, so a shape mismatch
    # here always means the operand was the scalar side.
    return np.sum(g).reshape(shape)


# -- elementwise binary ----------------------------------------------------


def _binary(a, b, fwd, bwd_a, bwd_b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    with np.errstate(all="ignore"):
        out = _make_out(fwd(a.data, b.data), a, b)
    if out.requires_grad:

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(bwd_a(g, a.data, b.data, out.data), a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(bwd_b(g, a.data, b.data, out.data), b.shape))

        _state.tape.record(out, (a, b), backward)
    return out


def add(a, b):
    return _binary(a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b):
    return _binary(
        a, b, np.divide, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y)
    )


# -- elementwise unary -----------------------------------------------------


def _unary(a, fwd, bwd):
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        out = _make_out(fwd(a.data), a)
    if out.requires_grad:

        def backward(g):
            a.accumulate_grad(bwd(g, a.data, out.data))

        _state.tape.record(out, (a,), backward)
    return out


def exp(a):
    return _unary(a, np.exp, lambda g, x, o: g * o)


def log(a):
    return _unary(a, np.log, lambda g, x, o: g / x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda g, x, o: g * 0.5 / o)


def tanh(a):
    return _unary(a, np.tanh, lambda g, x, o: g * (1.0 - o * o))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda g, x, o: g * (x > 0.0))


def sigmoid(a):
    return _unary(
        a, lambda x: 1.0 / (1.0 + np.exp(-x)), lambda g, x, o: g * o * (1.0 - o)
    )


# -- structural ops --------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"matmul inner dims {a.shape} x {b.shape}")
    out = _make_out(a.data @ b.data, a, b)
    if out.requires_grad:

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        _state.tape.record(out, (a, b), backward)
    return out


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise NumericsError("transpose expects a 2-D tensor")
    out = _make_out(a.data.T.copy(), a)
    if out.requires_grad:

        def backward(g):
            a.accumulate_grad(g.T)

        _state.tape.record(out, (a,), backward)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    out = _make_out(a.data.reshape(shape).copy(), a)
    if out.requires_grad:

        def backward(g):
            a.accumulate_grad(g.reshape(a.shape))

        _state.tape.record(out, (a,), backward)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0):
    tensors = [_as_tensor(t) for t in tensors]
    out = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]

        def backward(g):
            start = 0
            for t, n in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + n)
                    t.accumulate_grad(g[tuple(idx)])
                start += n

        _state.tape.record(out, tuple(tensors), backward)
    return out


def slice_rows(a, start: int, stop: int):
    a = _as_tensor(a)
    out = _make_out(a.data[start:stop].copy(), a)
    if out.requires_grad:

        def backward(g):
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a.accumulate_grad(full)

        _state.tape.record(out, (a,), backward)
    return out


def sum_(a, axis=None):
    a = _as_tensor(a)
    out = _make_out(np.sum(a.data, axis=axis), a)
    if out.requires_grad:

        def backward(g):
            if axis is None:
                a.accumulate_grad(np.full_like(a.data, g))
            else:
                a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

        _state.tape.record(out, (a,), backward)
    return out


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def softmax_rows(a):
    """Row-wise softmax with max-subtraction for numerical stability."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise NumericsError("softmax_rows expects a 2-D tensor")
    shifted = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=1, keepdims=True)
    out = _make_out(y, a)
    if out.requires_grad:

        def backward(g):
            dot = np.sum(g * y, axis=1, keepdims=True)
            a.accumulate_grad(y * (g - dot))

        _state.tape.record(out, (a,), backward)
    return out


# -- convolution -----------------------------------------------------------


def _im2col(x, stride):
    # x: (B, H, W, C) padded by 1 on each spatial side; 3x3 patches.
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    cols = np.empty((b, ho, wo, 9 * c))
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[..., k * c : (k + 1) * c] = xp[
                :, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :
            ]
            k += 1
    return cols, ho, wo


def _col2im(gcols, x_shape, stride):
    b, h, w, c = x_shape
    gp = np.zeros((b, h + 2, w + 2, c))
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    k = 0
    for di in range(3):
        for dj in range(3):
            gp[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += gcols[
                ..., k * c : (k + 1) * c
            ]
            k += 1
    return gp[:, 1:-1, 1:-1, :]


def conv2d(x, kernel, stride: int = 1):
    """3x3 same-padded convolution; x (B,H,W,Cin), kernel (9*Cin, Cout)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4:
        raise NumericsError("conv2d expects x of shape (B,H,W,C)")
    if stride not in (1, 2):
        raise NumericsError("conv2d supports stride 1 or 2 only")
    cin = x.shape[3]
    if kernel.data.ndim != 2 or kernel.shape[0] != 9 * cin:
        raise NumericsError(f"kernel must be (9*{cin}, Cout), got {kernel.shape}")
    cols, ho, wo = _im2col(x.data, stride)
    flat = cols.reshape(-1, 9 * cin)
    y = (flat @ kernel.data).reshape(x.shape[0], ho, wo, kernel.shape[1])
    out = _make_out(y, x, kernel)
    if out.requires_grad:

        def backward(g):
            gmat = g.reshape(-1, kernel.shape[1])
            if kernel.requires_grad:
                kernel.accumulate_grad(flat.T @ gmat)
            if x.requires_grad:
                gcols = (gmat @ kernel.data.T).reshape(cols.shape)
                x.accumulate_grad(_col2im(gcols, x.shape, stride))

        _state.tape.record(out, (x, kernel), backward)
    return out


def upsample_nearest2x(x):
    """Nearest-neighbour 2x spatial upsample of a (B,H,W,C) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise NumericsError("upsample expects (B,H,W,C)")
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    out = _make_out(y, x)
    if out.requires_grad:
        b, h, w, c = x.shape

        def backward(g):
            x.accumulate_grad(g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)))

        _state.tape.record(out, (x,), backward)
    return out


# -- composite helpers -----------------------------------------------------


def tile_rows(row: Tensor, n: int):
    """Differentiable tiling of a (1,d) row to (n,d) via a ones matmul."""
    ones = Tensor(np.ones((n, 1)))
    return matmul(ones, row)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None):
    """x @ w (+ bias broadcast over rows). b has shape (1, d_out)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, tile_rows(b, y.shape[0]))
    return y


def layer_norm(x: Tensor, eps: float = 1e-6):
    """Row-wise layer normalization over the last axis of a 2-D tensor."""
    mu = mean(x, axis=1)
    mu_full = matmul(reshape(mu, (x.shape[0], 1)), Tensor(np.ones((1, x.shape[1]))))
    centered = sub(x, mu_full)
    var = mean(mul(centered, centered), axis=1)
    denom = sqrt(add(var, eps))
    denom_full = matmul(reshape(denom, (x.shape[0], 1)), Tensor(np.ones((1, x.shape[1]))))
    return div(centered, denom_full)


def l2_normalize_rows(x: Tensor, eps: float = 0.0):
    """Scale each row of a 2-D tensor to unit Euclidean norm."""
    sq = sum_(mul(x, x), axis=1)
    if eps == 0.0 and np.any(sq.data <= 0.0):
        raise NumericsError("cannot normalize a zero-norm row")
    norm = sqrt(add(sq, eps)) if eps else sqrt(sq)
    norm_full = matmul(reshape(norm, (x.shape[0], 1)), Tensor(np.ones((1, x.shape[1]))))
    return div(x, norm_full)


# -- backward pass ---------------------------------------------------------


def backward(loss: Tensor):
    """Populate grads of every requires-grad leaf reachable from ``loss``.

    Repeated calls without ``zero_grad`` accumulate. Leaves not connected
    to the loss keep zero gradients.
    """
    if loss.size != 1:
        raise NumericsError("backward requires a scalar loss")
    loss.accumulate_grad(np.ones_like(loss.data))
    _state.tape.replay_backward()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with use_tape():
        loss = f(probe)
        backward(loss)
    analytic = probe.grad.copy()

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(probe).item()
            flat[i] = orig - h
            fm = f(probe).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(np.max(err)) if err.size else 0.0


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


class SGD:
    """Plain gradient descent over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p._grad is not None:
                p.update_(p.data - self.lr * p._grad)

    def zero_grad(self):
        zero_grads(self.params)


class Adam:
    """Adam with the standard bias-corrected moments."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p._grad is None:
                continue
            g = p._grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            p.update_(p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps))

    def zero_grad(self):
        zero_grads(self.params)


def sinusoidal_embedding(t: float, dim: int) -> np.ndarray:
    """Fixed sinusoidal features of a scalar index, dimension ``dim``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb
