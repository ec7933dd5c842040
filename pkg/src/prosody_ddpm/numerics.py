"""Dense float64 arrays with tape-based reverse-mode differentiation.

Everything the networks in this package need runs through the small
primitive set defined here: elementwise arithmetic, matmul, a non-causal
dilated 1-d convolution, the usual activations, layer normalization,
dropout, embedding lookup, and full reductions.  Each primitive computes
its forward value with numpy and, when a :class:`Tape` is active on the
current thread, records enough state to play the step backwards.

Conventions:

* all values are float64 and C-contiguous; tensors are immutable once
  created (the underlying buffer is marked read-only),
* sequences are ``(length, channels)`` arrays and batches add a leading
  axis, ``(batch, length, channels)``,
* any NaN or Inf produced by a forward or backward step is a hard error.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operands do not conform for a primitive."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NonFiniteError(ArithmeticError):
    """Raised when a primitive produces NaN or Inf, naming the primitive."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"{op}: non-finite values in {where} pass")
        self.op = op
        self.where = where


def _checked(op: str, arr: np.ndarray, where: str = "forward") -> np.ndarray:
    # Fast path: a single sum is non-finite whenever any entry is NaN/Inf.
    # The sum of finite values can itself overflow, so confirm with the
    # exact elementwise check before raising.
    with np.errstate(over="ignore", invalid="ignore"):
        total = arr.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(op, where)
    return arr


class Tensor:
    """Immutable float64 array participating in tape-recorded computation."""

    __slots__ = ("data",)

    def __init__(self, data, *, _checked_op: str | None = "tensor"):
        # order="C" preserves 0-d shapes, unlike ascontiguousarray.
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not arr.flags.writeable or arr.base is not None:
            arr = arr.copy()
        if _checked_op is not None:
            _checked(_checked_op, arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):  # pragma: no cover - guard
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def tensor(data) -> Tensor:
    """Wrap ``data`` (array-like) as a constant/leaf tensor."""
    return Tensor(data)


def zeros(shape: Sequence[int] | int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), _checked_op=None)


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

# A record is (op_name, output_tensor, backward_fn); backward_fn maps the
# gradient at the output to (input_tensor, gradient_contribution) pairs.
_BackwardFn = Callable[[np.ndarray], Iterable[tuple["Tensor", np.ndarray]]]

_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of primitives for one reverse pass.

    A tape is confined to a single thread and a single forward build;
    entering the context activates recording, leaving deactivates it.
    Records are appended in execution order, so iterating them in reverse
    visits the graph in reverse topological order.
    """

    def __init__(self):
        self.records: list[tuple[str, Tensor, _BackwardFn]] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None

    def _record(self, op: str, out: Tensor, backward_fn: _BackwardFn) -> None:
        self.records.append((op, out, backward_fn))


def _emit(op: str, out_data: np.ndarray, backward_fn: _BackwardFn) -> Tensor:
    out = Tensor(_checked(op, out_data), _checked_op=None)
    tape = _active_tape()
    if tape is not None:
        tape._record(op, out, backward_fn)
    return out


class Gradients:
    """Gradient map keyed by tensor identity.

    Tensors that did not contribute to the loss get zero gradients of the
    matching shape.
    """

    def __init__(self, accum: dict[int, tuple[Tensor, np.ndarray]]):
        self._accum = accum

    def wrt(self, t: Tensor) -> np.ndarray:
        entry = self._accum.get(id(t))
        if entry is None:
            return np.zeros_like(t.data)
        return entry[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._accum


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns gradients for every tensor reachable from the loss; a NaN/Inf
    gradient aborts with the primitive that produced it.
    """
    if loss.data.shape != ():
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    accum: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones((), dtype=np.float64))
    }
    for op, out, backward_fn in reversed(tape.records):
        entry = accum.get(id(out))
        if entry is None:
            continue
        dout = entry[1]
        for inp, grad in backward_fn(dout):
            _checked(op, grad, "backward")
            prev = accum.get(id(inp))
            if prev is None:
                accum[id(inp)] = (inp, grad)
            else:
                accum[id(inp)] = (inp, prev[1] + grad)
    return Gradients(accum)


# --------------------------------------------------------------------------
# Elementwise primitives
# --------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a: Tensor, b: Tensor | float):
    if isinstance(b, Tensor):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(op, f"shapes {a.shape} and {b.shape} do not broadcast") from None
    return b


def add(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise ``a + b`` with numpy broadcasting; ``b`` may be a constant."""
    _binary("add", a, b)
    if isinstance(b, Tensor):
        out = a.data + b.data

        def back(dout):
            return [(a, _unbroadcast(dout, a.shape)), (b, _unbroadcast(dout, b.shape))]

    else:
        out = a.data + float(b)

        def back(dout):
            return [(a, dout)]

    return _emit("add", out, back)


def sub(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise ``a - b``; ``b`` may be a constant."""
    _binary("sub", a, b)
    if isinstance(b, Tensor):
        out = a.data - b.data

        def back(dout):
            return [(a, _unbroadcast(dout, a.shape)), (b, _unbroadcast(-dout, b.shape))]

    else:
        out = a.data - float(b)

        def back(dout):
            return [(a, dout)]

    return _emit("sub", out, back)


def mul(a: Tensor, b: Tensor | float) -> Tensor:
    """Elementwise ``a * b``; ``b`` may be a constant."""
    _binary("mul", a, b)
    if isinstance(b, Tensor):
        out = a.data * b.data

        def back(dout):
            return [
                (a, _unbroadcast(dout * b.data, a.shape)),
                (b, _unbroadcast(dout * a.data, b.shape)),
            ]

    else:
        k = float(b)
        out = a.data * k

        def back(dout):
            return [(a, dout * k)]

    return _emit("mul", out, back)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(dout):
        return [(x, dout * (1.0 - y * y))]

    return _emit("tanh", y, back)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for any float64 input.
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def back(dout):
        return [(x, dout * y * (1.0 - y))]

    return _emit("sigmoid", y, back)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def back(dout):
        return [(x, dout * (x.data > 0.0))]

    return _emit("relu", y, back)


def silu(x: Tensor) -> Tensor:
    """Smooth gated linear unit, ``x * sigmoid(x)``."""
    return mul(x, sigmoid(x))


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape ``(..., n)`` and 2-d ``w`` of shape ``(n, m)``."""
    if w.data.ndim != 2:
        raise ShapeError("matmul", f"weight must be 2-d, got shape {w.shape}")
    if x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError("matmul", f"inner dims differ: {x.shape} @ {w.shape}")
    out = x.data @ w.data

    def back(dout):
        dx = dout @ w.data.T
        dw = x.data.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, w.shape[1])
        return [(x, dx), (w, dw)]

    return _emit("matmul", out, back)


def conv1d_dilated(x: Tensor, w: Tensor, b: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Non-causal dilated 1-d convolution preserving sequence length.

    ``x`` has shape ``(..., length, in_channels)``, ``w`` has shape
    ``(kernel, in_channels, out_channels)`` with odd kernel, and the input
    is zero-padded symmetrically by ``dilation * (kernel // 2)`` on both
    sides so the output length equals the input length.
    """
    if dilation < 1:
        raise ShapeError("conv1d_dilated", f"dilation must be >= 1, got {dilation}")
    if w.data.ndim != 3:
        raise ShapeError("conv1d_dilated", f"weight must be (kernel, in, out), got {w.shape}")
    kernel, c_in, c_out = w.shape
    if kernel % 2 != 1:
        raise ShapeError("conv1d_dilated", f"kernel must be odd for symmetric padding, got {kernel}")
    if x.data.ndim < 2 or x.shape[-1] != c_in:
        raise ShapeError("conv1d_dilated", f"input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError("conv1d_dilated", f"bias {b.shape} does not match out channels {c_out}")

    length = x.shape[-2]
    pad = dilation * (kernel // 2)
    widths = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.zeros(x.shape[:-1] + (c_out,), dtype=np.float64)
    for k in range(kernel):
        out += xp[..., k * dilation : k * dilation + length, :] @ w.data[k]
    if b is not None:
        out = out + b.data

    def back(dout):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        dflat = dout.reshape(-1, c_out)
        for k in range(kernel):
            sl = xp[..., k * dilation : k * dilation + length, :]
            dw[k] = sl.reshape(-1, c_in).T @ dflat
            dxp[..., k * dilation : k * dilation + length, :] += dout @ w.data[k].T
        dx = dxp[..., pad : pad + length, :]
        grads = [(x, dx), (w, dw)]
        if b is not None:
            grads.append((b, dout.reshape(-1, c_out).sum(axis=0)))
        return grads

    return _emit("conv1d_dilated", out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError("layer_norm", f"gain/bias must be ({c},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(dout):
        dxhat = dout * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dg = (dout * xhat).reshape(-1, c).sum(axis=0)
        db = dout.reshape(-1, c).sum(axis=0)
        return [(x, dx), (gain, dg), (bias, db)]

    return _emit("layer_norm", out, back)


def dropout(x: Tensor, rate: float, rng: "Rng", training: bool) -> Tensor:
    """Inverted dropout; identity (and unrecorded) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError("dropout", f"rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(x.shape) < keep) / keep

    def back(dout):
        return [(x, dout * mask)]

    return _emit("dropout", x.data * mask, back)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (vocab, dim) at integer ``ids``."""
    idx = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("embed_lookup", f"table must be 2-d, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            "embed_lookup",
            f"ids outside [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}",
        )
    out = table.data[idx]

    def back(dout):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, dout)
        return [(table, dt)]

    return _emit("embed_lookup", out, back)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - primitive named after the reduction
    out = np.asarray(x.data.sum())

    def back(dout):
        return [(x, np.broadcast_to(dout, x.shape).copy())]

    return _emit("sum", out, back)


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean())

    def back(dout):
        return [(x, np.broadcast_to(dout / n, x.shape).copy())]

    return _emit("mean", out, back)


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------


class Rng:
    """Seedable PCG64 stream with a recordable (name, seed, state) identity.

    PCG64 carries 128-bit state; identical seeds give identical draw
    sequences on the same build.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int | tuple[int, ...]):
        self.seed = seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def normal(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape: Sequence[int] | int = ()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, p: np.ndarray) -> int:
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


def gaussian(rng: Rng, shape: Sequence[int] | int = ()) -> Tensor:
    """I.i.d. standard normal samples as a leaf tensor."""
    return Tensor(rng.normal(shape), _checked_op=None)


# --------------------------------------------------------------------------
# Parameter initialization helpers
# --------------------------------------------------------------------------


def uniform_fanin(rng: Rng, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Centered uniform init with bound ``1/sqrt(fan_in)``."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(shape) * 2.0 * bound - bound, _checked_op=None)
