"""Reverse-mode automatic differentiation on numpy arrays.

Eager tape design: primitives execute immediately on ``Tensor.data`` and, when
a :class:`Tape` is active and an input requires gradients, append a backward
closure to the tape. Because execution order is recording order, the tape is
topologically sorted by construction; ``Tape.backward`` walks it once in
reverse, accumulating into ``Tensor.grad``.

Every primitive validates its output for NaN/Inf and raises
:class:`NonFiniteError` otherwise. Computation is float64 by default; float32
inputs are promoted per numpy rules (training in float32 is possible but all
numeric contracts are stated for float64).
"""

from __future__ import annotations

from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "ParameterStore",
    "PrngState",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "avg_pool2d",
    "channel_pool",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "concat",
    "reshape",
    "transpose",
    "gather_rows",
    "cross_entropy_with_logits",
    "sgd_step",
    "cosine_lr",
    "glorot_uniform",
]


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN/Inf, or a gradient went non-finite."""


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    return data


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

class Tensor:
    """A numpy array with an optional gradient slot.

    ``grad`` is ``None`` until a backward pass deposits something; a ``None``
    gradient means zero. Data is never mutated by primitives; the optimizer
    rebinds ``data`` wholesale.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level primitives
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` exactly once with the scalar loss.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self._records.append((out, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Run the reverse pass, accumulating into ``.grad`` of every
        requires_grad tensor that participated in producing ``loss``."""
        if loss.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("this tape has already been walked backward")
        if id(loss) not in self._produced:
            raise RuntimeError("loss was not produced under this tape (backward without forward)")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # out-of-place: closures may hand us views of other tensors' grads
    t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    _checked(data, op)
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, "neg", (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.maximum(a.data, 0), "relu", (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # stable in both tails
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _make(out, "exp", (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), "log", (a,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Sliding windows of an already-padded (B, C, Hp, Wp) array.

    Returns (B, C*kh*kw, H*W) for the stride-1 valid convolution.
    """
    B, C, Hp, Wp = x.shape
    H, W = Hp - kh + 1, Wp - kw + 1
    sB, sC, sH, sW = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, shape=(B, C, kh, kw, H, W), strides=(sB, sC, sH, sW, sH, sW), writeable=False)
    return patches.reshape(B, C * kh * kw, H * W)


def conv2d(x, kernel, bias, padding: int) -> Tensor:
    """Stride-1 zero-padded cross-correlation, spatial size preserved.

    x: (B, Cin, H, W); kernel: (Cout, Cin, kh, kw) with odd kh == kw and
    padding == (kh - 1) // 2; bias: (Cout,).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input/kernel, got {x.shape}, {kernel.shape}")
    B, Cin, H, W = x.data.shape
    Cout, Cin_k, kh, kw = kernel.data.shape
    if Cin_k != Cin:
        raise ValueError(f"conv2d: input has {Cin} channels, kernel expects {Cin_k}")
    if kh % 2 == 0 or kw % 2 == 0 or padding != (kh - 1) // 2 or padding != (kw - 1) // 2:
        raise ValueError(f"conv2d: kernel {kh}x{kw} with padding {padding} does not preserve size")
    if bias.data.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({Cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw)                       # (B, Cin*kh*kw, H*W)
    w_mat = kernel.data.reshape(Cout, -1)
    out = np.matmul(w_mat, cols) + bias.data[:, None]
    out = out.reshape(B, Cout, H, W)

    def backward(g):
        g_mat = g.reshape(B, Cout, H * W)
        if kernel.requires_grad:
            gw = np.matmul(g_mat.transpose(1, 0, 2).reshape(Cout, -1),
                           cols.transpose(1, 0, 2).reshape(Cin * kh * kw, -1).T)
            _accumulate(kernel, gw.reshape(kernel.data.shape))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_cols = np.matmul(w_mat.T, g_mat).reshape(B, Cin, kh, kw, H, W)
            gx_pad = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx_pad[:, :, i:i + H, j:j + W] += g_cols[:, :, i, j]
            gx = gx_pad[:, :, padding:padding + H, padding:padding + W] if padding else gx_pad
            _accumulate(x, gx)

    return _make(out, "conv2d", (x, kernel, bias), backward)


def avg_pool2d(x, factor: int = 2) -> Tensor:
    """Non-overlapping spatial mean pooling by an integer factor."""
    x = _as_tensor(x)
    B, C, H, W = x.data.shape
    if H % factor or W % factor:
        raise ValueError(f"avg_pool2d: spatial size {H}x{W} not divisible by {factor}")
    h, w = H // factor, W // factor
    out = x.data.reshape(B, C, h, factor, w, factor).mean(axis=(3, 5))

    def backward(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] / (factor * factor),
                             (B, C, h, factor, w, factor)).reshape(B, C, H, W)
        _accumulate(x, gx)

    return _make(out, "avg_pool2d", (x,), backward)


# ---------------------------------------------------------------------------
# Reductions, shape ops
# ---------------------------------------------------------------------------

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out, "reduce_sum", (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _make(out, "reduce_mean", (a,), backward)


def reduce_max(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; ties route gradient to the lowest index."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)          # first occurrence on ties
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        _accumulate(a, gx)

    return _make(out, "reduce_max", (a,), backward)


def channel_pool(x) -> Tensor:
    """Per-cell mean and max over the channel axis, concatenated.

    (B, C, H, W) -> (B, 2, H, W) with channel 0 the mean, channel 1 the max.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"channel_pool: expected (B,C,H,W), got {x.shape}")
    return concat([reduce_mean(x, axis=1, keepdims=True),
                   reduce_max(x, axis=1, keepdims=True)], axis=1)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - inner))

    return _make(out, "softmax", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + n)
            _accumulate(t, g[tuple(sl)])
            offset += n

    return _make(out, "concat", tensors, backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)

    def backward(g):
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), "transpose", (a,), backward)


def gather_rows(a, indices) -> Tensor:
    """Select rows of a (B, N, C) tensor.

    ``indices`` is either a flat list of k row indices shared across the
    batch, or a (B, k) array with one row list per batch element. Backward
    scatter-adds into the source rows, so repeated indices accumulate.
    """
    a = _as_tensor(a)
    B, N, _ = a.data.shape
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim not in (1, 2):
        raise ValueError(f"gather_rows: indices must be 1-d or 2-d, got ndim={idx.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= N):
        raise IndexError(f"gather_rows: index out of range for {N} rows")
    if idx.ndim == 1:
        idx = np.broadcast_to(idx, (B, idx.shape[0]))
    elif idx.shape[0] != B:
        raise ValueError(f"gather_rows: per-batch indices have {idx.shape[0]} rows, batch is {B}")
    b_idx = np.arange(B)[:, None]
    out = a.data[b_idx, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (b_idx, idx), g)
        _accumulate(a, ga)

    return _make(out, "gather_rows", (a,), backward)


def cross_entropy_with_logits(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels against raw logits (B, K)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.data.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} != ({B},)")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range for {K} classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = (lse - z[np.arange(B), labels]).mean()

    def backward(g):
        p = np.exp(z - zmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(B), labels] -= 1.0
        _accumulate(logits, g * p / B)

    return _make(np.asarray(loss), "cross_entropy_with_logits", (logits,), backward)


# ---------------------------------------------------------------------------
# Parameters, optimizer, RNG
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named trainable tensors with deterministic (sorted-name) iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, copy=True), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in sorted(self._params):
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for _, p in self.items():
            p.grad = None

    def num_scalars(self) -> int:
        return sum(p.size for _, p in self.items())

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Replace parameter data in place; shapes must match."""
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, p in self.items():
            v = np.asarray(values[name], dtype=p.data.dtype)
            if v.shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: shape {v.shape} != {p.data.shape}")
            p.data = v.copy()
            p.grad = None


def sgd_step(params: ParameterStore, lr: float) -> None:
    """value <- value - lr * grad for every parameter, then zero the grads."""
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"sgd_step: non-finite gradient for {name!r}")
        p.data = p.data - lr * p.grad
    params.zero_grads()


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """Half-cosine anneal from lr0 at epoch 0 to 0 at epoch == total_epochs."""
    if total_epochs < 1 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"cosine_lr: epoch {epoch} outside [0, {total_epochs}]")
    return lr0 * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0


class PrngState:
    """Deterministic random source: a 64-bit seed plus a derivation path.

    ``derive`` spawns independent, reproducible streams from (seed, *keys)
    so that e.g. augmentation randomness depends only on (seed, epoch,
    sample id) regardless of evaluation order.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=self.seed, spawn_key=_key)))

    @classmethod
    def derive(cls, seed: int, *keys: int | str) -> "PrngState":
        key = tuple(_mix(k) for k in keys)
        return cls(seed, key)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, loc: float = 0.0, scale: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def _mix(key: int | str) -> int:
    if isinstance(key, int):
        return key & 0xFFFFFFFF
    h = 2166136261
    for ch in key.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def glorot_uniform(rng: PrngState, shape: tuple[int, ...], fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    """Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out))."""
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, shape).astype(dtype)
