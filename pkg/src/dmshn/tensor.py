"""Dense NCHW tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array of 32-bit reals (tests may opt into float64 for
finite-difference shadow runs). Gradients are recorded on an explicit Tape:
each op appends one node in creation order, and backward() replays the nodes
strictly in reverse. A tape is built per forward pass and consumed by its
single backward() call.

Execution modes: "deterministic" (default) pins all BLAS/OpenMP pools to a
single thread so every reduction has a fixed order and repeated runs are
bitwise identical; "fast" restores the libraries' own threading.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DetachedTensor,
    EmptyTensor,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
)

# ---------------------------------------------------------------------------
# Execution mode
# ---------------------------------------------------------------------------

_MODE = "deterministic"
_LIMITER = None


def set_execution_mode(mode: str) -> None:
    """Switch between "deterministic" (single-threaded kernels) and "fast"."""
    global _MODE, _LIMITER
    if mode not in ("deterministic", "fast"):
        raise ValueError(f"unknown execution mode: {mode!r}")
    if mode == _MODE:
        return
    if mode == "deterministic":
        try:
            from threadpoolctl import threadpool_limits

            _LIMITER = threadpool_limits(limits=1)
        except ImportError:  # pragma: no cover
            _LIMITER = None
    else:
        if _LIMITER is not None:
            _LIMITER.restore_original_limits()
            _LIMITER = None
    _MODE = mode


def execution_mode() -> str:
    return _MODE


def _init_mode() -> None:
    # Default is deterministic; apply the thread pin once at import.
    global _LIMITER
    try:
        from threadpoolctl import threadpool_limits

        _LIMITER = threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        _LIMITER = None


_init_mode()


# ---------------------------------------------------------------------------
# Rng
# ---------------------------------------------------------------------------


class Rng:
    """Counter-based deterministic generator (Philox); platform-stable.

    Streams derived from the same seed but different stream ids are
    statistically independent and reproducible everywhere.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float = 0.5) -> bool:
        return bool(self._gen.random() < p)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of ops; topological order equals creation order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        self._prev = None

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False


_ACTIVE_TAPE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense (n, c, h, w) array of reals, immutable after creation.

    `requires_grad` marks leaves the optimizer owns; ops propagate the flag.
    `grad` is populated (as a numpy array) by backward() on leaf tensors.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_index")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeMismatch(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node_index: int | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _record(out_data, inputs, backward_fn, op: str) -> Tensor:
    """Wrap op output; append a tape node when gradients are being traced."""
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.node_index = len(tape.nodes)
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn, op))
    return out


# ---------------------------------------------------------------------------
# Elementwise / structural ops
# ---------------------------------------------------------------------------


def _bias_broadcastable(a_shape, b_shape) -> bool:
    # channel-wise broadcast: b is (1, c, 1, 1) against (n, c, h, w)
    return (
        b_shape[0] == 1
        and b_shape[2] == 1
        and b_shape[3] == 1
        and b_shape[1] == a_shape[1]
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a per-channel (1, c, 1, 1) bias."""
    if a.shape != b.shape and not _bias_broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    out = a.data + b.data
    broadcast = a.shape != b.shape

    def backward(g):
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if broadcast else g
        return g, gb

    return _record(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")

    def backward(g):
        return g, -g

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"div: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return g / bd, -g * ad / (bd * bd)

    return _record(out, (a, b), backward, "div")


def mul_scalar(x: Tensor, s: float) -> Tensor:
    if not np.isfinite(s):
        raise NonFinite(f"mul_scalar: scalar {s} is not finite")
    s = float(s)

    def backward(g):
        return (g * s,)

    return _record(x.data * x.data.dtype.type(s), (x,), backward, "mul_scalar")


def add_scalar(x: Tensor, s: float) -> Tensor:
    if not np.isfinite(s):
        raise NonFinite(f"add_scalar: scalar {s} is not finite")

    def backward(g):
        return (g,)

    return _record(x.data + x.data.dtype.type(s), (x,), backward, "add_scalar")


def neg(x: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _record(-x.data, (x,), backward, "neg")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record(np.where(mask, x.data, x.data.dtype.type(0)), (x,), backward, "relu")


def abs_(x: Tensor) -> Tensor:
    """|x| with subgradient sign(x); 0 at exact ties."""
    sgn = np.sign(x.data)

    def backward(g):
        return (g * sgn,)

    return _record(np.abs(x.data), (x,), backward, "abs")


def pow_scalar(x: Tensor, p: float) -> Tensor:
    """x ** p for non-negative x (used by the multi-scale loss weights)."""
    p = float(p)
    xd = x.data
    out = np.power(xd, p)

    def backward(g):
        # d/dx x^p = p x^(p-1); guard the x == 0 column (treated as 0 slope)
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = p * np.power(xd, p - 1.0)
        gx = np.where(np.isfinite(gx), gx, 0.0).astype(xd.dtype)
        return (g * gx,)

    return _record(out, (x,), backward, "pow_scalar")


def clamp01(x: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient is masked outside the interval."""
    mask = (x.data >= 0) & (x.data <= 1)

    def backward(g):
        return (g * mask,)

    return _record(np.clip(x.data, 0.0, 1.0), (x,), backward, "clamp01")


def reduce_mean(x: Tensor) -> Tensor:
    """Mean over all elements, returned as a (1, 1, 1, 1) scalar tensor."""
    if x.data.size == 0:
        raise EmptyTensor("reduce_mean of empty tensor")
    n = x.data.size
    shape = x.shape
    out = np.asarray(x.data.mean(dtype=x.data.dtype)).reshape(1, 1, 1, 1)

    def backward(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype),)

    return _record(out, (x,), backward, "reduce_mean")


def concat_channels(tensors) -> Tensor:
    """Concatenate along the channel axis; gradient splits back."""
    shapes = [t.shape for t in tensors]
    base = shapes[0]
    for s in shapes[1:]:
        if (s[0], s[2], s[3]) != (base[0], base[2], base[3]):
            raise ShapeMismatch(f"concat_channels: {shapes}")
    splits = np.cumsum([s[1] for s in shapes])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return _record(out, tuple(tensors), backward, "concat_channels")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; returns {leaf tensor: gradient}.

    Also populates `.grad` on every requires_grad leaf that the loss
    depends on. The tape is consumed: a second call raises.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward on tensor of shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise DetachedTensor("loss is not attached to a tape")
    if tape.consumed:
        raise TapeConsumed("backward already ran on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t

    result: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        leaf = holders[key]
        leaf.grad = np.ascontiguousarray(g)
        result[leaf] = leaf.grad
    tape.nodes.clear()
    return result
