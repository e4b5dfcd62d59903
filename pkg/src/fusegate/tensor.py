"""Minimal dense tensor with reverse-mode autodiff over a recorded tape.

Everything is float64. A ``Tensor`` wraps a read-only numpy array; it takes
part in gradient computation only when it is attached to (or derived from a
tensor attached to) a ``Tape``. The tape is a flat list of primitive ops in
execution order; ``backward`` walks it once in reverse, accumulating grads
into every leaf that requires them.

Design notes:
  * define-by-run: the gating policy makes graph topology input-dependent,
    so the graph is rebuilt every forward pass;
  * no broadcasting beyond python scalars -- shaped broadcasts are their own
    primitives (channel_scale, frame_delay, ...) with explicit backwards;
  * tensors never mutate; parameter updates swap the underlying buffer via
    ``assign_`` between steps.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


class Tensor:
    """N-dimensional float64 array, optionally recorded on a tape.

    A tensor created without a tape never accumulates gradient. Leaves are
    attached with ``Tape.watch``; everything derived from a watched leaf is
    recorded automatically while the tape is active.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying."""
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        t.requires_grad = False
        t.grad = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def assign_(self, new_data: np.ndarray) -> None:
        """Swap the underlying buffer (optimizer use only, between tapes)."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(
                f"assign_ shape mismatch: {arr.shape} vs {self.data.shape}")
        self.data = _freeze(arr.copy())

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; scalar operands are python numbers only
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Op:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one differentiable pass.

    Confined to a single thread. ``backward`` may run once per recording;
    call ``reset`` to clear ops and gradients before the next pass. Watched
    leaves stay attached across resets.
    """

    def __init__(self):
        self._ops: list[_Op] = []
        self._leaves: list[Tensor] = []
        self._used = False
        self.active = True

    def watch(self, tensor: Tensor) -> Tensor:
        if tensor.tape is not None and tensor.tape is not self:
            raise ContractError("tensor is already watched by another tape")
        tensor.tape = self
        tensor.requires_grad = True
        if tensor not in self._leaves:
            self._leaves.append(tensor)
        return tensor

    def leaf(self, data) -> Tensor:
        return self.watch(Tensor(data))

    def record(self, name, inputs, output, backward) -> None:
        output.tape = self
        output.requires_grad = True
        self._ops.append(_Op(name, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.tape is not self:
            raise ContractError("loss is detached from this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._used:
            raise ContractError("backward already ran on this tape; reset() first")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self._ops):
            if op.output.grad is None:
                continue  # not an ancestor of the loss
            grads = op.backward(op.output.grad)
            for inp, g in zip(op.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
                else:
                    inp.grad = inp.grad + g

    def reset(self) -> None:
        for op in self._ops:
            op.output.grad = None
            op.output.tape = None
        for leaf in self._leaves:
            leaf.grad = None
        self._ops.clear()
        self._used = False

    class _Paused:
        def __init__(self, tape):
            self.tape = tape

        def __enter__(self):
            self.tape.active = False

        def __exit__(self, *exc):
            self.tape.active = True

    def paused(self):
        """Context manager: compute forward values without recording."""
        return self._Paused(self)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss recorded on a tape."""
    if loss.tape is None:
        raise ContractError("loss is not attached to any tape (detached graph)")
    loss.tape.backward(loss)


def _find_tape(inputs) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is not None and t.tape.active:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractError("operands come from two different tapes")
    return tape


# Verification hook: scales the backward of a named op so finite-difference
# checks can prove they detect a wrong gradient. Never set outside tests/CLI.
_BACKWARD_FAULTS: dict[str, float] = {}


class inject_backward_fault:
    """Context manager deliberately corrupting one op's recorded backward."""

    def __init__(self, name: str, scale: float = 1.01):
        self.name = name
        self.scale = scale

    def __enter__(self):
        _BACKWARD_FAULTS[self.name] = self.scale
        return self

    def __exit__(self, *exc):
        _BACKWARD_FAULTS.pop(self.name, None)


def make_op(name: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    """Create the output tensor of a primitive, recording it when required.

    ``backward_fn(grad_out) -> [grad_per_input|None]`` must not mutate any
    forward buffer. This is the single extension point every layer uses.
    """
    out = Tensor._wrap(out_data)
    tape = _find_tape(inputs)
    if tape is not None and any(t.requires_grad for t in inputs):
        if name in _BACKWARD_FAULTS:
            scale = _BACKWARD_FAULTS[name]
            inner = backward_fn

            def backward_fn(g, _inner=inner, _s=scale):
                return [None if gi is None else gi * _s for gi in _inner(g)]

        tape.record(name, inputs, out, backward_fn)
    return out


def _as_pair(a, b, name):
    if not isinstance(a, Tensor):
        raise ContractError(f"{name}: first operand must be a Tensor")
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
        return a, b, None
    return a, None, float(b)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    a, bt, scalar = _as_pair(a, b, "add")
    if bt is None:
        return make_op("add", (a,), a.data + scalar, lambda g: [g])
    return make_op("add", (a, bt), a.data + bt.data, lambda g: [g, g])


def sub(a: Tensor, b) -> Tensor:
    a, bt, scalar = _as_pair(a, b, "sub")
    if bt is None:
        return make_op("sub", (a,), a.data - scalar, lambda g: [g])
    return make_op("sub", (a, bt), a.data - bt.data, lambda g: [g, -g])


def mul(a: Tensor, b) -> Tensor:
    a, bt, scalar = _as_pair(a, b, "mul")
    if bt is None:
        return make_op("mul", (a,), a.data * scalar, lambda g: [g * scalar])
    ad, bd = a.data, bt.data
    return make_op("mul", (a, bt), ad * bd, lambda g: [g * bd, g * ad])


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", (a,), np.where(mask, a.data, 0.0), lambda g: [g * mask])


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", (a,), out, lambda g: [g * out])


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op("log", (a,), np.log(ad), lambda g: [g / ad])


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by op name; unary kinds reject a second operand."""
    unary = {"relu": relu, "exp": exp, "log": log}
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in unary:
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return unary[kind](a)
    if kind in binary:
        return binary[kind](a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return [g @ bd.T, ad.T @ g]

    return make_op("matmul", (a, b), ad @ bd, bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None) or over the given axis/axes."""
    shape = a.shape
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, shape).copy()]
        axes = axis if isinstance(axis, tuple) else (axis,)
        g_exp = np.expand_dims(g, axes)
        return [np.broadcast_to(g_exp, shape).copy()]

    return make_op("sum", (a,), np.asarray(out), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op("reshape", (a,), a.data.reshape(shape),
                   lambda g: [g.reshape(old)])


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    na = a.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [na], axis=axis)
        return [ga, gb]

    return make_op("concat", (a, b), np.concatenate([a.data, b.data], axis=axis), bwd)


def take_last(a: Tensor, index: int) -> Tensor:
    """Select one slice along the last axis: out = a[..., index]."""
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape)
        ga[..., index] = g
        return [ga]

    return make_op("take_last", (a,), a.data[..., index].copy(), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return [s * (g - dot)]

    return make_op("softmax", (a,), s, bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bwd(g):
        return [g - s * g.sum(axis=axis, keepdims=True)]

    return make_op("log_softmax", (a,), out, bwd)


# ---------------------------------------------------------------------------
# frame-structured primitives (leading axis folded as batch*T)


def _frame_view(a: Tensor, frames: int):
    lead = a.shape[0]
    if lead % frames != 0:
        raise ContractError(
            f"leading dim {lead} is not divisible by frame count {frames}")
    return a.data.reshape((lead // frames, frames) + a.shape[1:])


def frame_delay(a: Tensor, frames: int) -> Tensor:
    """Shift every sample one frame later: out[t] = a[t-1], zeros at t=0.

    Works on a folded (batch*frames, ...) tensor.
    """
    x = _frame_view(a, frames)
    out = np.zeros_like(x)
    out[:, 1:] = x[:, :-1]

    def bwd(g):
        gv = g.reshape(x.shape)
        ga = np.zeros_like(gv)
        ga[:, :-1] = gv[:, 1:]
        return [ga.reshape(a.shape)]

    return make_op("frame_delay", (a,), out.reshape(a.shape), bwd)


def frame_advance(a: Tensor, frames: int) -> Tensor:
    """Shift one frame earlier: out[t] = a[t+1], zeros at t = frames-1."""
    x = _frame_view(a, frames)
    out = np.zeros_like(x)
    out[:, :-1] = x[:, 1:]

    def bwd(g):
        gv = g.reshape(x.shape)
        ga = np.zeros_like(gv)
        ga[:, 1:] = gv[:, :-1]
        return [ga.reshape(a.shape)]

    return make_op("frame_advance", (a,), out.reshape(a.shape), bwd)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply x[n, c, ...] by per-(sample, channel) factors s[n, c]."""
    if s.shape != x.shape[:2]:
        raise DimensionError(
            f"channel_scale: factors {s.shape} do not match leading dims of {x.shape}")
    extra = (1,) * (x.data.ndim - 2)
    se = s.data.reshape(s.shape + extra)
    xd = x.data

    def bwd(g):
        gx = g * se
        gs = (g * xd).sum(axis=tuple(range(2, xd.ndim)))
        return [gx, gs]

    return make_op("channel_scale", (x, s), xd * se, bwd)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the discrete one-hot values; route gradient to the relaxation."""
    if hard.shape != soft.shape:
        raise DimensionError(
            f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return make_op("straight_through", (soft,), np.asarray(hard, dtype=np.float64),
                   lambda g: [g])
