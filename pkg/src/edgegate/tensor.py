"""Dense float64 tensors with taped reverse-mode differentiation.

Every value in the library is a `Tensor` wrapping a read-only numpy
float64 array.  Differentiable operations record an entry on the
currently active `Tape`; `backward` replays the entries in reverse and
accumulates gradients into `.grad` buffers.  A tape is single-use:
replaying it twice raises.

All operations validate their inputs eagerly and check every produced
array for NaN/Inf so numerical failures surface at the op that caused
them instead of corrupting a training run later.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class TensorError(ValueError):
    """Base class for tensor usage errors."""


class ShapeError(TensorError):
    """Operands have incompatible or invalid shapes."""


class NonFiniteError(TensorError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape lifecycle misuse (reuse, nesting, missing tape)."""


def _require_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Records operations for one forward pass.

    Use as a context manager around the forward computation.  Entries
    are replayed exactly once, in reverse recording order, by
    `backward`.  Nesting tapes is not supported.
    """

    def __init__(self) -> None:
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        if self.consumed:
            raise TapeError("tape already consumed; build a new one")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def _record(
        self,
        inputs: Sequence["Tensor"],
        output: "Tensor",
        backward_fn: Callable[[np.ndarray], None],
    ) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is None:
                self._leaves[id(t)] = t
        self._entries.append((output, backward_fn))

    def replay(self, root: "Tensor") -> None:
        if self.consumed:
            raise TapeError("tape already consumed; run a new forward pass")
        self.consumed = True
        if root.grad is None:
            root.grad = np.ones(root.shape, dtype=np.float64)
        for out, backward_fn in reversed(self._entries):
            grad = out.grad
            if grad is None:
                continue
            backward_fn(grad)
            if out._tape is self:
                out.grad = None  # intermediate grads are fully used by now
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros(leaf.shape, dtype=np.float64)
        self._entries.clear()
        self._leaves.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE


class Tensor:
    """Immutable float64 array plus gradient bookkeeping.

    `data` is exposed read-only; parameter updates go through
    `assign_`, which swaps the buffer without touching tape state.
    `grad` is a plain numpy array (or None) owned by the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        _require_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _from_result(cls, arr: np.ndarray, op: str) -> "Tensor":
        _require_finite(arr, op)
        out = cls.__new__(cls)
        # ascontiguousarray would promote 0-d results to 1-d; keep scalars 0-d
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def assign_(self, data) -> None:
        """Replace the underlying buffer (same shape), e.g. an optimizer step."""
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_ shape mismatch: {arr.shape} vs {self.data.shape}")
        _require_finite(arr, "assign_")
        arr.flags.writeable = False
        self.data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, grad: np.ndarray, fresh: bool = False) -> None:
    """Add `grad` into `t.grad`.

    `fresh` promises the array is newly allocated and exclusively ours,
    so it may be adopted without a defensive copy.  Pass-through grads
    (views, shared buffers) must use fresh=False.
    """
    if not t.requires_grad:
        return
    if grad.shape != t.data.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match tensor {t.data.shape}")
    if t.grad is None:
        t.grad = grad if fresh else np.array(grad, dtype=np.float64, copy=True)
    else:
        t.grad += grad


def record(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap an op result and register its backward closure.

    This is the extension hook used by every differentiable operation,
    including composite ones defined outside this module.  The closure
    receives the output gradient and must call `_accumulate` (exported
    as `accumulate_grad`) for each input that requires grad.
    """
    out = Tensor._from_result(out_data, op)
    tape = _ACTIVE_TAPE
    if tape is not None and not tape.consumed and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._record(inputs, out, backward_fn)
    return out


accumulate_grad = _accumulate


def backward(loss: Tensor) -> None:
    """Reverse-replay the tape that produced `loss`, seeding with ones.

    Leaves that participated in the forward pass but received no
    gradient end up with explicit zeros, so optimizers can treat every
    parameter uniformly.
    """
    if loss._tape is None:
        raise TapeError("backward needs a tensor recorded on an active tape")
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    loss._tape.replay(loss)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, rng: Optional[np.random.Generator] = None) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic (strict shape equality; scalars via *_scalar / scale)
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.data.shape} and {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return record("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, -g, fresh=True)

    return record("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * b.data, fresh=True)
        _accumulate(b, g * a.data, fresh=True)

    return record("mul", (a, b), a.data * b.data, bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g / b.data, fresh=True)
        _accumulate(b, -g * a.data / (b.data * b.data), fresh=True)

    return record("div", (a, b), out, bw)


def scale(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * s, fresh=True)

    return record("scale", (a,), a.data * s, bw)


def add_scalar(a: Tensor, s: Scalar) -> Tensor:
    s = float(s)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g)

    return record("add_scalar", (a,), a.data + s, bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # sign(0) == 0: subgradient 0 at the kink

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * sign, fresh=True)

    return record("abs", (a,), np.abs(a.data), bw)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    # negative inputs become NaN and fail the finiteness check in record()

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * (0.5 / out), fresh=True)

    return record("sqrt", (a,), out, bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # derivative 0 at exactly 0

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * mask, fresh=True)

    return record("relu", (a,), np.where(mask, a.data, 0.0), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; both branches share it
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * out * (1.0 - out), fresh=True)

    return record("sigmoid", (a,), out, bw)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus(a: Tensor) -> Tensor:
    out = _softplus(a.data)
    sig = _sigmoid(a.data)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g * sig, fresh=True)

    return record("softplus", (a,), out, bw)


def softmax_channels(a: Tensor) -> Tensor:
    """Softmax over axis 1 (the channel axis), max-subtracted for stability."""
    if a.ndim < 2:
        raise ShapeError(f"softmax_channels needs a channel axis, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        dot = (g * out).sum(axis=1, keepdims=True)
        _accumulate(a, out * (g - dot), fresh=True)

    return record("softmax_channels", (a,), out, bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(sorted(ax % ndim for ax in axes))
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return out


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axs = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axs, keepdims=keepdims)

    def bw(g: np.ndarray) -> None:
        gg = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axs:
                shape[ax] = 1
            gg = g.reshape(shape)
        _accumulate(a, np.broadcast_to(gg, a.shape).copy(), fresh=True)

    return record("reduce_sum", (a,), np.asarray(out), bw)


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axs = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axs:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError("reduce_mean over zero elements")
    return scale(reduce_sum(a, axes=axs, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape).copy(), fresh=True)

    return record("reshape", (a,), out.copy(), bw)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    base = parts[0].shape
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or p.shape[0] != base[0] or p.shape[2:] != base[2:]:
            raise ShapeError("concat_channels requires matching batch and spatial shapes")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def bw(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi].copy(), fresh=True)

    return record("concat_channels", tuple(parts), out, bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim < 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"invalid channel slice [{start}:{stop}] for shape {a.shape}")
    out = a.data[:, start:stop].copy()

    def bw(g: np.ndarray) -> None:
        gg = np.zeros(a.shape, dtype=np.float64)
        gg[:, start:stop] = g
        _accumulate(a, gg, fresh=True)

    return record("slice_channels", (a,), out, bw)


def expand_channel(a: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel tensor across `channels` channels."""
    if a.ndim < 2 or a.shape[1] != 1:
        raise ShapeError(f"expand_channel needs a single-channel tensor, got {a.shape}")
    if channels < 1:
        raise ShapeError("expand_channel needs at least one output channel")
    out = np.repeat(a.data, channels, axis=1)

    def bw(g: np.ndarray) -> None:
        _accumulate(a, g.sum(axis=1, keepdims=True), fresh=True)

    return record("expand_channel", (a,), out, bw)


def group_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    num_groups: int,
    eps: float = 1e-5,
) -> Tensor:
    """Per-sample group normalization over channel groups and all spatial dims."""
    if x.ndim < 3:
        raise ShapeError(f"group_norm expects [N, C, spatial...], got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if num_groups < 1 or c % num_groups != 0:
        raise ShapeError(f"{num_groups} groups do not divide {c} channels")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must have shape [C]")
    spatial = x.shape[2:]
    m = (c // num_groups) * int(np.prod(spatial))
    xg = x.data.reshape(n, num_groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(x.shape)
    params_shape = (1, c) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(params_shape) + beta.data.reshape(params_shape)

    def bw(g: np.ndarray) -> None:
        sum_axes = (0,) + tuple(range(2, x.ndim))
        _accumulate(gamma, (g * xhat).sum(axis=sum_axes), fresh=True)
        _accumulate(beta, g.sum(axis=sum_axes), fresh=True)
        if not x.requires_grad:
            return
        dxhat = (g * gamma.data.reshape(params_shape)).reshape(n, num_groups, m)
        xhg = xhat.reshape(n, num_groups, m)
        dx = (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xhg * (dxhat * xhg).mean(axis=2, keepdims=True)
        ) * inv
        _accumulate(x, dx.reshape(x.shape), fresh=True)

    return record("group_norm", (x, gamma, beta), out, bw)
