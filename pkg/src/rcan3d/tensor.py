"""Dense tensors with reverse-mode differentiation over an explicit tape.

Values are numpy arrays in row-major order, float32 by default with a
float64 mode for finite-difference checking. Gradients are recorded on a
scoped Tape (``with Tape() as tape: ...``); a tensor created while a tape
is active, or with requires_grad set, carries a node id that keys the
gradient map produced by ``backward``.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    BroadcastError,
    DetachedTensor,
    EmptyShape,
    NonFiniteOutput,
    NotScalar,
    PreconditionViolation,
    ShapeMismatch,
)

_local = threading.local()
_node_counter = itertools.count()

# Optional per-op output check; off by default because it touches every voxel.
check_finite = False


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only record of operations, scoped by a with-block.

    Nodes are stored in construction order, which is a topological order
    of the forward graph. ``grads`` maps node ids to gradient buffers
    after a backward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def grad(self, t: "Tensor") -> np.ndarray | None:
        """Gradient buffer for a tensor after backward, or None."""
        if t.node_id is None:
            return None
        return self.grads.get(t.node_id)


class _Node:
    __slots__ = ("kind", "out_id", "in_ids", "backward")

    def __init__(self, kind, out_id, in_ids, backward):
        self.kind = kind
        self.out_id = out_id
        self.in_ids = in_ids
        self.backward = backward


class Tensor:
    """Immutable dense value. Mutation is reserved for optimizer updates."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        tape = active_tape()
        self.tape = tape
        self.node_id = next(_node_counter) if (tape is not None or requires_grad) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def build_tensor(
    shape: Sequence[int],
    data: Iterable[float] | np.ndarray,
    requires_grad: bool = False,
    dtype=np.float32,
) -> Tensor:
    """Construct a tensor owning a row-major copy of ``data``."""
    shape = tuple(int(s) for s in shape)
    if any(s == 0 for s in shape):
        raise EmptyShape(f"zero extent in shape {shape}")
    if any(s < 0 for s in shape):
        raise EmptyShape(f"negative extent in shape {shape}")
    arr = np.asarray(data, dtype=dtype).reshape(-1)
    n = int(np.prod(shape))
    if arr.size != n:
        raise ShapeMismatch(f"shape {shape} implies {n} values, got {arr.size}")
    return Tensor(np.ascontiguousarray(arr.reshape(shape)), requires_grad=requires_grad)


def record_op(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Create the output tensor of an op and register its backward rule.

    ``backward(grad_out) -> tuple`` must return one gradient array (or
    None) per input, aligned positionally.
    """
    if check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteOutput(f"op '{kind}' produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        in_ids = tuple(t.node_id for t in inputs)
        tape.nodes.append(_Node(kind, out.node_id, in_ids, backward))
    return out


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def sigmoid(t: Tensor) -> Tensor:
    """Logistic function, numerically stable, clamped into the open (0, 1)."""
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Saturation would round to exactly 0 or 1; keep the interval open.
    info = np.finfo(x.dtype)
    np.clip(out, info.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)

    def backward(go):
        return (go * out * (1.0 - out),)

    return record_op("sigmoid", out, [t], backward)


def relu(t: Tensor) -> Tensor:
    x = t.data
    out = np.maximum(x, 0)

    def backward(go):
        return (go * (x > 0),)

    return record_op("relu", out, [t], backward)


def negate(t: Tensor) -> Tensor:
    def backward(go):
        return (-go,)

    return record_op("negate", -t.data, [t], backward)


def scale(t: Tensor, alpha: float) -> Tensor:
    a = t.data.dtype.type(alpha)

    def backward(go):
        return (go * a,)

    return record_op("scale", t.data * a, [t], backward)


_UNARY = {"sigmoid": sigmoid, "relu": relu, "negate": negate, "scale": scale}


def map_unary(t: Tensor, fn: str, alpha: float | None = None) -> Tensor:
    """Dispatch over the supported elementwise functions."""
    if fn not in _UNARY:
        raise PreconditionViolation(f"unknown unary fn {fn!r}")
    if fn == "scale":
        if alpha is None:
            raise PreconditionViolation("scale requires alpha")
        return scale(t, alpha)
    return _UNARY[fn](t)


# ---------------------------------------------------------------------------
# Binary ops with channel broadcast
# ---------------------------------------------------------------------------


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "equal"
    if (
        a.data.ndim == 5
        and b.data.ndim == 5
        and b.shape[0] == 1
        and b.shape[2:] == (1, 1, 1)
        and b.shape[1] == a.shape[1]
    ):
        return "channel"
    raise BroadcastError(f"cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to_channel(g: np.ndarray) -> np.ndarray:
    # Sum out the axes that were broadcast (N, D, H, W).
    return g.sum(axis=(0, 2, 3, 4), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    out = a.data + b.data

    def backward(go):
        gb = go if kind == "equal" else _reduce_to_channel(go)
        return (go, gb)

    return record_op("add", out, [a, b], backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(go):
        ga = go * bd
        gb = go * ad
        if kind == "channel":
            gb = _reduce_to_channel(gb)
        return (ga, gb)

    return record_op("mul", out, [a, b], backward)


_BINARY = {"add": add, "mul": mul}


def zip_binary(a: Tensor, b: Tensor, fn: str) -> Tensor:
    if fn not in _BINARY:
        raise PreconditionViolation(f"unknown binary fn {fn!r}")
    return _BINARY[fn](a, b)


def reduce_sum(t: Tensor) -> Tensor:
    """Sum of all elements, as a one-element tensor."""
    total = np.asarray(t.data.sum(), dtype=t.data.dtype).reshape(1)
    shape = t.shape

    def backward(go):
        return (np.full(shape, go.reshape(()), dtype=go.dtype),)

    return record_op("sum", total, [t], backward)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse traversal from a scalar loss; fills and returns the grad map."""
    if loss.data.size != 1:
        raise NotScalar(f"loss has {loss.data.size} elements")
    tape = loss.tape
    if tape is None or loss.node_id is None:
        raise DetachedTensor("loss tensor is not linked to a tape")
    grads: dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.data)
    }
    for node in reversed(tape.nodes):
        go = grads.get(node.out_id)
        if go is None:
            continue
        parts = node.backward(go)
        for in_id, part in zip(node.in_ids, parts):
            if in_id is None or part is None:
                continue
            seen = grads.get(in_id)
            if seen is None:
                grads[in_id] = part.copy() if part is go else part
            else:
                grads[in_id] = seen + part
    tape.grads = grads
    return grads


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``op`` must map the input tensors to a one-element tensor. Inputs must
    be float64; finite differences are unreliable in float32.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise PreconditionViolation(f"eps {eps} outside [1e-7, 1e-3]")
    for t in inputs:
        if t.data.dtype != np.float64:
            raise PreconditionViolation("grad_check requires float64 inputs")

    leaves = [Tensor(t.data.copy(), requires_grad=True) for t in inputs]
    with Tape() as tape:
        out = op(*leaves)
        if out.data.size != 1:
            raise PreconditionViolation("op must reduce to a scalar")
        grads = backward(out)

    def evaluate(arrays) -> float:
        val = op(*[Tensor(a) for a in arrays]).data
        if not np.all(np.isfinite(val)):
            raise NonFiniteOutput("perturbed evaluation is non-finite")
        return float(val.reshape(()))

    worst = 0.0
    base = [leaf.data.copy() for leaf in leaves]
    for idx, leaf in enumerate(leaves):
        analytic = grads.get(leaf.node_id)
        if analytic is None:
            analytic = np.zeros_like(leaf.data)
        flat = base[idx].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            f_plus = evaluate(base)
            flat[j] = keep - eps
            f_minus = evaluate(base)
            flat[j] = keep
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    del tape
    return worst
