"""
Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation in creation order. Because an operation
can only consume tensors created before it, creation order is already a
topological order, and ``backward`` replays the tape in reverse. Gradient
accumulation therefore happens in a fixed order and repeated runs are
bit-identical.

The primitive set is exactly what the fact model and the diagnostics need:
matmul, add, scale, GELU (tanh form), embedding lookup, concat,
softmax cross-entropy, KL divergence to a fixed reference, softplus, mean,
L2 norm, and the straight-through estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError, VocabularyError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

Backward = Callable[[np.ndarray], Tuple[np.ndarray | None, ...]]
LossFn = Callable[["Tape", Mapping[str, "Tensor"]], "Tensor"]


class OpKind(str, Enum):
    PARAM = "param"
    CONST = "const"
    MATMUL = "matmul"
    ADD = "add"
    SCALE = "scale"
    GELU = "gelu"
    EMBED = "embed"
    CONCAT = "concat"
    CROSS_ENTROPY = "cross_entropy"
    KL_DIV = "kl_div"
    SOFTPLUS = "softplus"
    MEAN = "mean"
    L2_NORM = "l2_norm"
    STE = "ste"


def _frozen(values: np.ndarray) -> np.ndarray:
    values.flags.writeable = False
    return values


@dataclass(frozen=True, slots=True)
class TapeNode:
    kind: OpKind
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward: Backward | None
    name: str | None = None


class Tensor:
    """Read-only view of one tape entry."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def kind(self) -> OpKind:
        return self.tape.nodes[self.index].kind

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind.value}, shape={self.shape})"


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Tape:
    """
    Records operations for a single forward/backward pass.

    Not thread-safe; use one tape per pass. Tensors created on a tape are
    immutable, so independent tapes may share input arrays freely.
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._params: Dict[str, int] = {}

    # ------------------------------------------------------------------ #
    # recording
    # ------------------------------------------------------------------ #
    def _record(
        self,
        kind: OpKind,
        inputs: Sequence[Tensor],
        value: np.ndarray,
        backward: Backward | None,
        name: str | None = None,
    ) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise ValueError(f"{kind.value}: operand belongs to another tape")
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(kind.value if name is None else f"{kind.value}[{name}]")
        node = TapeNode(kind, tuple(t.index for t in inputs), _frozen(value), backward, name)
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def param(self, name: str, values: np.ndarray) -> Tensor:
        """Register a differentiable leaf under ``name``."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = self._record(OpKind.PARAM, (), np.array(values, dtype=np.float64), None, name)
        self._params[name] = t.index
        return t

    def constant(self, values: np.ndarray | float) -> Tensor:
        return self._record(OpKind.CONST, (), np.array(values, dtype=np.float64), None)

    # ------------------------------------------------------------------ #
    # primitives
    # ------------------------------------------------------------------ #
    def matmul(self, a: Tensor, b: Tensor, *, transpose_b: bool = False) -> Tensor:
        """``a @ b`` (or ``a @ b.T``) for 2-D operands."""
        av, bv = a.value, b.value
        bm = bv.T if transpose_b else bv
        if av.ndim != 2 or bm.ndim != 2 or av.shape[1] != bm.shape[0]:
            raise ShapeMismatchError("matmul", av.shape, bm.shape)

        def backward(g: np.ndarray):
            ga = g @ bm.T
            gb = g.T @ av if transpose_b else av.T @ g
            return ga, gb

        return self._record(OpKind.MATMUL, (a, b), av @ bm, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatchError("add", a.shape, b.shape)
        return self._record(OpKind.ADD, (a, b), a.value + b.value, lambda g: (g, g))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._record(OpKind.SCALE, (a,), a.value * c, lambda g: (g * c,))

    def gelu(self, a: Tensor) -> Tensor:
        x = a.value
        inner = _GELU_C * (x + _GELU_K * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g: np.ndarray):
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_K * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

        return self._record(OpKind.GELU, (a,), out, backward)

    def embedding(self, table: Tensor, indices: np.ndarray) -> Tensor:
        """Gather rows of ``table`` (V×D) for integer ``indices`` (B,)."""
        idx = np.asarray(indices, dtype=np.int64)
        vocab = table.shape[0]
        bad = (idx < 0) | (idx >= vocab)
        if bad.any():
            raise VocabularyError("embedding", int(idx[bad][0]), vocab)

        def backward(g: np.ndarray):
            grad = np.zeros_like(table.value)
            np.add.at(grad, idx, g)
            return (grad,)

        return self._record(OpKind.EMBED, (table,), table.value[idx], backward)

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        """Join two B×· matrices along columns."""
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeMismatchError("concat", a.shape, b.shape)
        split = a.shape[1]
        return self._record(
            OpKind.CONCAT,
            (a, b),
            np.concatenate([a.value, b.value], axis=1),
            lambda g: (g[:, :split], g[:, split:]),
        )

    def cross_entropy(self, logits: Tensor, targets: np.ndarray) -> Tensor:
        """Per-example softmax cross-entropy (B,) against integer targets."""
        z = logits.value
        t = np.asarray(targets, dtype=np.int64)
        if z.ndim != 2 or t.shape != (z.shape[0],):
            raise ShapeMismatchError("cross_entropy", z.shape, t.shape)
        bad = (t < 0) | (t >= z.shape[1])
        if bad.any():
            raise VocabularyError("target", int(t[bad][0]), z.shape[1])
        rows = np.arange(z.shape[0])
        losses = -log_softmax(z)[rows, t]

        def backward(g: np.ndarray):
            p = _softmax(z)
            p[rows, t] -= 1.0
            return (p * g[:, None],)

        return self._record(OpKind.CROSS_ENTROPY, (logits,), losses, backward)

    def kl_div(self, logits: Tensor, ref_log_probs: np.ndarray) -> Tensor:
        """Per-example KL(softmax(logits) ‖ exp(ref_log_probs))."""
        z = logits.value
        ref = np.asarray(ref_log_probs, dtype=np.float64)
        if z.shape != ref.shape:
            raise ShapeMismatchError("kl_div", z.shape, ref.shape)
        logp = log_softmax(z)
        p = np.exp(logp)
        kl = np.sum(p * (logp - ref), axis=1)

        def backward(g: np.ndarray):
            return (p * ((logp - ref) - kl[:, None]) * g[:, None],)

        return self._record(OpKind.KL_DIV, (logits,), kl, backward)

    def softplus(self, a: Tensor) -> Tensor:
        x = a.value

        def backward(g: np.ndarray):
            return (g * 0.5 * (1.0 + np.tanh(0.5 * x)),)

        return self._record(OpKind.SOFTPLUS, (a,), np.logaddexp(0.0, x), backward)

    def mean(self, a: Tensor) -> Tensor:
        n = a.value.size
        if n == 0:
            raise ShapeMismatchError("mean", a.shape, (1,))
        shape = a.shape
        return self._record(
            OpKind.MEAN, (a,), np.mean(a.value), lambda g: (np.full(shape, float(g) / n),)
        )

    def l2_norm(self, a: Tensor) -> Tensor:
        x = a.value
        norm = float(np.sqrt(np.sum(x * x)))

        def backward(g: np.ndarray):
            if norm == 0.0:
                return (np.zeros_like(x),)
            return (x * (float(g) / norm),)

        return self._record(OpKind.L2_NORM, (a,), np.array(norm), backward)

    def straight_through(self, a: Tensor, forward_values: np.ndarray) -> Tensor:
        """
        Emit ``forward_values`` in the forward pass, identity in the backward.

        ``forward_values`` is typically the quantized image of ``a``.
        """
        q = np.asarray(forward_values, dtype=np.float64)
        if q.shape != a.shape:
            raise ShapeMismatchError("straight_through", a.shape, q.shape)
        return self._record(OpKind.STE, (a,), q.copy(), lambda g: (g,))

    # ------------------------------------------------------------------ #
    # reverse pass
    # ------------------------------------------------------------------ #
    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        """
        Gradients of a scalar ``loss`` for every registered parameter.

        Parameters the loss does not reach map to zero arrays.
        """
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeMismatchError("backward", loss.shape, ())

        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for i in range(loss.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for src, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                prev = grads.get(src)
                grads[src] = gi.copy() if prev is None else prev + gi

        out: Dict[str, np.ndarray] = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            if g is None:
                g = np.zeros_like(self.nodes[idx].value)
            elif not np.all(np.isfinite(g)):
                raise NonFiniteError(f"gradient[{name}]")
            out[name] = g
        return out


# ---------------------------------------------------------------------- #
# helpers over loss functions
# ---------------------------------------------------------------------- #
def value_and_grad(
    loss_fn: LossFn, params: Mapping[str, np.ndarray]
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` at ``params`` and return (loss, gradients)."""
    tape = Tape()
    tensors = {name: tape.param(name, v) for name, v in params.items()}
    loss = loss_fn(tape, tensors)
    return loss.item(), tape.backward(loss)


def loss_value(loss_fn: LossFn, params: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    tensors = {name: tape.param(name, v) for name, v in params.items()}
    return loss_fn(tape, tensors).item()


@dataclass(frozen=True, slots=True)
class GradCheckReport:
    """
    Result of comparing backward against central finite differences.

    ``max_relative_error`` covers coordinates whose gradient scale is at
    least ``near_zero``; smaller coordinates are judged by absolute error.
    """

    max_relative_error: float
    max_absolute_error: float
    coordinates: int
    passed: bool


def finite_diff_check(
    loss_fn: LossFn,
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-6,
    *,
    max_coords: int = 256,
    seed: int = 0,
    atol: float = 1e-9,
    near_zero: float = 1e-6,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences on sampled coordinates.

    A coordinate passes when ``|a - n| <= atol + tolerance * max(|a|, |n|)``.
    At most ``max_coords`` coordinates are drawn (seeded) from all parameters.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    _, analytic = value_and_grad(loss_fn, base)

    coords = [(name, k) for name in base for k in range(base[name].size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in picked]

    max_rel = 0.0
    max_abs = 0.0
    passed = True
    for name, k in coords:
        original = base[name].reshape(-1)[k]
        shifted = dict(base)
        arr = base[name].copy()
        flat = arr.reshape(-1)
        flat[k] = original + step
        shifted[name] = arr
        up = loss_value(loss_fn, shifted)
        flat[k] = original - step
        down = loss_value(loss_fn, shifted)
        numeric = (up - down) / (2.0 * step)

        a = float(analytic[name].reshape(-1)[k])
        err = abs(a - numeric)
        scale = max(abs(a), abs(numeric))
        max_abs = max(max_abs, err)
        if scale >= near_zero:
            max_rel = max(max_rel, err / scale)
        if err > atol + tolerance * scale:
            passed = False

    return GradCheckReport(max_rel, max_abs, len(coords), passed)
