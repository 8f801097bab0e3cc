"""
Metrics, certificates and loss-landscape diagnostics.

Accuracy is argmax agreement with the value token (ties go to the lowest
index). The membership attack scores each fact by its negative loss and
reports the ROC AUC of members against never-trained holdout facts.

The diagnostics work on any ``Objective``: a callable mapping a dict of
arrays to ``(loss, gradients)``. ``forget_objective`` adapts the fact model
to that shape, so the same code checks closed-form quadratics in tests and
the unlearned network in experiments.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, FrozenSet, Iterable, Mapping, Sequence, Tuple

import numpy as np
from sklearn.metrics import roc_auc_score

from .datagen import EmptySplitError, FactBatch
from .factmodel import ParamSet, bind, example_losses, forward_logits
from .logger import get_logger
from .quantsim import QuantScope, QuantSpec, quantize, scope_names

logger = get_logger(__name__)

Objective = Callable[[Mapping[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]

PRECISIONS: Tuple[str, ...] = ("full", "int8", "int4")


# ---------------------------------------------------------------------- #
# metrics
# ---------------------------------------------------------------------- #
def accuracy(params: ParamSet, batch: FactBatch) -> float:
    if len(batch) == 0:
        raise EmptySplitError("accuracy over an empty split")
    pred = np.argmax(forward_logits(params, batch), axis=1)
    return float(np.mean(pred == batch.values))


def quantized_accuracy(params: ParamSet, spec: QuantSpec, batch: FactBatch) -> float:
    return accuracy(quantize(params, spec), batch)


def auc_from_scores(members: Sequence[float], nonmembers: Sequence[float]) -> float:
    """
    ROC AUC of ``members`` scoring above ``nonmembers``; ties count one half.

    Whichever orientation is at most 0.5 is computed directly and the other
    is its complement, so swapping the arguments sums to exactly 1.
    """
    pos = np.asarray(members, dtype=np.float64)
    neg = np.asarray(nonmembers, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptySplitError("membership scores need both populations")
    forward = _raw_auc(pos, neg)
    if forward <= 0.5:
        return forward
    return 1.0 - _raw_auc(neg, pos)


def _raw_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    labels = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    return float(roc_auc_score(labels, np.concatenate([pos, neg])))


def mia_auc(params: ParamSet, members: FactBatch, nonmembers: FactBatch) -> float:
    if len(members) == 0 or len(nonmembers) == 0:
        raise EmptySplitError("membership attack needs non-empty splits")
    return auc_from_scores(-example_losses(params, members), -example_losses(params, nonmembers))


# ---------------------------------------------------------------------- #
# objectives over named arrays
# ---------------------------------------------------------------------- #
def forget_objective(params: ParamSet, batch: FactBatch, names: Iterable[str]) -> Objective:
    """Mean loss on ``batch`` as a function of the entries ``names``; the rest stay fixed."""
    wanted = list(names)

    def objective(values: Mapping[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
        graph = bind(params.replace({n: values[n] for n in wanted}))
        loss = graph.loss(batch)
        grads = graph.tape.backward(loss)
        return loss.item(), {n: grads[n] for n in wanted}

    return objective


def _norm(arrays: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays.values()))


def _diff(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {n: np.asarray(a[n]) - np.asarray(b[n]) for n in a}


def smoothness_estimate(
    objective: Objective,
    start: Mapping[str, np.ndarray],
    end: Mapping[str, np.ndarray],
    resolution: int = 32,
) -> float:
    """
    Largest gradient difference quotient between adjacent points of
    ``resolution`` evenly spaced samples on the segment [start, end].
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    step = _diff(end, start)
    if _norm(step) == 0.0:
        return 0.0
    best = 0.0
    prev_point = None
    prev_grad = None
    for i in range(resolution):
        frac = i / (resolution - 1)
        point = {n: np.asarray(start[n]) + frac * step[n] for n in start}
        _, grad = objective(point)
        if prev_point is not None:
            dist = _norm(_diff(point, prev_point))
            if dist > 0:
                best = max(best, _norm(_diff(grad, prev_grad)) / dist)
        prev_point, prev_grad = point, grad
    return best


def gradient_norm(objective: Objective, point: Mapping[str, np.ndarray]) -> float:
    _, grad = objective(point)
    return _norm(grad)


@dataclass(frozen=True, slots=True)
class SharpnessReport:
    """
    Loss-landscape diagnostics around an unlearned checkpoint.

    Fields that a given check does not compute stay ``None``; ``M`` is
    reported as measured and may be negative.
    """

    kappa: float
    delta: float | None = None
    L_hat: float | None = None
    M: float | None = None
    rho: float | None = None
    bound_lhs: float | None = None
    bound_rhs: float | None = None
    bound_satisfied: bool | None = None
    prop1_lhs: float | None = None
    prop1_rhs: float | None = None
    prop1_holds: bool | None = None
    q_bound: float | None = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def recovery_bound(
    objective: Objective,
    theta_star: Mapping[str, np.ndarray],
    theta_q: Mapping[str, np.ndarray],
    resolution: int = 32,
    tolerance: float = 1e-9,
) -> SharpnessReport:
    """Check ``|L(θ_q) - L(θ*)| <= κδ + (L̂/2)δ²`` with κ = ‖∇L(θ*)‖."""
    loss_star, grad_star = objective(theta_star)
    loss_q, _ = objective(theta_q)
    kappa = _norm(grad_star)
    delta = _norm(_diff(theta_q, theta_star))
    l_hat = smoothness_estimate(objective, theta_star, theta_q, resolution)
    lhs = abs(loss_q - loss_star)
    rhs = kappa * delta + 0.5 * l_hat * delta * delta
    ok = lhs <= rhs + tolerance
    if not ok:
        logger.warning("recovery bound violated: lhs=%.6g rhs=%.6g", lhs, rhs)
    return SharpnessReport(
        kappa=kappa, delta=delta, L_hat=l_hat, bound_lhs=lhs, bound_rhs=rhs, bound_satisfied=ok
    )


def prop1(
    objective: Objective,
    theta0: Mapping[str, np.ndarray],
    theta_star: Mapping[str, np.ndarray],
    resolution: int = 32,
    *,
    delta: float | None = None,
    tolerance: float = 1e-9,
) -> SharpnessReport:
    """
    Check ``κ >= M/ρ - L̂·ρ`` along the unlearning segment [θ₀, θ*].

    With ``delta`` given, also report the implied lower bound on the forget
    loss change under a perturbation of that size,
    ``M/ρ·δ - L̂·ρ·δ - (L̂/2)·δ²``. The right-hand side is undefined at ρ = 0.
    """
    loss0, _ = objective(theta0)
    loss_star, grad_star = objective(theta_star)
    kappa = _norm(grad_star)
    m = loss_star - loss0
    rho = _norm(_diff(theta_star, theta0))
    if rho == 0.0:
        return SharpnessReport(kappa=kappa, M=m, rho=0.0, prop1_lhs=kappa, delta=delta)
    l_hat = smoothness_estimate(objective, theta0, theta_star, resolution)
    rhs = m / rho - l_hat * rho
    holds = kappa >= rhs - tolerance
    if not holds:
        logger.warning("sharpness lower bound violated: kappa=%.6g rhs=%.6g", kappa, rhs)
    q_bound = None
    if delta is not None:
        q_bound = m / rho * delta - l_hat * rho * delta - 0.5 * l_hat * delta * delta
    return SharpnessReport(
        kappa=kappa,
        delta=delta,
        L_hat=l_hat,
        M=m,
        rho=rho,
        prop1_lhs=kappa,
        prop1_rhs=rhs,
        prop1_holds=holds,
        q_bound=q_bound,
    )


# model-level wrappers -------------------------------------------------- #
def sharpness(params: ParamSet, forget: FactBatch) -> float:
    """κ: norm of the full forget-set gradient over the trainable entries."""
    if len(forget) == 0:
        raise EmptySplitError("sharpness over an empty split")
    names = params.trainable_names()
    return gradient_norm(forget_objective(params, forget, names), params.arrays(names))


def recovery_bound_check(
    theta_star: ParamSet, spec: QuantSpec, forget: FactBatch, resolution: int = 32
) -> SharpnessReport:
    theta_q = quantize(theta_star, spec)
    names = list(dict.fromkeys([*theta_star.trainable_names(), *scope_names(theta_star, spec.scope)]))
    objective = forget_objective(theta_star, forget, names)
    return recovery_bound(objective, theta_star.arrays(names), theta_q.arrays(names), resolution)


def prop1_check(
    theta0: ParamSet,
    theta_star: ParamSet,
    forget: FactBatch,
    spec: QuantSpec | None = None,
    resolution: int = 32,
) -> SharpnessReport:
    """Sharpness lower-bound check over the entries unlearning was allowed to move."""
    names = theta_star.trainable_names()
    delta = None
    if spec is not None and spec.scope is not QuantScope.NONE:
        q = quantize(theta_star, spec)
        delta = _norm(_diff(q.arrays(names), theta_star.arrays(names)))
    objective = forget_objective(theta_star, forget, names)
    return prop1(objective, theta0.arrays(names), theta_star.arrays(names), resolution, delta=delta)


# ---------------------------------------------------------------------- #
# certificates and predicates
# ---------------------------------------------------------------------- #
def _normalize(fa_by_precision: Mapping[str, float]) -> Dict[str, float]:
    return {str(k).lower(): float(v) for k, v in fa_by_precision.items()}


def certificate(
    fa_by_precision: Mapping[str, float],
    epsilon: float,
    precisions: Sequence[str] = PRECISIONS,
) -> bool:
    """Durable at ``epsilon`` iff FA ≤ ε at every precision in ``precisions``."""
    fa = _normalize(fa_by_precision)
    missing = [p for p in precisions if p.lower() not in fa]
    if missing:
        raise ValueError(f"no forget accuracy for precision(s) {missing}")
    return all(fa[p.lower()] <= epsilon for p in precisions)


def minimal_epsilon(
    fa_by_precision: Mapping[str, float], precisions: Sequence[str] = PRECISIONS
) -> float:
    """Smallest ε at which ``certificate`` holds."""
    fa = _normalize(fa_by_precision)
    missing = [p for p in precisions if p.lower() not in fa]
    if missing:
        raise ValueError(f"no forget accuracy for precision(s) {missing}")
    return max(fa[p.lower()] for p in precisions)


@dataclass(frozen=True, slots=True)
class TrilemmaResult:
    satisfied: bool
    failed: FrozenSet[str]


def trilemma(
    fa: float,
    ra: float,
    q_int4: float,
    thresholds: Tuple[float, float, float] = (0.05, 0.50, 0.05),
) -> TrilemmaResult:
    """FA ≤ t₀, RA ≥ t₁ and Q-INT4 ≤ t₂ all at once; ``failed`` names the misses."""
    fa_max, ra_min, q_max = thresholds
    failed = set()
    if not fa <= fa_max:
        failed.add("fa")
    if not ra >= ra_min:
        failed.add("ra")
    if not q_int4 <= q_max:
        failed.add("q_int4")
    return TrilemmaResult(not failed, frozenset(failed))


# ---------------------------------------------------------------------- #
# reports
# ---------------------------------------------------------------------- #
@dataclass(frozen=True, slots=True)
class EvalReport:
    fa: float
    ra: float
    q_int8: float
    q_int4: float
    ra_int4: float
    mia_auc: float
    kappa: float
    cert: bool
    recovery_ratio: float | None = None
    runtime_seconds: float | None = None

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "EvalReport":
        return cls(**{f.name: raw.get(f.name) for f in fields(cls)})


def recovery_ratio(fa: float, q_int4: float) -> float | None:
    return q_int4 / fa if fa > 0 else None


METRIC_FIELDS: Tuple[str, ...] = ("fa", "ra", "q_int8", "q_int4", "ra_int4", "mia_auc", "kappa")


@dataclass(frozen=True, slots=True)
class AggregateReport:
    n: int
    means: Dict[str, float]
    stds: Dict[str, float]
    cert_rate: float
    certified: int


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if np.all(arr == arr[0]):
        return float(arr[0]), 0.0
    return float(np.mean(arr)), float(np.std(arr, ddof=1))


def seed_aggregate(reports: Sequence[EvalReport]) -> AggregateReport:
    """Per-field mean and sample std (n-1) plus the certified fraction."""
    if not reports:
        raise ValueError("seed_aggregate needs at least one report")
    means: Dict[str, float] = {}
    stds: Dict[str, float] = {}
    for name in METRIC_FIELDS:
        means[name], stds[name] = _mean_std([getattr(r, name) for r in reports])
    certified = sum(1 for r in reports if r.cert)
    return AggregateReport(len(reports), means, stds, certified / len(reports), certified)
