"""
Memorization and unlearning procedures.

``pretrain`` produces the memorized checkpoint θ₀. ``run_method`` then
applies one of the baselines or the quantization-aware objective:

  GA        -L_f
  GradDiff  -L_f + λ·L_r
  NPO       (2/β)·mean softplus(β·(log p_θ - log p_ref)) on forget targets + λ·L_r
  SCRUB     -L_f + w·KL(p_θ ‖ p_θ₀) on retain batches
  SalUn     GradDiff on the top fraction of weights by |∇L_f(θ₀)|
  TaskArith θ₀ - η·(θ_ft - θ₀), θ_ft fine-tuned on the forget split
  SAF       -L_f - α(t)·L_f(Q_STE(θ)) + λ·L_r

Each step draws one forget batch and one retain batch from independent
seeded samplers. A term with a zero coefficient is left out of the graph,
so degenerate configurations replay their simpler counterpart bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum
from typing import Callable, Dict, Iterator, Mapping, Tuple

import numpy as np

from .autodiff import Tape, Tensor, log_softmax
from .datagen import FactBatch, FactDataset, batch_sampler
from .errors import ConfigError, DivergenceError, NonFiniteError
from .factmodel import Graph, ParamSet, Regime, bind, forward_logits, example_losses
from .logger import get_logger
from .optim import AdamW, OptimConfig
from .quantsim import QuantScope, QuantSpec, ste_quantize

logger = get_logger(__name__)

StepHook = Callable[[int, ParamSet], None]


class Method(str, Enum):
    GA = "ga"
    GRADDIFF = "graddiff"
    NPO = "npo"
    SCRUB = "scrub"
    SALUN = "salun"
    TASKARITH = "taskarith"
    SAF = "saf"


# knobs that only make sense for one method
_METHOD_KNOBS: Dict[Method, frozenset] = {
    Method.GA: frozenset(),
    Method.GRADDIFF: frozenset({"lam"}),
    Method.NPO: frozenset({"lam", "npo_beta"}),
    Method.SCRUB: frozenset({"scrub_kl_weight"}),
    Method.SALUN: frozenset({"lam", "salun_fraction"}),
    Method.TASKARITH: frozenset({"ta_eta", "ta_ft_steps"}),
    Method.SAF: frozenset(
        {"lam", "alpha_max", "warmup_steps", "warmup", "ste_scope", "ste_bits"}
    ),
}
SPECIFIC_KNOBS = frozenset().union(*_METHOD_KNOBS.values())


# ---------------------------------------------------------------------- #
# configuration
# ---------------------------------------------------------------------- #
@dataclass(frozen=True, slots=True)
class PretrainConfig:
    """Recipe for the memorization phase."""

    epochs: int = 150
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    train_adapters: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("pretrain.epochs", "must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("pretrain.batch_size", "must be positive")
        if self.lr <= 0:
            raise ConfigError("pretrain.lr", "must be positive")


def lambda_rule(alpha_max: float) -> float:
    """Retain weight paired with a quantization weight: max(1, α + 1)."""
    return max(1.0, alpha_max + 1.0)


def alpha_schedule(t: int, t_w: int, total: int, alpha_max: float) -> float:
    """
    Quantization-term weight at step ``t`` (1-based).

    Zero through the warmup, then a linear ramp that reaches ``alpha_max``
    halfway through the remaining steps. Steps outside [1, total] are
    clamped into it.
    """
    t = min(max(t, 1), total)
    if t <= t_w:
        return 0.0
    return min(alpha_max, 2.0 * alpha_max * (t - t_w) / (total - t_w))


@dataclass(frozen=True, slots=True)
class SafConfig:
    """Knobs of the quantization-aware forgetting objective."""

    alpha_max: float = 3.0
    lam: float | None = None
    steps: int = 300
    warmup_steps: int = 100
    warmup: bool = True
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 42
    ste_scope: QuantScope = QuantScope.ALL_TRAINABLE
    ste_bits: int = 4

    def __post_init__(self) -> None:
        if self.alpha_max < 0:
            raise ConfigError("alpha_max", "must be non-negative")
        if self.warmup and not 0 <= self.warmup_steps < self.steps:
            raise ConfigError("warmup_steps", "must satisfy 0 <= t_w < T")
        scope = QuantScope(self.ste_scope)
        if scope not in (QuantScope.ADAPTERS_ONLY, QuantScope.ALL_TRAINABLE):
            raise ConfigError("ste_scope", "must be adapters-only or all-trainable")
        object.__setattr__(self, "ste_scope", scope)
        if self.lam is None:
            object.__setattr__(self, "lam", lambda_rule(self.alpha_max))

    @property
    def t_w(self) -> int:
        return self.warmup_steps if self.warmup else 0

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(bits=self.ste_bits, scope=self.ste_scope)

    def alpha(self, t: int) -> float:
        return alpha_schedule(t, self.t_w, self.steps, self.alpha_max)


@dataclass(frozen=True, slots=True)
class MethodConfig:
    """
    One unlearning method with its knobs.

    ``label`` names the arm in reports (defaults to the method name); shared
    optimizer knobs apply to every method.
    """

    method: Method
    label: str = ""
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 4
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    regime: Regime = Regime.ADAPTERS
    lam: float | None = None
    npo_beta: float = 0.1
    salun_fraction: float = 0.5
    scrub_kl_weight: float = 1.0
    ta_eta: float = 1.0
    ta_ft_steps: int = 100
    alpha_max: float = 3.0
    warmup_steps: int = 100
    warmup: bool = True
    ste_scope: QuantScope = QuantScope.ALL_TRAINABLE
    ste_bits: int = 4

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "method", Method(self.method))
            object.__setattr__(self, "regime", Regime(self.regime))
            object.__setattr__(self, "ste_scope", QuantScope(self.ste_scope))
        except ValueError as exc:
            raise ConfigError("method", str(exc)) from None
        if not self.label:
            object.__setattr__(self, "label", self.method.value)
        if self.regime is Regime.FULL:
            raise ConfigError("regime", "unlearning runs in the adapters or all regime")
        if self.steps < 0:
            raise ConfigError("steps", "must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size", "must be positive")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam", "must be non-negative")
        if self.npo_beta <= 0:
            raise ConfigError("npo_beta", "must be positive")
        if not 0.0 < self.salun_fraction <= 1.0:
            raise ConfigError("salun_fraction", "must lie in (0, 1]")
        if self.scrub_kl_weight < 0:
            raise ConfigError("scrub_kl_weight", "must be non-negative")
        if self.ta_ft_steps < 0:
            raise ConfigError("ta_ft_steps", "must be non-negative")
        if self.method is Method.SAF:
            self.saf_config(0)

    @property
    def retain_weight(self) -> float:
        if self.method is Method.SAF:
            return self.saf_config(0).lam
        if self.method is Method.GA:
            return 0.0
        if self.method is Method.SCRUB:
            return self.scrub_kl_weight
        return 1.0 if self.lam is None else self.lam

    def optim(self, total_steps: int | None = None) -> OptimConfig:
        return OptimConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            total_steps=self.steps if total_steps is None else total_steps,
        )

    def saf_config(self, seed: int) -> SafConfig:
        try:
            return SafConfig(
                alpha_max=self.alpha_max,
                lam=self.lam,
                steps=self.steps,
                warmup_steps=self.warmup_steps,
                warmup=self.warmup,
                lr=self.lr,
                batch_size=self.batch_size,
                seed=seed,
                ste_scope=self.ste_scope,
                ste_bits=self.ste_bits,
            )
        except ConfigError as exc:
            raise exc.under("saf") from None

    def to_dict(self) -> Dict[str, object]:
        """Shared knobs plus the knobs of this method only."""
        raw = asdict(self)
        own = _METHOD_KNOBS[self.method]
        out = {k: v for k, v in raw.items() if k not in SPECIFIC_KNOBS or k in own}
        out["method"] = self.method.value
        out["regime"] = self.regime.value
        if "ste_scope" in out:
            out["ste_scope"] = self.ste_scope.value
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "MethodConfig":
        if "method" not in raw:
            raise ConfigError("method", "missing")
        try:
            method = Method(raw["method"])
        except ValueError:
            raise ConfigError("method", f"unknown method {raw['method']!r}") from None
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        foreign = (set(raw) & SPECIFIC_KNOBS) - _METHOD_KNOBS[method]
        if foreign:
            raise ConfigError(sorted(foreign)[0], f"not a knob of {method.value}")
        return cls(**{**raw, "method": method})


# ---------------------------------------------------------------------- #
# helpers
# ---------------------------------------------------------------------- #
def _spawn_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def _samplers(dataset: FactDataset, batch_size: int, seed: int) -> Tuple[Iterator, Iterator | None]:
    forget_seed, retain_seed = _spawn_seeds(seed, 2)
    forget = batch_sampler(dataset.forget, batch_size, forget_seed)
    retain = batch_sampler(dataset.retain, batch_size, retain_seed) if dataset.retain.size else None
    return forget, retain


def _enter_regime(params: ParamSet, regime: Regime) -> ParamSet:
    if regime is Regime.ADAPTERS and not params.has_adapters:
        raise ConfigError("regime", "adapter regime needs a model with adapters")
    return params.with_regime(regime)


def _check_loss(value: float, phase: str, t: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(phase, t, f"loss={value}")


def forget_objective(
    graph: Graph,
    forget: FactBatch,
    retain: FactBatch | None,
    lam: float,
    *,
    alpha: float = 0.0,
    spec: QuantSpec | None = None,
) -> Tensor:
    """
    ``-L_f - alpha·L_f(Q_STE(θ)) + lam·L_r``.

    Terms with a zero coefficient are omitted from the graph.
    """
    t = graph.tape
    loss = t.scale(graph.loss(forget), -1.0)
    if alpha > 0.0:
        if spec is None:
            raise ValueError("quantization term needs a QuantSpec")
        lq = ste_quantize(graph, spec).loss(forget)
        loss = t.add(loss, t.scale(lq, -alpha))
    if lam > 0.0:
        if retain is None:
            raise ValueError("retain term needs a retain batch")
        loss = t.add(loss, t.scale(graph.loss(retain), lam))
    return loss


def _backward(build: Callable[[Graph], Tensor], params: ParamSet, phase: str, t: int):
    graph = bind(params, Tape())
    try:
        loss = build(graph)
        value = loss.item()
        _check_loss(value, phase, t)
        grads = graph.tape.backward(loss)
    except NonFiniteError as exc:
        raise DivergenceError(phase, t, str(exc)) from exc
    return value, grads


# ---------------------------------------------------------------------- #
# pretraining
# ---------------------------------------------------------------------- #
def pretrain(
    params: ParamSet,
    dataset: FactDataset,
    cfg: PretrainConfig,
    seed: int,
) -> ParamSet:
    """
    Memorize every trained fact (forget ∪ retain).

    Trains embeddings and base weights; adapters join only when
    ``cfg.train_adapters`` is set. Returns θ₀ in the pretraining regime.
    """
    trained = dataset.trained
    per_epoch = math.ceil(trained.size / cfg.batch_size) if trained.size else 0
    total = cfg.epochs * per_epoch
    regime = Regime.ALL if cfg.train_adapters else Regime.FULL
    params = params.with_regime(regime)
    if total == 0:
        return params.with_regime(Regime.FULL)

    opt = AdamW(
        OptimConfig(
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            clip_norm=cfg.clip_norm,
            total_steps=total,
        ),
        params,
    )
    sampler = batch_sampler(trained, cfg.batch_size, _spawn_seeds(seed, 1)[0])
    logger.info("pretraining %d steps (%d epochs)", total, cfg.epochs)
    for t in range(1, total + 1):
        batch = dataset.batch(next(sampler))
        value, grads = _backward(lambda g: g.loss(batch), params, "pretrain", t)
        params = opt.step(params, grads)
        if t % per_epoch == 0:
            logger.debug("pretrain epoch %d loss=%.6f", t // per_epoch, value)
    return params.with_regime(Regime.FULL)


# ---------------------------------------------------------------------- #
# unlearning
# ---------------------------------------------------------------------- #
def saf_step(
    params: ParamSet,
    forget: FactBatch,
    retain: FactBatch | None,
    alpha: float,
    lam: float,
    spec: QuantSpec,
    opt: AdamW,
    *,
    t: int = 0,
) -> ParamSet:
    """One optimizer step on the quantization-aware objective; the STE pass is skipped at α = 0."""
    _, grads = _backward(
        lambda g: forget_objective(g, forget, retain, lam, alpha=alpha, spec=spec),
        params,
        "saf",
        t,
    )
    return opt.step(params, grads)


def saliency_mask(params: ParamSet, forget: FactBatch, fraction: float) -> Dict[str, np.ndarray]:
    """
    0/1 masks selecting the top ``fraction`` of trainable weights by |∇L_f|.

    The ranking is global across entries; ties keep parameter order.
    """
    graph = bind(params)
    grads = graph.tape.backward(graph.loss(forget))
    names = params.trainable_names()
    flat = np.concatenate([np.abs(grads[n]).reshape(-1) for n in names])
    keep = int(math.ceil(fraction * flat.size))
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size, dtype=np.float64)
    chosen[order[:keep]] = 1.0
    masks: Dict[str, np.ndarray] = {}
    start = 0
    for n in names:
        size = params[n].size
        masks[n] = chosen[start : start + size].reshape(params[n].shape)
        start += size
    return masks


def _ref_forget_logprobs(theta0: ParamSet, batch: FactBatch) -> np.ndarray:
    return -example_losses(theta0, batch)


def _ref_log_probs(theta0: ParamSet, batch: FactBatch) -> np.ndarray:
    return log_softmax(forward_logits(theta0, batch))


def _npo_loss(graph: Graph, forget: FactBatch, ref_logp: np.ndarray, beta: float) -> Tensor:
    t = graph.tape
    logp = t.scale(graph.example_losses(forget), -1.0)
    margin = t.add(logp, t.constant(-ref_logp))
    return t.scale(t.mean(t.softplus(t.scale(margin, beta))), 2.0 / beta)


def _scrub_loss(
    graph: Graph, forget: FactBatch, retain: FactBatch, ref: np.ndarray, weight: float
) -> Tensor:
    t = graph.tape
    loss = t.scale(graph.loss(forget), -1.0)
    if weight > 0.0:
        kl = t.mean(t.kl_div(graph.logits(retain), ref))
        loss = t.add(loss, t.scale(kl, weight))
    return loss


def _train_loop(
    params: ParamSet,
    dataset: FactDataset,
    cfg: MethodConfig,
    seed: int,
    build: Callable[[Graph, int, FactBatch, FactBatch | None], Tensor],
    *,
    needs_retain: bool,
    mask: Mapping[str, np.ndarray] | None = None,
    on_step: StepHook | None = None,
) -> ParamSet:
    forget_s, retain_s = _samplers(dataset, cfg.batch_size, seed)
    if needs_retain and retain_s is None:
        raise ConfigError("dataset", f"{cfg.label} needs a non-empty retain split")
    opt = AdamW(cfg.optim(), params)
    phase = cfg.label
    for t in range(1, cfg.steps + 1):
        forget = dataset.batch(next(forget_s))
        retain = dataset.batch(next(retain_s)) if needs_retain else None
        value, grads = _backward(lambda g: build(g, t, forget, retain), params, phase, t)
        params = opt.step(params, grads, mask)
        logger.debug("%s step %d loss=%.6f", phase, t, value)
        if on_step is not None:
            on_step(t, params)
    return params


def run_method(
    cfg: MethodConfig,
    theta0: ParamSet,
    dataset: FactDataset,
    seed: int,
    *,
    on_step: StepHook | None = None,
) -> ParamSet:
    """
    Unlearn the forget split from ``theta0`` with ``cfg``.

    ``on_step(t, params)`` is called after every optimizer step (not for the
    closed-form TaskArith update).
    """
    if dataset.forget.size == 0:
        raise ConfigError("dataset.forget_entities", "unlearning needs a forget split")
    params = _enter_regime(theta0, cfg.regime)
    logger.info("running %s for %d steps (seed=%d)", cfg.label, cfg.steps, seed)
    m = cfg.method

    if m is Method.SAF:
        saf = cfg.saf_config(seed)
        spec = saf.spec

        def build_saf(g: Graph, t: int, bf: FactBatch, br: FactBatch | None) -> Tensor:
            return forget_objective(g, bf, br, saf.lam, alpha=saf.alpha(t), spec=spec)

        return _train_loop(
            params, dataset, cfg, seed, build_saf, needs_retain=saf.lam > 0, on_step=on_step
        )

    if m in (Method.GA, Method.GRADDIFF, Method.SALUN):
        lam = cfg.retain_weight
        mask = None
        if m is Method.SALUN:
            mask = saliency_mask(params, dataset.split_batch("forget"), cfg.salun_fraction)

        def build_gd(g: Graph, t: int, bf: FactBatch, br: FactBatch | None) -> Tensor:
            return forget_objective(g, bf, br, lam)

        return _train_loop(
            params, dataset, cfg, seed, build_gd, needs_retain=lam > 0, mask=mask, on_step=on_step
        )

    if m is Method.NPO:
        lam = cfg.retain_weight

        def build_npo(g: Graph, t: int, bf: FactBatch, br: FactBatch | None) -> Tensor:
            loss = _npo_loss(g, bf, _ref_forget_logprobs(theta0, bf), cfg.npo_beta)
            if lam > 0.0:
                loss = g.tape.add(loss, g.tape.scale(g.loss(br), lam))
            return loss

        return _train_loop(
            params, dataset, cfg, seed, build_npo, needs_retain=lam > 0, on_step=on_step
        )

    if m is Method.SCRUB:

        def build_scrub(g: Graph, t: int, bf: FactBatch, br: FactBatch | None) -> Tensor:
            return _scrub_loss(g, bf, br, _ref_log_probs(theta0, br), cfg.scrub_kl_weight)

        return _train_loop(
            params, dataset, cfg, seed, build_scrub, needs_retain=True, on_step=on_step
        )

    return task_arithmetic(cfg, params, dataset, seed)


def task_arithmetic(
    cfg: MethodConfig, theta0: ParamSet, dataset: FactDataset, seed: int
) -> ParamSet:
    """Negate the task vector of a forget-set fine-tune: θ₀ - η·(θ_ft - θ₀)."""
    ft_cfg = replace(cfg, steps=cfg.ta_ft_steps)

    def build_ft(g: Graph, t: int, bf: FactBatch, br: FactBatch | None) -> Tensor:
        return g.loss(bf)

    theta_ft = _train_loop(theta0, dataset, ft_cfg, seed, build_ft, needs_retain=False)
    names = theta0.trainable_names()
    return theta0.replace(
        {n: theta0[n] - cfg.ta_eta * (theta_ft[n] - theta0[n]) for n in names}
    )
