"""
Deployment-time attacks on an unlearned checkpoint.

* quantization recovery: quantize and re-measure forget accuracy, no training
* fine-tuning recovery: a short fine-tune on unrelated facts, FA tracked along the way
* adapter vs merged: the same quantizer applied before and after folding the
  adapters into the base
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .autodiff import Tape
from .datagen import FactDataset, batch_sampler
from .errors import ConfigError, DivergenceError, NonFiniteError
from .evalsuite import accuracy, quantized_accuracy
from .factmodel import ParamSet, Regime, bind, merge_adapters
from .logger import get_logger
from .optim import AdamW, OptimConfig
from .quantsim import QuantScope, QuantSpec

logger = get_logger(__name__)


@dataclass(frozen=True, slots=True)
class AttackOutcome:
    """
    Result of one attack.

    ``trajectory`` holds ``(step, fa, ra)`` rows for fine-tuning and is empty
    for quantization; ``detail`` echoes the spec or fine-tune settings.
    """

    kind: str
    fa_before: float
    fa_after: float
    ra_before: float
    ra_after: float
    trajectory: Tuple[Tuple[int, float, float], ...] = ()
    detail: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["trajectory"] = [list(row) for row in self.trajectory]
        return out


@dataclass(frozen=True, slots=True)
class FinetuneConfig:
    """
    Attacker's fine-tune.

    The default learning rate keeps the attack-to-unlearning ratio of
    2e-5 / 5e-5 against the default unlearning rate of 1e-3.
    """

    steps: int = 50
    lr: float = 4e-4
    batch_size: int = 4
    record_every: int = 10
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    regime: Regime = Regime.ADAPTERS

    def __post_init__(self) -> None:
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.steps < 0:
            raise ConfigError("finetune.steps", "must be non-negative")
        if self.record_every <= 0:
            raise ConfigError("finetune.record_every", "must be positive")
        if self.batch_size <= 0:
            raise ConfigError("finetune.batch_size", "must be positive")
        if self.regime is Regime.FULL:
            raise ConfigError("finetune.regime", "must be adapters or all")

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["regime"] = self.regime.value
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, object]) -> "FinetuneConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"finetune.{sorted(unknown)[0]}", "unknown key")
        return cls(**raw)


def quant_attack(theta: ParamSet, spec: QuantSpec, dataset: FactDataset) -> AttackOutcome:
    """Forget and retain accuracy before and after quantizing ``theta``."""
    forget = dataset.split_batch("forget")
    retain = dataset.split_batch("retain")
    return AttackOutcome(
        kind="quant",
        fa_before=accuracy(theta, forget),
        fa_after=quantized_accuracy(theta, spec, forget),
        ra_before=accuracy(theta, retain),
        ra_after=quantized_accuracy(theta, spec, retain),
        detail={"spec": spec.to_dict()},
    )


def finetune_attack(
    theta: ParamSet,
    dataset: FactDataset,
    unrelated: FactDataset,
    cfg: FinetuneConfig,
    seed: int,
) -> AttackOutcome:
    """
    Fine-tune ``theta`` on ``unrelated`` facts and watch forget accuracy.

    FA and RA are recorded at step 0, every ``record_every`` steps and at the
    final step.
    """
    forget_ids = set(np.unique(dataset.facts[dataset.forget, 0]).tolist())
    if forget_ids & set(np.unique(unrelated.facts[:, 0]).tolist()):
        raise ConfigError("finetune", "unrelated corpus shares entities with the forget split")

    forget = dataset.split_batch("forget")
    retain = dataset.split_batch("retain")
    params = theta.with_regime(cfg.regime)
    rows: List[Tuple[int, float, float]] = [(0, accuracy(params, forget), accuracy(params, retain))]

    if cfg.steps > 0:
        opt = AdamW(
            OptimConfig(
                lr=cfg.lr,
                weight_decay=cfg.weight_decay,
                clip_norm=cfg.clip_norm,
                total_steps=cfg.steps,
            ),
            params,
        )
        seed_seq = np.random.SeedSequence([seed, 0xF1E7])
        sampler = batch_sampler(unrelated.trained, cfg.batch_size, int(seed_seq.generate_state(1)[0]))
        for t in range(1, cfg.steps + 1):
            batch = unrelated.batch(next(sampler))
            graph = bind(params, Tape())
            try:
                loss = graph.loss(batch)
                if not math.isfinite(loss.item()):
                    raise DivergenceError("finetune", t, f"loss={loss.item()}")
                grads = graph.tape.backward(loss)
            except NonFiniteError as exc:
                raise DivergenceError("finetune", t, str(exc)) from exc
            params = opt.step(params, grads)
            if t % cfg.record_every == 0 or t == cfg.steps:
                rows.append((t, accuracy(params, forget), accuracy(params, retain)))

    logger.info("finetune attack: FA %.3f -> %.3f", rows[0][1], rows[-1][1])
    return AttackOutcome(
        kind="finetune",
        fa_before=rows[0][1],
        fa_after=rows[-1][1],
        ra_before=rows[0][2],
        ra_after=rows[-1][2],
        trajectory=tuple(rows),
        detail={"finetune": cfg.to_dict(), "seed": seed},
    )


def adapter_vs_merged(
    theta: ParamSet,
    spec: QuantSpec,
    dataset: FactDataset,
    *,
    unmerged_scope: QuantScope = QuantScope.ALL_TRAINABLE,
) -> Tuple[AttackOutcome, AttackOutcome]:
    """
    Quantize the unmerged model and the merged model with the same quantizer.

    The unmerged arm quantizes base and adapter matrices separately
    (``unmerged_scope``); the merged arm quantizes ``W + scale·B·A``. A spec
    with scope ``none`` is passed through to both arms as a control.
    """
    if not theta.has_adapters:
        raise ConfigError("attacks.adapter_vs_merged", "checkpoint has no adapters")
    if spec.scope is QuantScope.NONE:
        unmerged_spec = merged_spec = spec
    else:
        unmerged_spec = spec.with_scope(unmerged_scope)
        merged_spec = spec.with_scope(QuantScope.MERGED_MODEL)
    return (
        quant_attack(theta, unmerged_spec, dataset),
        quant_attack(merge_adapters(theta), merged_spec, dataset),
    )
