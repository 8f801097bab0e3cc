"""
Experiment configuration files.

An experiment is one JSON document with ``schema_version: 1``. Parsing turns
it into frozen dataclasses; ``to_dict`` renders the same document back, so a
parsed config round-trips losslessly. Every validation failure raises
``ConfigError`` naming the dotted path of the offending field, e.g.
``methods[1].npo_beta``.

Components:
-----------
- DatasetConfig, AttackConfig, SweepConfig, AblationConfig:
    Sections of the document.
- ExperimentConfig:
    The whole document plus run enumeration.
- RunSpec:
    One (method, seed, sweep point) combination.
- fingerprint():
    SHA-256 over canonical JSON; identifies runs and the θ₀ cache.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Tuple

from .attacks import FinetuneConfig
from .errors import ConfigError
from .factmodel import MODEL_PRESETS, ModelConfig
from .quantsim import QuantScope, QuantSpec
from .unlearn import Method, MethodConfig, PretrainConfig

SCHEMA_VERSION = 1
SWEEP_AXES = ("alpha", "lambda", "ste-scope", "warmup")
METHOD_PRESETS = ("salun-orig",)
_METHOD_DEFAULT_LR = MethodConfig.__dataclass_fields__["lr"].default


def fingerprint(payload: Any) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _section(raw: Mapping[str, Any], key: str) -> Mapping[str, Any]:
    value = raw.get(key, {})
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, "must be an object")
    return value


def _build(cls: type, raw: Mapping[str, Any], path: str, drop: Sequence[str] = ()) -> Any:
    """Instantiate a dataclass from ``raw``, prefixing any ConfigError with ``path``."""
    allowed = {f.name for f in fields(cls)} - set(drop)
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise exc.under(path, leaf_only=True) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


# ---------------------------------------------------------------------- #
# sections
# ---------------------------------------------------------------------- #
@dataclass(frozen=True, slots=True)
class DatasetConfig:
    n_entities: int = 220
    n_attributes: int = 10
    value_vocab: int = 64
    forget_entities: int = 20
    holdout_entities: int = 20
    unrelated_entities: int = 20

    def __post_init__(self) -> None:
        if self.n_entities <= 0 or self.n_attributes <= 0:
            raise ConfigError("n_entities", "must be positive")
        if self.value_vocab < 2:
            raise ConfigError("value_vocab", "must be at least 2")
        if self.forget_entities + self.holdout_entities >= self.n_entities:
            raise ConfigError("forget_entities", "forget + holdout must be below n_entities")
        if self.unrelated_entities < 0:
            raise ConfigError("unrelated_entities", "must be non-negative")


@dataclass(frozen=True, slots=True)
class AttackConfig:
    """Which attacks and diagnostics follow every unlearning run."""

    quant: bool = True
    finetune: FinetuneConfig | None = None
    adapter_vs_merged: bool = False
    diagnostics: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quant": self.quant,
            "finetune": None if self.finetune is None else self.finetune.to_dict(),
            "adapter_vs_merged": self.adapter_vs_merged,
            "diagnostics": self.diagnostics,
        }


@dataclass(frozen=True, slots=True)
class SweepConfig:
    axis: str
    values: Tuple[Any, ...]
    method: str | None = None

    def __post_init__(self) -> None:
        if self.axis not in SWEEP_AXES:
            raise ConfigError("axis", f"must be one of {list(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("values", "must not be empty")
        object.__setattr__(self, "values", tuple(_axis_value(self.axis, v) for v in self.values))

    def to_dict(self) -> Dict[str, Any]:
        return {"axis": self.axis, "values": list(self.values), "method": self.method}


@dataclass(frozen=True, slots=True)
class AblationConfig:
    lambdas: Tuple[float, ...] = (2.0, 4.0, 6.0)
    track_step: int = 50
    ste_scopes: Tuple[str, ...] = ("adapters-only", "all-trainable")

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        object.__setattr__(self, "ste_scopes", tuple(QuantScope(s).value for s in self.ste_scopes))
        if self.track_step <= 0:
            raise ConfigError("track_step", "must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambdas": list(self.lambdas),
            "track_step": self.track_step,
            "ste_scopes": list(self.ste_scopes),
        }


def _axis_value(axis: str, value: Any) -> Any:
    if axis in ("alpha", "lambda"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("values", f"{axis} values must be numbers")
        return float(value)
    if axis == "ste-scope":
        return QuantScope(value).value
    if isinstance(value, str):
        if value not in ("on", "off"):
            raise ConfigError("values", "warmup values are on/off")
        return value == "on"
    return bool(value)


def apply_axis(method: MethodConfig, axis: str, value: Any) -> MethodConfig:
    """Method variant at one sweep point."""
    if axis == "alpha":
        return replace(method, alpha_max=float(value))
    if axis == "lambda":
        return replace(method, lam=float(value))
    if axis == "ste-scope":
        return replace(method, ste_scope=QuantScope(value))
    if axis == "warmup":
        return replace(method, warmup=bool(value))
    raise ConfigError("sweep.axis", f"unknown axis {axis!r}")


def expand_method(raw: Mapping[str, Any], shared: Mapping[str, Any], path: str) -> MethodConfig:
    """
    Parse one ``methods[]`` entry on top of the shared optimizer knobs.

    ``salun-orig`` is SalUn with twice the shared learning rate and 500 steps.
    """
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "must be an object")
    entry = dict(raw)
    if entry.get("method") == "salun-orig":
        entry["method"] = "salun"
        entry.setdefault("label", "salun-orig")
        entry.setdefault("steps", 500)
        if "lr" not in entry:
            entry["lr"] = 2.0 * float(shared.get("lr", _METHOD_DEFAULT_LR))
    try:
        return MethodConfig.from_dict({**shared, **entry})
    except ConfigError as exc:
        raise exc.under(path) from None


# ---------------------------------------------------------------------- #
# experiment
# ---------------------------------------------------------------------- #
@dataclass(frozen=True, slots=True)
class RunSpec:
    index: int
    method: MethodConfig
    seed: int
    axis: str | None = None
    value: Any = None


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """A parsed experiment document."""

    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model_preset: str = "default"
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    methods: Tuple[MethodConfig, ...] = (MethodConfig(Method.GA),)
    int4: QuantSpec = field(default_factory=lambda: QuantSpec.int4())
    int8: QuantSpec = field(default_factory=lambda: QuantSpec.int8())
    precisions: Tuple[str, ...] = ("full", "int8", "int4")
    epsilon: float = 0.05
    seeds: Tuple[int, ...] = (42,)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig | None = None
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str | None = None
    raw_methods: Tuple[Dict[str, Any], ...] = field(default=(), compare=False, repr=False)
    shared: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds", "must list at least one seed")
        if not self.methods:
            raise ConfigError("methods", "must list at least one method")
        bad = [p for p in self.precisions if p not in ("full", "int8", "int4")]
        if bad:
            raise ConfigError("precisions", f"unknown precision {bad[0]!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon", "must be non-negative")
        if self.int4.bits != 4:
            raise ConfigError("quant.int4.bits", "must be 4")
        if self.int8.bits != 8:
            raise ConfigError("quant.int8.bits", "must be 8")
        needed = self.dataset.n_entities + self.dataset.unrelated_entities
        if self.model.entity_vocab < needed:
            raise ConfigError(
                "model.entity_vocab", f"must cover {needed} entities (facts + unrelated corpus)"
            )
        if self.model.attribute_vocab < self.dataset.n_attributes:
            raise ConfigError("model.attribute_vocab", "smaller than dataset.n_attributes")
        if self.model.value_vocab != self.dataset.value_vocab:
            raise ConfigError("model.value_vocab", "must equal dataset.value_vocab")
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("methods", "method labels must be unique")
        if self.sweep is not None and self.sweep.method is not None and self.sweep.method not in labels:
            raise ConfigError("sweep.method", f"no method labelled {self.sweep.method!r}")

    # ------------------------------------------------------------------ #
    def model_for(self, seed: int) -> ModelConfig:
        return replace(self.model, seed=seed)

    def method(self, label: str) -> MethodConfig:
        for m in self.methods:
            if m.label == label:
                return m
        raise ConfigError("methods", f"no method labelled {label!r}")

    def saf_method(self) -> MethodConfig:
        for m in self.methods:
            if m.method is Method.SAF:
                return m
        # warm up for the first third of the run, at most 100 steps
        steps = int(self.shared.get("steps", MethodConfig.__dataclass_fields__["steps"].default))
        entry = {"method": "saf", "warmup_steps": min(100, steps // 3), "warmup": steps > 0}
        return expand_method(entry, self.shared, "methods[saf]")

    def sweep_method(self) -> MethodConfig:
        if self.sweep is None:
            raise ConfigError("sweep", "no sweep configured")
        return self.method(self.sweep.method) if self.sweep.method else self.saf_method()

    def with_sweep(self, axis: str, values: Sequence[Any] | None = None) -> "ExperimentConfig":
        if values is None:
            if self.sweep is not None and self.sweep.axis == axis:
                return self
            values = default_axis_values(axis, self)
        method = self.sweep.method if self.sweep is not None else None
        try:
            sweep = SweepConfig(axis, tuple(values), method)
        except ConfigError as exc:
            raise exc.under("sweep") from None
        return replace(self, sweep=sweep)

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def with_methods(self, labels: Sequence[str]) -> "ExperimentConfig":
        picked = [self.method(label) for label in labels]
        positions = [self.methods.index(m) for m in picked]
        raw = tuple(self.raw_methods[i] for i in positions) if self.raw_methods else ()
        return replace(self, methods=tuple(picked), raw_methods=raw)

    def runs(self) -> List[RunSpec]:
        """Every (method, seed, sweep point) combination in config order."""
        specs: List[RunSpec] = []
        if self.sweep is not None:
            base = self.sweep_method()
            for value in self.sweep.values:
                variant = apply_axis(base, self.sweep.axis, value)
                for seed in self.seeds:
                    specs.append(RunSpec(len(specs), variant, seed, self.sweep.axis, value))
            return specs
        for method in self.methods:
            for seed in self.seeds:
                specs.append(RunSpec(len(specs), method, seed))
        return specs

    def pretrain_key(self, seed: int) -> str:
        return fingerprint(
            {
                "dataset": asdict(self.dataset),
                "model": model_to_dict(self.model_for(seed)),
            "pretrain": asdict(self.pretrain),
            "seed": seed,
            }
        )

    def run_key(self, spec: RunSpec) -> str:
        body: Dict[str, Any] = {
            "pretrain": self.pretrain_key(spec.seed),
            "method": spec.method.to_dict(),
            "seed": spec.seed,
            "int4": self.int4.to_dict(),
            "int8": self.int8.to_dict(),
            "precisions": list(self.precisions),
            "epsilon": self.epsilon,
            "attacks": self.attacks.to_dict(),
            "track_step": self.ablation.track_step,
            "unrelated_entities": self.dataset.unrelated_entities,
        }
        # sweep and ablation points sharing a config stay distinct records
        if spec.axis is not None:
            body["point"] = [spec.axis, spec.value]
        return fingerprint(body)

    # ------------------------------------------------------------------ #
    def to_dict(self) -> Dict[str, Any]:
        model = model_to_dict(self.model)
        model.pop("seed")
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "dataset": asdict(self.dataset),
            "model": {"preset": self.model_preset, **model},
            "pretrain": asdict(self.pretrain),
            "unlearn": dict(self.shared),
            "methods": [dict(m) for m in self.raw_methods]
            if self.raw_methods
            else [m.to_dict() for m in self.methods],
            "quant": {"int4": self.int4.to_dict(), "int8": self.int8.to_dict()},
            "precisions": list(self.precisions),
            "epsilon": self.epsilon,
            "seeds": list(self.seeds),
            "attacks": self.attacks.to_dict(),
            "sweep": None if self.sweep is None else self.sweep.to_dict(),
            "ablation": self.ablation.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        if not isinstance(raw, Mapping):
            raise ConfigError("<root>", "config must be a JSON object")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
        known = {
            "schema_version", "name", "dataset", "model", "pretrain", "unlearn", "methods",
            "quant", "precisions", "epsilon", "seeds", "attacks", "sweep", "ablation",
            "output_dir",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")

        dataset = _build(DatasetConfig, _section(raw, "dataset"), "dataset")

        model_raw = dict(_section(raw, "model"))
        preset = model_raw.pop("preset", "default")
        if preset not in MODEL_PRESETS:
            raise ConfigError("model.preset", f"unknown preset {preset!r}")
        model = _build(
            ModelConfig,
            {**model_to_dict(MODEL_PRESETS[preset]), **model_raw},
            "model",
        )

        pretrain = _build(PretrainConfig, _section(raw, "pretrain"), "pretrain")

        shared = dict(_section(raw, "unlearn"))
        allowed_shared = {"steps", "lr", "batch_size", "weight_decay", "clip_norm", "regime"}
        bad_shared = set(shared) - allowed_shared
        if bad_shared:
            raise ConfigError(f"unlearn.{sorted(bad_shared)[0]}", "unknown key")

        raw_methods = raw.get("methods", [{"method": "ga"}])
        if not isinstance(raw_methods, list) or not raw_methods:
            raise ConfigError("methods", "must be a non-empty list")
        methods = tuple(
            expand_method(m, shared, f"methods[{i}]") for i, m in enumerate(raw_methods)
        )

        quant = _section(raw, "quant")
        specs: Dict[str, QuantSpec] = {}
        for label, bits in (("int4", 4), ("int8", 8)):
            try:
                specs[label] = QuantSpec.from_dict(quant.get(label, {"bits": bits}))
            except ConfigError as exc:
                raise exc.under(f"quant.{label}", leaf_only=True) from None
        int4, int8 = specs["int4"], specs["int8"]

        attacks_raw = dict(_section(raw, "attacks"))
        ft_raw = attacks_raw.pop("finetune", None)
        finetune = None if ft_raw is None else _build(FinetuneConfig, ft_raw, "attacks.finetune")
        attacks = _build(AttackConfig, {**attacks_raw, "finetune": finetune}, "attacks")

        sweep_raw = raw.get("sweep")
        sweep = None
        if sweep_raw is not None:
            sweep_raw = dict(sweep_raw)
            sweep_raw["values"] = tuple(sweep_raw.get("values", ()))
            sweep = _build(SweepConfig, sweep_raw, "sweep")

        ablation = _build(AblationConfig, _section(raw, "ablation"), "ablation")

        seeds = raw.get("seeds", [42])
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds", "must be a list of integers")
        epsilon = raw.get("epsilon", 0.05)
        if isinstance(epsilon, bool) or not isinstance(epsilon, (int, float)):
            raise ConfigError("epsilon", "must be a number")

        return cls(
            name=str(raw.get("name", "experiment")),
            dataset=dataset,
            model_preset=preset,
            model=model,
            pretrain=pretrain,
            methods=methods,
            int4=int4,
            int8=int8,
            precisions=tuple(raw.get("precisions", ("full", "int8", "int4"))),
            epsilon=float(epsilon),
            seeds=tuple(seeds),
            attacks=attacks,
            sweep=sweep,
            ablation=ablation,
            output_dir=raw.get("output_dir"),
            raw_methods=tuple(dict(m) for m in raw_methods),
            shared=shared,
        )

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(raw)

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def model_to_dict(model: ModelConfig) -> Dict[str, Any]:
    return asdict(model)


def default_axis_values(axis: str, cfg: ExperimentConfig) -> Tuple[Any, ...]:
    if axis == "alpha":
        return (0.0, 1.0, 1.5, 2.0, 2.5, 3.0)
    if axis == "lambda":
        return cfg.ablation.lambdas
    if axis == "ste-scope":
        return cfg.ablation.ste_scopes
    if axis == "warmup":
        return ("on", "off")
    raise ConfigError("sweep.axis", f"must be one of {list(SWEEP_AXES)}")
