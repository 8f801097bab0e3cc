"""
Experiment orchestration.

``Lab`` turns an ``ExperimentConfig`` into run records: for each
(method, seed, sweep point) it pretrains or loads θ₀, unlearns, evaluates at
every precision, runs the configured attacks and persists one JSON record.
Independent runs may execute on a thread pool; results are always written
and aggregated in configuration order.

Report bodies carry no timestamps. Wall-clock times go to
``logs/timings.csv`` and, only when ``record_runtime`` is on, into the
``runtime_s`` column.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .attacks import AttackOutcome, adapter_vs_merged, finetune_attack, quant_attack
from .config import Settings
from .datagen import FactDataset, generate, generate_unrelated
from .errors import CheckpointError
from .evalsuite import (
    EvalReport,
    METRIC_FIELDS,
    accuracy,
    certificate,
    mia_auc,
    minimal_epsilon,
    prop1_check,
    quantized_accuracy,
    recovery_bound_check,
    recovery_ratio,
    seed_aggregate,
    sharpness,
    trilemma,
)
from .experiment import ExperimentConfig, RunSpec, apply_axis
from .factmodel import ParamSet, init_model
from .logger import get_logger
from .quantsim import noise_report
from .reports import ReportStore
from .unlearn import Method, pretrain, run_method

logger = get_logger(__name__)

RUN_COLUMNS = (
    "method", "seed", "alpha", "lambda", "fa", "ra", "q_int8", "q_int4",
    "ra_int4", "mia_auc", "kappa", "cert", "runtime_s",
)
FRONTIER_COLUMNS = ("axis", "value", "alpha", "lambda", "fa", "ra", "q_int4", "cert")
TRAJECTORY_COLUMNS = ("step", "fa", "ra")
TIMING_COLUMNS = ("index", "method", "seed", "seconds", "status")


def aggregate_columns() -> Tuple[str, ...]:
    cols: List[str] = ["method", "axis", "value", "alpha", "lambda", "n"]
    for name in METRIC_FIELDS:
        cols += [f"{name}_mean", f"{name}_std"]
    return tuple(cols + ["cert_rate"])


@dataclass
class RunRecord:
    """Everything one run produced; ``error`` is set instead of ``report`` on failure."""

    index: int
    fingerprint: str
    label: str
    method: str
    seed: int
    axis: str | None
    value: Any
    alpha: float | None
    lam: float | None
    report: EvalReport | None = None
    attacks: Dict[str, AttackOutcome] = field(default_factory=dict)
    noise: Dict[str, Dict[str, float]] = field(default_factory=dict)
    diagnostics: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    fa_at_step: Dict[int, float] = field(default_factory=dict)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)
    runtime_seconds: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> Dict[str, Any]:
        """One line of ``runs.csv``."""
        out: Dict[str, Any] = {
            "method": self.label,
            "seed": self.seed,
            "alpha": self.alpha,
            "lambda": self.lam,
            "runtime_s": self.runtime_seconds,
        }
        if self.report is not None:
            out.update({k: getattr(self.report, k) for k in METRIC_FIELDS})
            out["cert"] = self.report.cert
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "fingerprint": self.fingerprint,
            "label": self.label,
            "method": self.method,
            "seed": self.seed,
            "axis": self.axis,
            "value": self.value,
            "alpha": self.alpha,
            "lambda": self.lam,
            "report": None if self.report is None else self.report.to_dict(),
            "attacks": {k: v.to_dict() for k, v in self.attacks.items()},
            "noise": self.noise,
            "diagnostics": self.diagnostics,
            "fa_at_step": {str(k): v for k, v in sorted(self.fa_at_step.items())},
            "checkpoints": self.checkpoints,
            "extras": self.extras,
            "runtime_seconds": self.runtime_seconds,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunRecord":
        return cls(
            index=int(raw["index"]),
            fingerprint=raw["fingerprint"],
            label=raw["label"],
            method=raw["method"],
            seed=int(raw["seed"]),
            axis=raw.get("axis"),
            value=raw.get("value"),
            alpha=raw.get("alpha"),
            lam=raw.get("lambda"),
            report=None if raw.get("report") is None else EvalReport.from_dict(raw["report"]),
            noise=raw.get("noise", {}),
            diagnostics=raw.get("diagnostics", {}),
            fa_at_step={int(k): v for k, v in raw.get("fa_at_step", {}).items()},
            checkpoints=raw.get("checkpoints", {}),
            extras=raw.get("extras", {}),
            runtime_seconds=raw.get("runtime_seconds"),
            error=raw.get("error"),
        )


def _alpha_lambda(spec: RunSpec) -> Tuple[float | None, float | None]:
    m = spec.method
    if m.method is Method.SAF:
        saf = m.saf_config(spec.seed)
        return saf.alpha_max, saf.lam
    if m.method in (Method.GRADDIFF, Method.NPO, Method.SALUN):
        return None, m.retain_weight
    return None, None


# ---------------------------------------------------------------------- #
# evaluation
# ---------------------------------------------------------------------- #
def evaluate(
    params: ParamSet,
    dataset: FactDataset,
    cfg: ExperimentConfig,
    runtime_seconds: float | None = None,
) -> EvalReport:
    """All metrics for one checkpoint at every configured precision."""
    forget = dataset.split_batch("forget")
    retain = dataset.split_batch("retain")
    fa = accuracy(params, forget)
    q8 = quantized_accuracy(params, cfg.int8, forget)
    q4 = quantized_accuracy(params, cfg.int4, forget)
    holdout = dataset.split_batch("holdout")
    return EvalReport(
        fa=fa,
        ra=accuracy(params, retain),
        q_int8=q8,
        q_int4=q4,
        ra_int4=quantized_accuracy(params, cfg.int4, retain),
        mia_auc=mia_auc(params, forget, holdout) if len(holdout) else 0.5,
        kappa=sharpness(params, forget),
        cert=certificate({"full": fa, "int8": q8, "int4": q4}, cfg.epsilon, cfg.precisions),
        recovery_ratio=recovery_ratio(fa, q4),
        runtime_seconds=runtime_seconds,
    )


# ---------------------------------------------------------------------- #
# orchestration
# ---------------------------------------------------------------------- #
class Lab:
    """
    Runs an experiment against a ``ReportStore``.

    Datasets and pretrained checkpoints are shared between runs of the same
    seed; θ₀ is cached on disk by its pretraining fingerprint.
    """

    def __init__(self, cfg: ExperimentConfig, store: ReportStore, settings: Settings) -> None:
        self.cfg = cfg
        self.store = store
        self.settings = settings
        self._lock = threading.Lock()
        self._seed_locks: Dict[int, threading.Lock] = {}
        self._theta0: Dict[int, ParamSet] = {}
        self._datasets: Dict[int, FactDataset] = {}
        self.timings: List[Dict[str, Any]] = []

    # shared inputs ----------------------------------------------------- #
    def dataset(self, seed: int) -> FactDataset:
        with self._lock:
            if seed not in self._datasets:
                d = self.cfg.dataset
                self._datasets[seed] = generate(
                    n_entities=d.n_entities,
                    n_attributes=d.n_attributes,
                    value_vocab=d.value_vocab,
                    forget_entities=d.forget_entities,
                    holdout_entities=d.holdout_entities,
                    seed=seed,
                )
            return self._datasets[seed]

    def unrelated(self, seed: int) -> FactDataset:
        base = self.dataset(seed)
        child = int(np.random.SeedSequence([seed, 0xA11CE]).generate_state(1)[0])
        return generate_unrelated(base, self.cfg.dataset.unrelated_entities, child)

    def _seed_lock(self, seed: int) -> threading.Lock:
        with self._lock:
            return self._seed_locks.setdefault(seed, threading.Lock())

    def theta0(self, seed: int) -> ParamSet:
        """Pretrained checkpoint for ``seed``, from memory, disk cache or a fresh run."""
        with self._seed_lock(seed):
            if seed in self._theta0:
                return self._theta0[seed]
            rel = f"cache/{self.cfg.pretrain_key(seed)}.params"
            if self.store.exists(rel):
                try:
                    params = self.store.load_params(rel)
                    logger.info("loaded cached theta0 for seed %d", seed)
                except CheckpointError:
                    logger.warning("cached theta0 %s unreadable; pretraining again", rel)
                    params = self._pretrain(seed, rel)
            else:
                params = self._pretrain(seed, rel)
            self._theta0[seed] = params
            return params

    def _pretrain(self, seed: int, rel: str) -> ParamSet:
        params = pretrain(
            init_model(self.cfg.model_for(seed)), self.dataset(seed), self.cfg.pretrain, seed
        )
        self.store.save_params(rel, params)
        return params

    def pretrain_summary(self, seed: int) -> Dict[str, Any]:
        params = self.theta0(seed)
        ds = self.dataset(seed)
        return {
            "seed": seed,
            "fingerprint": self.cfg.pretrain_key(seed),
            "checkpoint": f"cache/{self.cfg.pretrain_key(seed)}.params",
            "fa": accuracy(params, ds.split_batch("forget")),
            "ra": accuracy(params, ds.split_batch("retain")),
            "holdout_accuracy": accuracy(params, ds.split_batch("holdout")),
        }

    # single run -------------------------------------------------------- #
    def run_one(self, spec: RunSpec, records_dir: str = "runs") -> RunRecord:
        fp = self.cfg.run_key(spec)
        alpha, lam = _alpha_lambda(spec)
        record = RunRecord(
            index=spec.index,
            fingerprint=fp,
            label=spec.method.label,
            method=spec.method.method.value,
            seed=spec.seed,
            axis=spec.axis,
            value=spec.value,
            alpha=alpha,
            lam=lam,
        )
        started = time.perf_counter()
        try:
            self._execute(spec, record)
        except Exception as exc:
            logger.exception("run %d (%s, seed %d) failed", spec.index, spec.method.label, spec.seed)
            record.error = f"{type(exc).__name__}: {exc}"
        elapsed = time.perf_counter() - started
        with self._lock:
            self.timings.append(
                {
                    "index": spec.index,
                    "method": spec.method.label,
                    "seed": spec.seed,
                    "seconds": round(elapsed, 3),
                    "status": "ok" if record.ok else "failed",
                }
            )
        if self.settings.record_runtime:
            record.runtime_seconds = round(elapsed, 3)
            if record.report is not None:
                record.report = replace(record.report, runtime_seconds=record.runtime_seconds)
        self.store.write_json(f"{records_dir}/{fp}.json", record.to_dict())
        return record

    def _execute(self, spec: RunSpec, record: RunRecord) -> None:
        cfg = self.cfg
        ds = self.dataset(spec.seed)
        theta0 = self.theta0(spec.seed)
        forget = ds.split_batch("forget")
        track = cfg.ablation.track_step

        def on_step(t: int, params: ParamSet) -> None:
            if t == track:
                record.fa_at_step[t] = accuracy(params, forget)

        theta = run_method(spec.method, theta0, ds, spec.seed, on_step=on_step)
        record.checkpoints["theta_star"] = f"checkpoints/{record.fingerprint}.params"
        self.store.save_params(record.checkpoints["theta_star"], theta)
        record.checkpoints["theta0"] = f"cache/{cfg.pretrain_key(spec.seed)}.params"

        report = evaluate(theta, ds, cfg)
        record.report = report
        record.noise = noise_report(theta, (cfg.int4, cfg.int8))
        tri = trilemma(report.fa, report.ra, report.q_int4)
        record.extras = {
            "minimal_epsilon": minimal_epsilon(
                {"full": report.fa, "int8": report.q_int8, "int4": report.q_int4},
                cfg.precisions,
            ),
            "trilemma_satisfied": tri.satisfied,
            "trilemma_failed": sorted(tri.failed),
        }

        if cfg.attacks.quant:
            record.attacks["quant_int4"] = quant_attack(theta, cfg.int4, ds)
            record.attacks["quant_int8"] = quant_attack(theta, cfg.int8, ds)
        if cfg.attacks.finetune is not None:
            ft = finetune_attack(theta, ds, self.unrelated(spec.seed), cfg.attacks.finetune, spec.seed)
            record.attacks["finetune"] = ft
            self.store.write_csv(
                f"reports/trajectory_{spec.method.label}_{spec.seed}_{spec.index}.csv",
                TRAJECTORY_COLUMNS,
                [{"step": s, "fa": f, "ra": r} for s, f, r in ft.trajectory],
            )
        if cfg.attacks.adapter_vs_merged and theta.has_adapters:
            unmerged, merged = adapter_vs_merged(theta, cfg.int4, ds)
            record.attacks["adapter_space"] = unmerged
            record.attacks["merged_model"] = merged
        if cfg.attacks.diagnostics:
            record.diagnostics["recovery_bound"] = recovery_bound_check(theta, cfg.int4, forget).to_dict()
            record.diagnostics["prop1"] = prop1_check(theta0, theta, forget, cfg.int4).to_dict()

        logger.info(
            "%s seed=%d fa=%.3f ra=%.3f q_int8=%.3f q_int4=%.3f cert=%s",
            spec.method.label, spec.seed, report.fa, report.ra, report.q_int8, report.q_int4, report.cert,
        )

    # many runs --------------------------------------------------------- #
    def run_all(self, specs: Sequence[RunSpec], records_dir: str = "runs") -> List[RunRecord]:
        """Execute ``specs``; the result list follows ``specs`` order."""
        workers = max(1, min(self.settings.workers, len(specs) or 1))
        run = partial(self.run_one, records_dir=records_dir)
        if workers == 1:
            records = [run(s) for s in specs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(run, specs))
        self.store.write_csv(
            "logs/timings.csv", TIMING_COLUMNS, sorted(self.timings, key=lambda r: r["index"])
        )
        return records


# ---------------------------------------------------------------------- #
# aggregation and report files
# ---------------------------------------------------------------------- #
def _groups(records: Sequence[RunRecord]) -> List[List[RunRecord]]:
    order: Dict[Tuple[Any, ...], List[RunRecord]] = {}
    for r in records:
        order.setdefault((r.label, r.axis, repr(r.value)), []).append(r)
    return list(order.values())


def aggregate_rows(records: Sequence[RunRecord]) -> List[Dict[str, Any]]:
    rows: List[Dict[str, Any]] = []
    for group in _groups([r for r in records if r.report is not None]):
        agg = seed_aggregate([r.report for r in group])
        head = group[0]
        row: Dict[str, Any] = {
            "method": head.label,
            "axis": head.axis,
            "value": head.value,
            "alpha": head.alpha,
            "lambda": head.lam,
            "n": agg.n,
            "cert_rate": agg.cert_rate,
        }
        for name in METRIC_FIELDS:
            row[f"{name}_mean"] = agg.means[name]
            row[f"{name}_std"] = agg.stds[name]
        rows.append(row)
    return rows


def frontier_rows(records: Sequence[RunRecord]) -> List[Dict[str, Any]]:
    rows = []
    for agg in aggregate_rows([r for r in records if r.axis is not None]):
        rows.append(
            {
                "axis": agg["axis"],
                "value": agg["value"],
                "alpha": agg["alpha"],
                "lambda": agg["lambda"],
                "fa": agg["fa_mean"],
                "ra": agg["ra_mean"],
                "q_int4": agg["q_int4_mean"],
                "cert": agg["cert_rate"],
            }
        )
    return rows


def summary(name: str, records: Sequence[RunRecord]) -> Dict[str, Any]:
    return {
        "experiment": name,
        "runs": [
            {
                **r.row(),
                "fingerprint": r.fingerprint,
                "recovery_ratio": None if r.report is None else r.report.recovery_ratio,
                "noise": r.noise,
                "extras": r.extras,
                "fa_at_step": {str(k): v for k, v in sorted(r.fa_at_step.items())},
                "error": r.error,
            }
            for r in records
        ],
        "aggregate": aggregate_rows(records),
        "failed": sum(1 for r in records if not r.ok),
    }


def write_reports(store: ReportStore, name: str, records: Sequence[RunRecord]) -> None:
    """runs.csv, aggregate.csv, summary.json and, for sweeps, frontier.csv."""
    store.write_csv("reports/runs.csv", RUN_COLUMNS, [r.row() for r in records])
    store.write_csv("reports/aggregate.csv", aggregate_columns(), aggregate_rows(records))
    store.write_json("reports/summary.json", summary(name, records))
    if any(r.axis is not None for r in records):
        store.write_csv("reports/frontier.csv", FRONTIER_COLUMNS, frontier_rows(records))


def run_experiment(lab: Lab) -> List[RunRecord]:
    """Enumerate, execute and report every run of ``lab.cfg``."""
    specs = lab.cfg.runs()
    logger.info("experiment %s: %d runs", lab.cfg.name, len(specs))
    records = lab.run_all(specs)
    write_reports(lab.store, lab.cfg.name, records)
    failed = [r for r in records if not r.ok]
    if failed:
        logger.warning("%d of %d runs failed", len(failed), len(records))
    return records


def report_from_store(store: ReportStore, name: str | None = None) -> List[RunRecord]:
    """Rebuild the aggregate reports from the run records already on disk."""
    records = [RunRecord.from_dict(r) for r in store.run_records()]
    write_reports(store, name or store.root.name, records)
    return records


# ---------------------------------------------------------------------- #
# ablations
# ---------------------------------------------------------------------- #
def ablation_specs(cfg: ExperimentConfig) -> Dict[str, List[RunSpec]]:
    """
    One-factor-at-a-time variations of the SAF arm on the first seed:
    warmup on/off, STE scope, and the λ grid at the configured α_max.
    """
    base = cfg.saf_method()
    seed = cfg.seeds[0]
    axes = {
        "warmup": (True, False),
        "ste-scope": cfg.ablation.ste_scopes,
        "lambda": cfg.ablation.lambdas,
    }
    specs: Dict[str, List[RunSpec]] = {}
    index = 0
    for axis, values in axes.items():
        specs[axis] = []
        for value in values:
            specs[axis].append(RunSpec(index, apply_axis(base, axis, value), seed, axis, value))
            index += 1
    return specs


def ablation_suite(lab: Lab) -> Dict[str, List[RunRecord]]:
    """Run the ablation grid and write one CSV per axis."""
    grid = ablation_specs(lab.cfg)
    flat = [s for specs in grid.values() for s in specs]
    by_index = {r.index: r for r in lab.run_all(flat, records_dir="ablation")}
    step_col = f"fa_at_step_{lab.cfg.ablation.track_step}"
    out: Dict[str, List[RunRecord]] = {}
    for axis, specs in grid.items():
        records = [by_index[s.index] for s in specs]
        out[axis] = records
        rows = []
        for r in records:
            rep = r.report
            row: Dict[str, Any] = {
                "value": "on" if r.value is True else "off" if r.value is False else r.value,
                "alpha": r.alpha,
                "lambda": r.lam,
                step_col: r.fa_at_step.get(lab.cfg.ablation.track_step),
                "error": r.error,
            }
            if rep is not None:
                row.update({"fa": rep.fa, "ra": rep.ra, "q_int4": rep.q_int4, "cert": rep.cert})
            rows.append(row)
        columns = ["value", "alpha", "lambda", "fa", "ra", "q_int4", "cert"]
        if axis == "warmup":
            columns.insert(3, step_col)
        lab.store.write_csv(
            f"reports/ablation_{axis.replace('-', '_')}.csv", columns + ["error"], rows
        )
    return out
