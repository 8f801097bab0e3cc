"""
End-to-end checks on the shipped table1-demo configuration.

Several minutes of CPU; deselected by default, run with ``pytest -m demo``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from durable_lab.config import Settings
from durable_lab.experiment import ExperimentConfig
from durable_lab.harness import Lab, run_experiment
from durable_lab.reports import ReportStore

pytestmark = pytest.mark.demo

DEMO_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "table1-demo.json"
SETTINGS = Settings(output_root=None, workers=4, record_runtime=False)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    """The demo experiment limited to the GA and SAF arms, run once."""
    cfg = ExperimentConfig.load(DEMO_CONFIG).with_methods(["ga", "saf"])
    root = tmp_path_factory.mktemp("demo")
    lab = Lab(cfg, ReportStore(root), SETTINGS)
    records = run_experiment(lab)
    return lab, {(r.label, r.seed): r for r in records}, root


def test_pretrain_memorizes(demo):
    """
    θ₀ knows both splits before unlearning.
    """
    lab, _, _ = demo
    for seed in lab.cfg.seeds:
        s = lab.pretrain_summary(seed)
        assert s["fa"] >= 0.95 and s["ra"] >= 0.95


def test_ga_forgets_but_int4_recovers(demo):
    """
    GA: low FA, usable RA, INT8 faithful, INT4 brings the facts back while
    leaving RA where it was.
    """
    lab, records, _ = demo
    for seed in lab.cfg.seeds:
        rep = records[("ga", seed)].report
        assert rep.fa <= 0.10 and rep.ra >= 0.60
        assert abs(rep.q_int8 - rep.fa) <= 0.02
        assert rep.q_int4 >= rep.fa + 0.10
        assert abs(rep.ra_int4 - rep.ra) <= 0.05


def test_saf_certifies_every_seed(demo):
    """
    SAF at the shipped α_max certifies 3/3 seeds with a stable Q-INT4.
    """
    lab, records, _ = demo
    reports = [records[("saf", seed)].report for seed in lab.cfg.seeds]
    assert all(r.cert for r in reports)
    assert float(np.std([r.q_int4 for r in reports], ddof=1)) <= 0.05


def test_finetune_recovery_pattern(demo):
    """
    Unrelated fine-tuning raises GA's FA; SAF ends no higher than GA.
    """
    lab, records, _ = demo
    for seed in lab.cfg.seeds:
        ga = records[("ga", seed)].attacks["finetune"]
        saf = records[("saf", seed)].attacks["finetune"]
        assert ga.fa_after > ga.fa_before
        assert saf.fa_after <= ga.fa_after


def test_alpha_sweep_frontier(tmp_path):
    """
    Q-INT4 falls as α_max grows across the default grid.
    """
    cfg = ExperimentConfig.load(DEMO_CONFIG).with_methods(["saf"]).with_sweep("alpha")
    lab = Lab(cfg, ReportStore(tmp_path), SETTINGS)
    run_experiment(lab)
    rows = (tmp_path / "reports" / "frontier.csv").read_text().splitlines()[1:]
    q_int4 = [float(r.split(",")[6]) for r in rows]
    assert q_int4[-1] < q_int4[0]


def test_demo_reports_are_deterministic(demo, tmp_path):
    """
    Repeating the run gives byte-identical report bodies.
    """
    lab, _, root = demo
    again = Lab(lab.cfg, ReportStore(tmp_path), SETTINGS)
    run_experiment(again)
    for name in ("runs.csv", "aggregate.csv", "summary.json"):
        assert (root / "reports" / name).read_bytes() == (tmp_path / "reports" / name).read_bytes()
