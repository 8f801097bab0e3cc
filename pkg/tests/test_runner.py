from __future__ import annotations

import json

import pytest
from dependency_injector import providers

from durable_lab.config import Settings
from durable_lab.container import AppContainer
from durable_lab.reports import ReportStore
from durable_lab.runner import main


@pytest.fixture
def container():
    """AppContainer with environment-independent settings."""
    c = AppContainer()
    c.config.override(
        providers.Object(
            Settings(output_root=None, workers=1, record_runtime=False, s3_bucket="bkt", s3_prefix="")
        )
    )
    yield c
    c.config.reset_override()


@pytest.fixture
def config_file(tmp_path, experiment_doc):
    """Write an experiment document and return a factory for its path."""

    def write(**overrides):
        path = tmp_path / "experiment.json"
        path.write_text(json.dumps(experiment_doc(**overrides)))
        return path

    return write


# ---------------------------------------------------------------------------#
# Experiment commands
# ---------------------------------------------------------------------------#


def test_attack_command_writes_reports(tmp_path, config_file, container):
    """
    `attack` runs every method and seed and writes the report set and run log.
    """
    out = tmp_path / "out"
    code = main(["attack", "--config", str(config_file()), "--out", str(out)], container)
    assert code == 0
    assert (out / "reports" / "runs.csv").exists()
    assert (out / "logs" / "run.log").read_text()
    (record,) = ReportStore(out).run_records()
    assert "finetune" in record["attacks"]


def test_unlearn_command_skips_attacks(tmp_path, config_file, container):
    """
    `unlearn` evaluates without running any attack.
    """
    out = tmp_path / "out"
    assert main(["unlearn", "--config", str(config_file()), "--out", str(out)], container) == 0
    (record,) = ReportStore(out).run_records()
    assert record["attacks"] == {}


def test_seed_and_method_filters(tmp_path, config_file, container):
    """
    --seed and --method narrow the run grid.
    """
    path = config_file(seeds=[1, 2, 3], methods=[{"method": "ga"}, {"method": "graddiff"}])
    out = tmp_path / "out"
    code = main(
        ["unlearn", "--config", str(path), "--out", str(out), "--seed", "2", "--method", "graddiff"],
        container,
    )
    assert code == 0
    records = ReportStore(out).run_records()
    assert [(r["label"], r["seed"]) for r in records] == [("graddiff", 2)]


def test_pretrain_and_export(tmp_path, config_file, container):
    """
    `pretrain` caches θ₀ and summarizes it; `export-data` writes the facts.
    """
    out = tmp_path / "out"
    path = str(config_file())
    assert main(["pretrain", "--config", path, "--out", str(out)], container) == 0
    summary = json.loads((out / "reports" / "pretrain.json").read_text())
    assert summary["experiment"] == "tiny" and summary["seeds"][0]["seed"] == 1
    assert (out / summary["seeds"][0]["checkpoint"]).exists()

    assert main(["export-data", "--config", path, "--out", str(out)], container) == 0
    lines = (out / "data" / "facts_1.csv").read_text().splitlines()
    assert len(lines) == 31


def test_evaluate_stored_checkpoint(tmp_path, config_file, container):
    """
    `evaluate` scores a checkpoint written by an earlier run.
    """
    out = tmp_path / "out"
    path = str(config_file())
    assert main(["pretrain", "--config", path, "--out", str(out)], container) == 0
    ckpt = next((out / "cache").glob("*.params"))
    assert main(["evaluate", "--config", path, "--checkpoint", str(ckpt), "--out", str(out)], container) == 0
    report = json.loads((out / "reports" / f"evaluate_{ckpt.stem}.json").read_text())
    assert set(report["per_seed"][0]["report"]) >= {"fa", "ra", "q_int4", "cert"}


def test_sweep_command(tmp_path, config_file, container):
    """
    `sweep` accepts explicit values and writes frontier.csv.
    """
    out = tmp_path / "out"
    code = main(
        ["sweep", "--config", str(config_file()), "--out", str(out), "--axis", "warmup", "--values", "on", "off"],
        container,
    )
    assert code == 0
    rows = (out / "reports" / "frontier.csv").read_text().splitlines()
    assert len(rows) == 3


def test_failed_run_exit_status(tmp_path, config_file, container, monkeypatch):
    """
    A run failure yields exit status 1 while reports are still written.
    """
    import durable_lab.harness as harness
    from durable_lab.errors import DivergenceError

    def boom(*_a, **_kw):
        raise DivergenceError("unlearn", 3)

    monkeypatch.setattr(harness, "run_method", boom)
    out = tmp_path / "out"
    assert main(["unlearn", "--config", str(config_file()), "--out", str(out)], container) == 1
    assert (out / "reports" / "summary.json").exists()


# ---------------------------------------------------------------------------#
# Errors
# ---------------------------------------------------------------------------#


def test_bad_config_names_field(tmp_path, experiment_doc, container, capsys):
    """
    An invalid config exits with status 2 and a one-line diagnostic.
    """
    doc = experiment_doc()
    doc["dataset"] = {**doc["dataset"], "n_entities": 0}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert main(["unlearn", "--config", str(path), "--out", str(tmp_path / "o")], container) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: dataset.n_entities") and err.count("\n") == 1


def test_missing_checkpoint(tmp_path, config_file, container):
    """
    Evaluating a checkpoint that does not exist exits with status 2.
    """
    code = main(
        [
            "evaluate", "--config", str(config_file()), "--out", str(tmp_path / "o"),
            "--checkpoint", str(tmp_path / "nope.params"),
        ],
        container,
    )
    assert code == 2


def test_unknown_subcommand_exits():
    """
    argparse rejects unknown subcommands.
    """
    with pytest.raises(SystemExit):
        main(["frobnicate"])


# ---------------------------------------------------------------------------#
# report / publish
# ---------------------------------------------------------------------------#


def test_report_and_publish(tmp_path, config_file, container, mock_s3):
    """
    `report` rebuilds from stored records; `publish` uploads them to S3.
    """
    out = tmp_path / "out"
    assert main(["unlearn", "--config", str(config_file()), "--out", str(out)], container) == 0
    (out / "reports" / "runs.csv").unlink()
    assert main(["report", "--dir", str(out), "--name", "tiny"], container) == 0
    assert (out / "reports" / "runs.csv").exists()

    assert main(["publish", "--dir", str(out), "--experiment", "tiny"], container) == 0
    assert mock_s3.completed is True and mock_s3.key.startswith("tiny/")
    assert len(mock_s3.body().splitlines()) == 1


def test_publish_without_records(tmp_path, container, capsys):
    """
    Publishing an empty directory is an error, not an empty object.
    """
    assert main(["publish", "--dir", str(tmp_path)], container) == 2
    assert "no run records" in capsys.readouterr().err
