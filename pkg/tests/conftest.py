from __future__ import annotations

import gzip
from typing import Any, Dict, List

import numpy as np
import pytest

from durable_lab.datagen import FactDataset, generate
from durable_lab.factmodel import ModelConfig, ParamSet, Regime, init_model
from durable_lab.publisher import _crc32_base64


# ---------------------------------------------------------------------------#
# Small model and dataset
# ---------------------------------------------------------------------------#
TINY_MODEL = dict(
    entity_vocab=14,
    attribute_vocab=3,
    value_vocab=5,
    embed_dim=3,
    hidden_dim=4,
    adapter_rank=2,
    adapter_scale=2.0,
)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    """A model small enough to finite-difference every coordinate."""
    return ModelConfig(seed=0, **TINY_MODEL)


@pytest.fixture
def tiny_dataset() -> FactDataset:
    """10 entities x 3 attributes; 2 forget, 2 holdout, 6 retain entities."""
    return generate(
        n_entities=10, n_attributes=3, value_vocab=5, forget_entities=2, holdout_entities=2, seed=0
    )


@pytest.fixture
def tiny_params(tiny_cfg: ModelConfig) -> ParamSet:
    """
    Initialized tiny model with non-zero adapter B matrices, everything
    trainable, so every parameter receives a gradient.
    """
    params = init_model(tiny_cfg)
    rng = np.random.default_rng(7)
    b_values = {
        n: rng.normal(scale=0.3, size=params[n].shape) for n in params if n.endswith("lora_B")
    }
    return params.replace(b_values).with_regime(Regime.ALL)


def tiny_experiment(**overrides: Any) -> Dict[str, Any]:
    """Experiment document that runs in well under a second per run."""
    doc: Dict[str, Any] = {
        "schema_version": 1,
        "name": "tiny",
        "dataset": {
            "n_entities": 10,
            "n_attributes": 3,
            "value_vocab": 5,
            "forget_entities": 2,
            "holdout_entities": 2,
            "unrelated_entities": 4,
        },
        "model": {"preset": "default", **TINY_MODEL},
        "pretrain": {"epochs": 3, "lr": 0.01, "batch_size": 8},
        "unlearn": {"steps": 4, "lr": 0.001, "batch_size": 2},
        "methods": [{"method": "ga"}],
        "seeds": [1],
        "attacks": {"quant": True},
        "ablation": {"lambdas": [2.0, 4.0], "track_step": 2},
    }
    doc.update(overrides)
    return doc


@pytest.fixture
def experiment_doc():
    """Factory for tiny experiment documents."""
    return tiny_experiment


# ---------------------------------------------------------------------------#
# S3
# ---------------------------------------------------------------------------#
class DummyS3:
    """
    Mock boto3 S3 client that simulates multipart upload behavior.
    Used for testing ReportPublisher without actual S3 access.
    """

    def __init__(self):
        self.parts: List[Dict[str, Any]] = []
        self.completed = False
        self.aborted = False
        self.key: str | None = None

    def create_multipart_upload(self, *, Key: str, **_kw):
        """Simulates initiating a multipart upload."""
        self.key = Key
        return {"UploadId": "u-1"}

    def upload_part(self, *, PartNumber: int, Body: bytes, **_kw):
        """Records part upload and returns a mock ETag."""
        self.parts.append({"PartNumber": PartNumber, "Body": Body})
        return {"ETag": f"etag-{PartNumber}"}

    def complete_multipart_upload(self, *, MultipartUpload: Dict[str, Any], **_kw):
        """
        Validates that all parts match in part number and CRC32,
        and marks upload as complete.
        """
        for sent, recorded in zip(MultipartUpload["Parts"], self.parts, strict=True):
            assert sent["PartNumber"] == recorded["PartNumber"]
            assert sent["ChecksumCRC32"] == _crc32_base64(recorded["Body"])
        self.completed = True

    def abort_multipart_upload(self, **_kw):
        """Simulates aborting a multipart upload."""
        self.aborted = True
        self.completed = False

    def body(self) -> bytes:
        """Concatenated uploaded parts, decompressed."""
        return gzip.decompress(b"".join(p["Body"] for p in self.parts))


@pytest.fixture
def mock_s3(monkeypatch) -> DummyS3:
    """DummyS3 installed in place of boto3.client."""
    s3 = DummyS3()
    monkeypatch.setattr("boto3.client", lambda *_a, **_kw: s3)
    return s3


@pytest.fixture
def failing_s3(monkeypatch) -> DummyS3:
    """DummyS3 whose part uploads fail."""

    class FailingS3(DummyS3):
        def upload_part(self, **_kw):
            raise RuntimeError("boom")

    s3 = FailingS3()
    monkeypatch.setattr("boto3.client", lambda *_a, **_kw: s3)
    return s3
