"""
Process-level configuration for the durability lab.

Runtime settings are read from environment variables when the module is
imported, mirroring how the lab is driven from shells, CI jobs and
containers. Experiment settings (datasets, methods, sweeps) live in JSON
files and are handled by ``durable_lab.experiment``.

Components:
-----------
- _env_flag():
    Helper that parses boolean-ish environment variables.

- Settings (dataclass):
    Immutable bundle of environment-derived settings injected through
    ``AppContainer``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass


def _env_flag(name: str, default: bool = False) -> bool:
    """
    Interpret an environment variable as a boolean flag.

    ``1``, ``true``, ``yes`` and ``on`` (case-insensitive) are true; an unset
    variable yields ``default``.
    """
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in {"1", "true", "yes", "on"}


@dataclass(frozen=True, slots=True)
class Settings:
    """
    Lab configuration based on environment variables.

    Attributes:
        output_root (Optional[str]): Directory every subcommand writes under;
            unset falls back to the experiment's ``output_dir`` and then ``runs``.
        workers (int): Maximum number of independent runs executed at once.
        record_runtime (bool): Put wall-clock seconds into report bodies.
            Off by default so repeated runs produce byte-identical reports.

        aws_region (str): AWS region used for report publishing.
        s3_bucket (str): Destination bucket for published run records.
        s3_prefix (str): Key prefix inside the bucket.
        s3_endpoint_url (Optional[str]): Custom endpoint (e.g. LocalStack).
    """

    # ── Local outputs ─────────────────────────────────────
    output_root: str | None = os.getenv("DURABLE_OUTPUT_ROOT") or None
    workers: int = int(os.getenv("DURABLE_WORKERS", "1"))
    record_runtime: bool = _env_flag("DURABLE_RECORD_RUNTIME")

    # ── Report publishing (S3) ────────────────────────────
    aws_region: str = os.getenv("AWS_REGION", "ap-northeast-1")
    s3_bucket: str = os.getenv("DURABLE_S3_BUCKET", "durable-lab-reports")
    s3_prefix: str = os.getenv("DURABLE_S3_PREFIX", "")
    s3_endpoint_url: str | None = os.getenv("DURABLE_S3_ENDPOINT") or None
