"""
On-disk layout of an experiment's outputs.

Every file is written to a temporary sibling first and moved into place with
``os.replace``, so an interrupted run never leaves a half-written record
behind and previously written records stay intact.

Layout under the output root:

    checkpoints/<fingerprint>.params (+ .manifest)
    cache/<pretrain-fingerprint>.params
    runs/<fingerprint>.json
    reports/*.csv, reports/*.json
    data/*.csv
    logs/run.log, logs/timings.csv
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence

from .factmodel import ParamSet, load_params, save_params
from .logger import get_logger

logger = get_logger(__name__)


def to_json(payload: Any) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: csv_cell(row.get(c)) for c in columns})
    return buf.getvalue()


class ReportStore:
    """Atomic writer rooted at one output directory."""

    def __init__(self, root: Path | str) -> None:
        self.root = Path(root)
        self._lock = threading.Lock()

    def path(self, relative: str) -> Path:
        return self.root / relative

    def write_bytes(self, relative: str, payload: bytes) -> Path:
        target = self.path(relative)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        try:
            with open(tmp, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, target)
        finally:
            if tmp.exists():
                tmp.unlink()
        logger.debug("wrote %s (%d bytes)", target, len(payload))
        return target

    def write_text(self, relative: str, text: str) -> Path:
        return self.write_bytes(relative, text.encode("utf-8"))

    def write_json(self, relative: str, payload: Any) -> Path:
        return self.write_text(relative, to_json(payload))

    def write_csv(
        self, relative: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]
    ) -> Path:
        return self.write_text(relative, render_csv(columns, rows))

    def read_json(self, relative: str) -> Any:
        return json.loads(self.path(relative).read_text(encoding="utf-8"))

    def exists(self, relative: str) -> bool:
        return self.path(relative).exists()

    # checkpoints -------------------------------------------------------- #
    def save_params(self, relative: str, params: ParamSet) -> Path:
        target = self.path(relative)
        with self._lock:
            save_params(params, target)
        return target

    def load_params(self, relative: str) -> ParamSet:
        return load_params(self.path(relative))

    # run records ------------------------------------------------------- #
    def run_records(self) -> List[Dict[str, Any]]:
        """All stored run records in enumeration order."""
        folder = self.path("runs")
        if not folder.is_dir():
            return []
        records = [
            json.loads(p.read_text(encoding="utf-8")) for p in sorted(folder.glob("*.json"))
        ]
        return sorted(records, key=lambda r: (r.get("index", 0), r.get("fingerprint", "")))
