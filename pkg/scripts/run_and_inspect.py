#!/usr/bin/env python3
"""
Local end-to-end check in one command.

Runs one seed of the configured experiment, publishes the run records to
the S3 endpoint from ``DURABLE_S3_ENDPOINT`` (LocalStack under
docker-compose) and prints the uploaded object back.
"""

import gzip
import json
import os
import sys
from io import BytesIO
from pathlib import Path

import boto3

# ----------------------------------------
# Environment / settings
# ----------------------------------------
os.environ.setdefault("AWS_ACCESS_KEY_ID", "dummy")
os.environ.setdefault("AWS_SECRET_ACCESS_KEY", "dummy")
os.environ.setdefault("AWS_DEFAULT_REGION", "us-east-1")
os.environ.setdefault("DURABLE_S3_ENDPOINT", "http://localstack:4566")
os.environ.setdefault("DURABLE_OUTPUT_ROOT", "runs/inspect")

CONFIG = os.getenv("EXPERIMENT_CONFIG", "configs/table1-demo.json")
SEED = os.getenv("SEED", "42")
OUT = Path(os.environ["DURABLE_OUTPUT_ROOT"])

# ----------------------------------------
# Run, then publish
# ----------------------------------------
sys.path.insert(0, "src")
from durable_lab.container import AppContainer  # noqa: E402
from durable_lab.reports import ReportStore  # noqa: E402
from durable_lab.runner import main  # noqa: E402

code = main(["unlearn", "--config", CONFIG, "--seed", SEED, "--method", "ga", "--method", "saf"])
if code != 0:
    sys.exit(code)

container = AppContainer()
records = ReportStore(OUT).run_records()
publisher = container.publisher()
s3_key = publisher.publish(records, experiment=OUT.name)
print(f"\nPublished {len(records)} run records to s3://{publisher.bucket}/{s3_key}\n")

# ----------------------------------------
# Read the object back
# ----------------------------------------
s3 = boto3.client("s3", endpoint_url=os.environ["DURABLE_S3_ENDPOINT"])
obj = s3.get_object(Bucket=publisher.bucket, Key=s3_key)

with gzip.GzipFile(fileobj=BytesIO(obj["Body"].read())) as f:
    for line in f.read().decode("utf-8").splitlines():
        rec = json.loads(line)
        rep = rec["report"] or {}
        print(f"{rec['label']:>10} seed={rec['seed']}  fa={rep.get('fa')}  q_int4={rep.get('q_int4')}  cert={rep.get('cert')}")
