"""
Publishing of run records to Amazon S3.

Records are serialized as gzip-compressed JSON Lines and streamed with a
multipart upload. Every part carries a CRC32 checksum, and any failure
aborts the upload so no partial object is left in the bucket.

Object keys follow:

    <prefix><experiment>/YYYY/MM/DD/HHMMSS.jsonl.gz
"""

from __future__ import annotations

import base64
import gzip
import io
import json
import math
import zlib
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Iterator, List, Mapping

import boto3

from .logger import get_logger

logger = get_logger(__name__)
PART_SIZE = 8 * 1024 * 1024  # 8 MiB, above the S3 multipart minimum


def _crc32_base64(data: bytes) -> str:
    """
    Base64-encoded big-endian CRC32 of ``data``, the form S3 expects in
    ``ChecksumCRC32``.
    """
    crc_val = zlib.crc32(data) & 0xFFFFFFFF
    return base64.b64encode(crc_val.to_bytes(4, "big")).decode()


def _record_line(record: Mapping[str, Any]) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode() + b"\n"


def _gzip_parts(records: Iterable[Mapping[str, Any]], part_size: int) -> Iterator[bytes]:
    """
    Compress records into independent gzip members of roughly ``part_size`` bytes.

    Concatenated gzip members form a valid gzip stream, so the uploaded
    parts decompress as one JSON Lines file.
    """
    buf = io.BytesIO()
    gz = gzip.GzipFile(fileobj=buf, mode="wb", mtime=0)
    for record in records:
        gz.write(_record_line(record))
        if buf.tell() >= part_size:
            gz.close()
            yield buf.getvalue()
            buf = io.BytesIO()
            gz = gzip.GzipFile(fileobj=buf, mode="wb", mtime=0)
    gz.close()
    yield buf.getvalue()


class ReportPublisher:
    """
    Uploads run records of one experiment to S3.

    Attributes:
    -----------
    bucket : str
        Destination bucket.
    prefix : str
        Key prefix, normalized to end with '/' when given.
    s3 : boto3.client
        S3 client, optionally pointed at a custom endpoint (e.g. LocalStack).
    """

    def __init__(
        self,
        bucket: str,
        prefix: str = "",
        endpoint_url: str | None = None,
        region: str | None = None,
    ) -> None:
        self.bucket = bucket
        self.prefix = (prefix.rstrip("/") + "/") if prefix else ""
        self.s3 = boto3.client("s3", endpoint_url=endpoint_url, region_name=region)

    def object_key(self, experiment: str, now: datetime | None = None) -> str:
        now = now or datetime.now(timezone.utc)
        return f"{self.prefix}{experiment}/{now.strftime('%Y/%m/%d')}/{now.strftime('%H%M%S')}.jsonl.gz"

    def publish(self, records: Iterable[Mapping[str, Any]], *, experiment: str) -> str:
        """
        Stream ``records`` to a new object and return its key.

        Raises:
        -------
        Exception
            Whatever the S3 client raised; the multipart upload is aborted first.
        """
        key = self.object_key(experiment)
        logger.info("Start multipart upload: s3://%s/%s", self.bucket, key)
        mp = self.s3.create_multipart_upload(Bucket=self.bucket, Key=key, ChecksumAlgorithm="CRC32")
        upload_id: str = mp["UploadId"]
        parts: List[Dict[str, Any]] = []

        try:
            for part_no, payload in enumerate(_gzip_parts(records, PART_SIZE), start=1):
                parts.append(self._upload_part(payload, key, upload_id, part_no))

            self.s3.complete_multipart_upload(
                Bucket=self.bucket,
                Key=key,
                UploadId=upload_id,
                MultipartUpload={
                    "Parts": [
                        {
                            "PartNumber": p["PartNumber"],
                            "ETag": p["ETag"],
                            "ChecksumCRC32": p["ChecksumCRC32"],
                        }
                        for p in parts
                    ]
                },
            )
        except Exception:
            logger.exception("Abort multipart upload due to error")
            self.s3.abort_multipart_upload(Bucket=self.bucket, Key=key, UploadId=upload_id)
            raise

        size_mb = math.ceil(sum(p["Size"] for p in parts) / 1_048_576)
        logger.info("Published %s (%d parts, ~%d MiB)", key, len(parts), size_mb)
        return key

    def _upload_part(self, payload: bytes, key: str, upload_id: str, part_no: int) -> Dict[str, Any]:
        checksum_b64 = _crc32_base64(payload)
        logger.debug("Uploading part %d (size=%d bytes, crc32=%s)", part_no, len(payload), checksum_b64)
        resp = self.s3.upload_part(
            Bucket=self.bucket,
            Key=key,
            PartNumber=part_no,
            UploadId=upload_id,
            Body=payload,
            ChecksumCRC32=checksum_b64,
        )
        return {
            "PartNumber": part_no,
            "ETag": resp.get("ETag", ""),
            "Size": len(payload),
            "ChecksumCRC32": checksum_b64,
        }
