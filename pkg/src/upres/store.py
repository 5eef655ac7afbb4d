"""File-system persistence: JSON job records plus a content-addressed blob store.

Blobs are PNG bytes keyed by their SHA-256; writing the same bytes twice
yields one blob. All writes go through write-temp-then-rename, so a crash
never leaves a half-written record behind.
"""

from __future__ import annotations

import hashlib
import json
import os
import uuid
from pathlib import Path

from .errors import NotFoundError


class JobStore:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.job_dir = self.root / "jobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.job_dir.mkdir(parents=True, exist_ok=True)

    # -- blobs ---------------------------------------------------------------

    def _blob_path(self, digest: str) -> Path:
        return self.blob_dir / f"{digest}.png"

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        path = self._blob_path(digest)
        if not path.exists():
            self._atomic_write(path, data)
        return digest

    def get_blob(self, digest: str) -> bytes:
        path = self._blob_path(digest)
        if not path.exists():
            raise NotFoundError(f"no blob {digest}")
        return path.read_bytes()

    def has_blob(self, digest: str) -> bool:
        return self._blob_path(digest).exists()

    def list_blobs(self) -> list[str]:
        return sorted(p.stem for p in self.blob_dir.glob("*.png"))

    # -- job records -----------------------------------------------------------

    def _job_path(self, job_id: str) -> Path:
        return self.job_dir / f"{job_id}.json"

    def save_job(self, record: dict) -> None:
        job_id = record["id"]
        data = json.dumps(record, indent=2, sort_keys=True).encode()
        self._atomic_write(self._job_path(job_id), data)

    def load_job(self, job_id: str) -> dict:
        path = self._job_path(job_id)
        if not path.exists():
            raise NotFoundError(f"no job {job_id}")
        return json.loads(path.read_text())

    def has_job(self, job_id: str) -> bool:
        return self._job_path(job_id).exists()

    def list_jobs(self) -> list[dict]:
        records = [json.loads(p.read_text()) for p in self.job_dir.glob("*.json")]
        records.sort(key=lambda r: (r.get("created_at", 0), r["id"]))
        return records

    def delete_job(self, job_id: str) -> None:
        path = self._job_path(job_id)
        if not path.exists():
            raise NotFoundError(f"no job {job_id}")
        path.unlink()

    # -- maintenance ------------------------------------------------------------

    def gc(self, live_refs: set[str]) -> list[str]:
        """Delete blobs not in live_refs; returns the removed digests."""
        removed = []
        for digest in self.list_blobs():
            if digest not in live_refs:
                self._blob_path(digest).unlink()
                removed.append(digest)
        return removed

    def _atomic_write(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)
