"""Embedded persistence for the server: a sqlite-backed job store and a
content-addressed artifact store on local disk.

Jobs move monotonically through queued -> sanitizing-received ->
fine_tuning -> generating -> training -> evaluating -> done, with failed
reachable from any non-done state.  Artifacts are immutable blobs addressed
by the sha256 of their content.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import InvalidArgumentError, NotFoundError

JOB_STATES = (
    "queued",
    "sanitizing-received",
    "fine_tuning",
    "generating",
    "training",
    "evaluating",
    "done",
    "failed",
)

TERMINAL_STATES = ("done", "failed")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class ArtifactRef:
    kind: str
    address: str
    media_type: str


@dataclass
class Job:
    id: str
    state: str
    created: str
    updated: str
    error: str | None = None
    artifacts: list[ArtifactRef] = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "id": self.id,
            "state": self.state,
            "created": self.created,
            "updated": self.updated,
            "error": self.error,
            "artifacts": [
                {"kind": a.kind, "address": a.address, "media_type": a.media_type}
                for a in self.artifacts
            ],
        }


class ServerStore:
    """Jobs + artifact index in one sqlite file; artifact blobs on disk."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifact_dir = self.root / "artifacts"
        self.artifact_dir.mkdir(exist_ok=True)
        self._lock = threading.Lock()
        self._db = sqlite3.connect(self.root / "server.sqlite", check_same_thread=False)
        with self._lock:
            self._db.executescript(
                """
                CREATE TABLE IF NOT EXISTS jobs (
                    id TEXT PRIMARY KEY,
                    state TEXT NOT NULL,
                    created TEXT NOT NULL,
                    updated TEXT NOT NULL,
                    error TEXT,
                    artifacts TEXT NOT NULL DEFAULT '[]',
                    idempotency_key TEXT UNIQUE,
                    body_sha256 TEXT NOT NULL,
                    bundle TEXT NOT NULL
                );
                CREATE TABLE IF NOT EXISTS artifacts (
                    address TEXT PRIMARY KEY,
                    kind TEXT NOT NULL,
                    media_type TEXT NOT NULL
                );
                """
            )
            self._db.commit()

    def close(self) -> None:
        with self._lock:
            self._db.close()

    # -- jobs -----------------------------------------------------------------

    def create_job(self, job_id: str, bundle_body: str, idempotency_key: str | None) -> Job:
        now = _now()
        digest = hashlib.sha256(bundle_body.encode()).hexdigest()
        with self._lock:
            self._db.execute(
                "INSERT INTO jobs (id, state, created, updated, artifacts, idempotency_key,"
                " body_sha256, bundle) VALUES (?, 'queued', ?, ?, '[]', ?, ?, ?)",
                (job_id, now, now, idempotency_key, digest, bundle_body),
            )
            self._db.commit()
        return Job(job_id, "queued", now, now)

    def find_by_idempotency_key(self, key: str) -> tuple[Job, str] | None:
        with self._lock:
            row = self._db.execute(
                "SELECT id, body_sha256 FROM jobs WHERE idempotency_key = ?", (key,)
            ).fetchone()
        if row is None:
            return None
        return self.get_job(row[0]), row[1]

    def get_job(self, job_id: str) -> Job:
        with self._lock:
            row = self._db.execute(
                "SELECT id, state, created, updated, error, artifacts FROM jobs WHERE id = ?",
                (job_id,),
            ).fetchone()
        if row is None:
            raise NotFoundError(f"no job with id {job_id!r}")
        artifacts = [ArtifactRef(**a) for a in json.loads(row[5])]
        return Job(row[0], row[1], row[2], row[3], row[4], artifacts)

    def job_bundle(self, job_id: str) -> str:
        with self._lock:
            row = self._db.execute("SELECT bundle FROM jobs WHERE id = ?", (job_id,)).fetchone()
        if row is None:
            raise NotFoundError(f"no job with id {job_id!r}")
        return row[0]

    def pending_job_ids(self) -> list[str]:
        with self._lock:
            rows = self._db.execute(
                "SELECT id FROM jobs WHERE state NOT IN ('done', 'failed') ORDER BY created"
            ).fetchall()
        return [r[0] for r in rows]

    def transition(
        self,
        job_id: str,
        state: str,
        *,
        error: str | None = None,
        artifacts: list[ArtifactRef] | None = None,
    ) -> Job:
        if state not in JOB_STATES:
            raise InvalidArgumentError(f"unknown job state {state!r}")
        current = self.get_job(job_id)
        order = JOB_STATES.index
        if state == "failed":
            if current.state == "done":
                raise InvalidArgumentError("cannot fail a completed job")
        elif order(state) < order(current.state):
            raise InvalidArgumentError(
                f"job state cannot go backwards ({current.state} -> {state})"
            )
        artifact_json = json.dumps(
            [
                {"kind": a.kind, "address": a.address, "media_type": a.media_type}
                for a in (artifacts if artifacts is not None else current.artifacts)
            ]
        )
        with self._lock:
            self._db.execute(
                "UPDATE jobs SET state = ?, updated = ?, error = ?, artifacts = ? WHERE id = ?",
                (state, _now(), error, artifact_json, job_id),
            )
            self._db.commit()
        return self.get_job(job_id)

    # -- artifacts ---------------------------------------------------------------

    def put_artifact(self, kind: str, media_type: str, data: bytes) -> ArtifactRef:
        address = hashlib.sha256(data).hexdigest()
        path = self.artifact_dir / address
        if not path.exists():
            path.write_bytes(data)
        with self._lock:
            self._db.execute(
                "INSERT OR IGNORE INTO artifacts (address, kind, media_type) VALUES (?, ?, ?)",
                (address, kind, media_type),
            )
            self._db.commit()
        return ArtifactRef(kind, address, media_type)

    def get_artifact(self, address: str) -> tuple[bytes, str, str]:
        with self._lock:
            row = self._db.execute(
                "SELECT kind, media_type FROM artifacts WHERE address = ?", (address,)
            ).fetchone()
        path = self.artifact_dir / address
        if row is None or not path.exists():
            raise NotFoundError(f"no artifact at address {address!r}")
        return path.read_bytes(), row[1], row[0]
