"""The federation server: authentication, upload pipeline and stats log."""

from __future__ import annotations

import itertools
import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..errors import ArchMismatch, Conflict, InvalidRecord, NotFound, Unauthorized
from ..package import MergeConfig, ModelPackage, decode_package, encode_package, merge_packages, utc_now
from ..records import StatsRecord, client_hash
from .registry import ModelRegistry
from .validation import Segmenter, ValidationConfig, ValidationSet, validate_model

log = logging.getLogger(__name__)

QUEUED = "queued"
VALIDATING = "validating"
PUBLISHED = "merged-published"
REJECTED_UPLOAD = "rejected-upload"
REJECTED_MERGE = "rejected-merge"
TERMINAL = frozenset({PUBLISHED, REJECTED_UPLOAD, REJECTED_MERGE})


@dataclass
class TaskConfig:
    task_id: str
    validation_set: ValidationSet | None = None
    dsc_threshold: float = 0.5
    merge_alpha: float = 0.5

    @property
    def validation(self) -> ValidationConfig:
        return ValidationConfig(self.dsc_threshold)


@dataclass
class UploadJob:
    job_id: str
    task_id: str
    candidate: ModelPackage = field(repr=False)
    enqueued_at: str
    client: str = ""
    status: str = QUEUED
    candidate_dsc: float | None = None
    merged_dsc: float | None = None
    published_version: int | None = None
    base_version: int | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "task_id": self.task_id,
            "status": self.status,
            "enqueued_at": self.enqueued_at,
            "candidate_hash": self.candidate.hash_hex,
            "candidate_parent_version": self.candidate.parent_version,
            "candidate_dsc": self.candidate_dsc,
            "merged_dsc": self.merged_dsc,
            "base_version": self.base_version,
            "published_version": self.published_version,
            "error": self.error,
        }


def load_api_keys(path) -> dict[str, str]:
    """Parse ``key role`` lines (role: admin | user); blank lines and ``#`` comments skipped."""
    keys = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("admin", "user"):
            raise ValueError(f"{path}:{lineno}: expected 'KEY admin|user'")
        keys[parts[0]] = parts[1]
    return keys


class FederationServer:
    """In-process server core; the HTTP layer in :mod:`fedincr.server.http` wraps it.

    With ``inline=True`` uploads are processed synchronously inside
    :meth:`submit_model` (deterministic simulations). Otherwise one worker
    thread per task drains that task's FIFO queue.
    """

    def __init__(
        self,
        store_path,
        api_keys: dict[str, str],
        tasks: dict[str, TaskConfig] | list[TaskConfig],
        *,
        inline: bool = False,
        clock: Callable[[], str] = utc_now,
        segmenter: Segmenter | None = None,
        fault_hook: Callable[[str], None] | None = None,
    ):
        self.store = Path(store_path)
        self.registry = ModelRegistry(self.store, fault_hook=fault_hook)
        self.api_keys = dict(api_keys)
        if isinstance(tasks, list):
            tasks = {t.task_id: t for t in tasks}
        self.tasks = dict(tasks)
        self.inline = inline
        self.clock = clock
        self.fault_hook = fault_hook
        self.segmenter = segmenter
        self.jobs: dict[str, UploadJob] = {}
        self._job_ids = itertools.count(1)
        self._jobs_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._pipeline_locks = {t: threading.Lock() for t in self.tasks}
        self._queues: dict[str, queue.Queue] = {}
        self._workers: list[threading.Thread] = []
        self._latest_cache: dict[str, ModelPackage] = {}
        if not inline:
            self.start()

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> None:
        for task in self.tasks:
            if task in self._queues:
                continue
            q: queue.Queue = queue.Queue()
            self._queues[task] = q
            t = threading.Thread(target=self._worker, args=(q,), name=f"pipeline-{task}", daemon=True)
            t.start()
            self._workers.append(t)

    def stop(self) -> None:
        for q in self._queues.values():
            q.put(None)
        for t in self._workers:
            t.join()
        self._queues.clear()
        self._workers.clear()

    def wait_idle(self) -> None:
        for q in self._queues.values():
            q.join()

    def _worker(self, q: queue.Queue) -> None:
        while True:
            job = q.get()
            try:
                if job is None:
                    return
                self.process_job(job)
            except Exception:  # keep the worker alive; the job records the failure
                log.exception("pipeline failure")
            finally:
                q.task_done()

    # -- auth --------------------------------------------------------------------

    def authenticate(self, key: str | None, role: str | None = None) -> str:
        granted = self.api_keys.get(key or "")
        if granted is None or (role == "admin" and granted != "admin"):
            raise Unauthorized("invalid API key")
        return granted

    def _task(self, task: str) -> TaskConfig:
        try:
            return self.tasks[task]
        except KeyError:
            raise NotFound(f"unknown task {task!r}") from None

    # -- model endpoints -----------------------------------------------------------

    def publish_initial(self, task: str, pkg: ModelPackage | bytes, key: str) -> int:
        self.authenticate(key, "admin")
        return self.seed_task(task, pkg)

    def seed_task(self, task: str, pkg: ModelPackage | bytes) -> int:
        """Publish ``pkg`` as version 1 of an empty task (no auth; for local bootstrap)."""
        self._task(task)
        if isinstance(pkg, (bytes, bytearray)):
            pkg = decode_package(pkg)
        with self._pipeline_locks[task]:
            if self.registry.has_task(task):
                raise Conflict(f"task {task!r} already has a published model")
            if pkg.task_id != task:
                raise ArchMismatch(f"package is for task {pkg.task_id!r}")
            first = pkg.evolve(version=1, parent_version=None)
            return self.registry.publish(task, encode_package(first), {"published_at": self.clock(), "source": "initial"})

    def get_latest(self, task: str, key: str) -> bytes:
        self.authenticate(key)
        self._task(task)
        return self.registry.read(task)

    def get_version(self, task: str, version: int, key: str) -> bytes:
        self.authenticate(key)
        self._task(task)
        return self.registry.read(task, version)

    def list_history(self, task: str, key: str) -> list[dict]:
        self.authenticate(key)
        self._task(task)
        return self.registry.history(task)

    def latest_package(self, task: str) -> ModelPackage:
        version = self.registry.latest_version(task)
        cached = self._latest_cache.get(task)
        if cached is None or cached.version != version:
            cached = decode_package(self.registry.read(task, version))
            self._latest_cache[task] = cached
        return cached

    def submit_model(self, task: str, data: bytes, key: str) -> str:
        self.authenticate(key)
        self._task(task)
        candidate = decode_package(data)
        if not self.registry.has_task(task):
            raise NotFound(f"task {task!r} has no published model yet")
        if candidate.task_id != task:
            raise ArchMismatch(f"package is for task {candidate.task_id!r}")
        if candidate.descriptor != self.latest_package(task).descriptor:
            raise ArchMismatch("package architecture does not match the task model")
        with self._jobs_lock:
            job = UploadJob(f"job-{next(self._job_ids):06d}", task, candidate, self.clock(), client_hash(key))
            self.jobs[job.job_id] = job
            if not self.inline:
                self._queues[task].put(job)
        if self.inline:
            self.process_job(job)
        return job.job_id

    def job_status(self, job_id: str, key: str) -> dict:
        self.authenticate(key)
        try:
            return self.jobs[job_id].to_dict()
        except KeyError:
            raise NotFound(f"unknown job {job_id!r}") from None

    # -- pipeline ------------------------------------------------------------------

    def _validate(self, pkg: ModelPackage, cfg: TaskConfig):
        kwargs = {} if self.segmenter is None else {"segmenter": self.segmenter}
        return validate_model(pkg, cfg.validation_set, cfg.validation, **kwargs)

    def _hook(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    def process_job(self, job: UploadJob) -> str:
        """validate candidate -> merge with current latest -> revalidate -> publish."""
        cfg = self._task(job.task_id)
        with self._pipeline_locks[job.task_id]:
            if job.status in TERMINAL:
                return job.status
            job.status = VALIDATING
            try:
                ok, job.candidate_dsc = self._validate(job.candidate, cfg)
                if not ok:
                    job.status = REJECTED_UPLOAD
                    return job.status
                self._hook("merge")
                base = self.latest_package(job.task_id)
                job.base_version = base.version
                merged = merge_packages(
                    base, job.candidate, MergeConfig(cfg.merge_alpha), version=base.version + 1, created_at=self.clock()
                )
                ok, job.merged_dsc = self._validate(merged, cfg)
                if not ok:
                    job.status = REJECTED_MERGE
                    return job.status
                self._hook("publish")
                job.published_version = self.registry.publish(
                    job.task_id,
                    encode_package(merged),
                    {
                        "published_at": self.clock(),
                        "source": "merge",
                        "job_id": job.job_id,
                        "validation_dsc": job.merged_dsc,
                        "candidate_dsc": job.candidate_dsc,
                    },
                )
                job.status = PUBLISHED
            except Exception as exc:
                job.error = str(exc)
                job.status = REJECTED_UPLOAD if job.merged_dsc is None and job.base_version is None else REJECTED_MERGE
                log.exception("job %s failed", job.job_id)
            return job.status

    # -- stats -------------------------------------------------------------------------

    @property
    def stats_path(self) -> Path:
        return self.store / "stats.log"

    def record_stats(self, record: dict | StatsRecord, key: str) -> StatsRecord:
        """Append a record; the client hash is derived from the caller's key."""
        self.authenticate(key)
        if isinstance(record, StatsRecord):
            record = record.to_dict()
        if not isinstance(record, dict):
            raise InvalidRecord("record must be a JSON object")
        rec = StatsRecord.from_dict({**record, "client_hash": client_hash(key)})
        line = json.dumps(rec.to_dict(), sort_keys=True)
        with self._stats_lock:
            with open(self.stats_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return rec
