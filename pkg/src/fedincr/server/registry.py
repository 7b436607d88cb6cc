"""Versioned on-disk model store.

Layout::

    store/{task}/v{N}.fpkg      immutable published packages
    store/{task}/registry.json  journal of published versions (source of truth)
    store/stats.log             JSON-lines usage statistics

A version is published by writing the package to a temp file and renaming it
into place, then rewriting the journal the same way. A crash between the two
steps leaves an orphan ``.fpkg`` that is not in the journal; it is discarded
on the next open.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from pathlib import Path
from typing import Callable

from ..errors import Conflict, NotFound, PackageError
from ..package import decode_package

log = logging.getLogger(__name__)


def atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    _fsync_dir(path.parent)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class ModelRegistry:
    """Per-task version history backed by ``store_path``.

    Reads go to immutable files and need no lock; publishes for one task are
    expected to be serialised by the caller (the task's pipeline worker).
    """

    def __init__(self, store_path, fault_hook: Callable[[str], None] | None = None):
        self.root = Path(store_path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fault_hook = fault_hook
        self._history: dict[str, list[dict]] = {}
        self._lock = threading.Lock()
        for task_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            self._recover(task_dir)

    # -- recovery -----------------------------------------------------------

    def _recover(self, task_dir: Path) -> None:
        journal = task_dir / "registry.json"
        for tmp in task_dir.glob("*.tmp"):
            tmp.unlink()
        if not journal.exists():
            return
        entries = json.loads(journal.read_text(encoding="utf-8"))["versions"]
        valid = []
        for entry in entries:
            path = task_dir / f"v{entry['version']}.fpkg"
            if not path.exists() or hashlib.sha256(path.read_bytes()).hexdigest() != entry["file_sha256"]:
                log.error("%s: version %s is missing or corrupt; truncating history", task_dir.name, entry["version"])
                break
            valid.append(entry)
        listed = {f"v{e['version']}.fpkg" for e in valid}
        for orphan in task_dir.glob("v*.fpkg"):
            if orphan.name not in listed:
                log.warning("discarding unpublished %s", orphan)
                orphan.unlink()
        if len(valid) != len(entries):
            self._write_journal(task_dir.name, valid)
        if valid:
            self._history[task_dir.name] = valid

    def _write_journal(self, task: str, entries: list[dict]) -> None:
        data = json.dumps({"task_id": task, "versions": entries}, indent=2, sort_keys=True).encode()
        atomic_write(self.root / task / "registry.json", data + b"\n")

    def _hook(self, stage: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(stage)

    # -- queries --------------------------------------------------------------

    def tasks(self) -> list[str]:
        return sorted(self._history)

    def has_task(self, task: str) -> bool:
        return task in self._history

    def history(self, task: str) -> list[dict]:
        try:
            return [dict(e) for e in self._history[task]]
        except KeyError:
            raise NotFound(f"unknown task {task!r}") from None

    def latest_version(self, task: str) -> int:
        return self.history(task)[-1]["version"]

    def read(self, task: str, version: int | None = None) -> bytes:
        hist = self.history(task)
        if version is None:
            version = hist[-1]["version"]
        if not any(e["version"] == version for e in hist):
            raise NotFound(f"{task!r} has no version {version}")
        return (self.root / task / f"v{version}.fpkg").read_bytes()

    # -- writes ----------------------------------------------------------------

    def publish(self, task: str, data: bytes, meta: dict | None = None) -> int:
        """Store ``data`` (an encoded package) as the next version of ``task``."""
        pkg = decode_package(data)
        with self._lock:
            hist = self._history.get(task, [])
            expected = hist[-1]["version"] + 1 if hist else 1
            if pkg.version != expected:
                raise Conflict(f"package version {pkg.version} but next version is {expected}")
            if pkg.task_id != task:
                raise PackageError(f"package task {pkg.task_id!r} != {task!r}")
            task_dir = self.root / task
            task_dir.mkdir(exist_ok=True)
            self._hook("before-package-write")
            atomic_write(task_dir / f"v{expected}.fpkg", data)
            self._hook("package-written")
            entry = {
                "version": expected,
                "parent_version": pkg.parent_version,
                "created_at": pkg.created_at,
                "content_hash": pkg.hash_hex,
                "file_sha256": hashlib.sha256(data).hexdigest(),
            }
            entry.update(meta or {})
            self._write_journal(task, hist + [entry])
            self._history[task] = hist + [entry]
            self._hook("journal-written")
            return expected
