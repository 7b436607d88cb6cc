from __future__ import annotations

import hashlib
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from fedincr.package import decode_package, encode_package

from server_helpers import make_server, marker_package

WORKER = Path(__file__).with_name("crash_worker.py")


def run_worker(store: Path, stage: str) -> subprocess.CompletedProcess:
    env = {**os.environ, "PYTHONPATH": str(WORKER.parent) + os.pathsep + os.environ.get("PYTHONPATH", "")}
    return subprocess.run([sys.executable, str(WORKER), str(store), stage], env=env, capture_output=True, timeout=120)


def assert_consistent(store: Path) -> int:
    """Reopen the store and check that every listed version is complete; return latest."""
    srv = make_server(store)
    hist = srv.registry.history("leg")
    for entry in hist:
        data = srv.registry.read("leg", entry["version"])
        assert hashlib.sha256(data).hexdigest() == entry["file_sha256"]
        pkg = decode_package(data)
        assert pkg.version == entry["version"]
        if entry["version"] > 1:
            assert entry["validation_dsc"] > 0.5
    listed = {f"v{e['version']}.fpkg" for e in hist}
    assert {p.name for p in (store / "leg").glob("v*.fpkg")} == listed
    assert not list((store / "leg").glob("*.tmp"))
    return srv.registry.latest_version("leg")


@pytest.mark.parametrize(
    "stage, expected_latest",
    [("merge", 1), ("publish", 1), ("before-package-write", 1), ("package-written", 1), ("journal-written", 2)],
)
def test_kill_mid_pipeline(tmp_path, stage, expected_latest):
    store = tmp_path / "store"
    proc = run_worker(store, stage)
    assert proc.returncode == 137, proc.stderr.decode()
    assert assert_consistent(store) == expected_latest
    # the restarted server keeps working
    srv = make_server(store)
    srv.submit_model("leg", encode_package(marker_package(1.0, seed=77)), "user-key")
    assert srv.registry.latest_version("leg") == expected_latest + 1


def test_stray_temp_and_corrupt_tail_are_recovered(tmp_path):
    store = tmp_path / "store"
    srv = make_server(store)
    srv.publish_initial("leg", marker_package(1.0), "admin-key")
    for s in (1, 2):
        srv.submit_model("leg", encode_package(marker_package(1.0, seed=s)), "user-key")
    (store / "leg" / "v4.fpkg.tmp").write_bytes(b"partial")
    (store / "leg" / "v4.fpkg").write_bytes(b"orphan")
    with open(store / "leg" / "v3.fpkg", "r+b") as fh:  # torn final version
        fh.truncate(100)
    assert assert_consistent(store) == 2


def test_sigkill_during_publish_loop(tmp_path):
    store = tmp_path / "store"
    env = {**os.environ, "PYTHONPATH": str(WORKER.parent) + os.pathsep + os.environ.get("PYTHONPATH", "")}
    proc = subprocess.Popen([sys.executable, str(WORKER), str(store), "loop"], env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        seen = 0
        deadline = time.monotonic() + 60
        while seen < 5 and time.monotonic() < deadline:
            line = proc.stdout.readline()
            if not line:
                break
            seen = int(line)
        time.sleep(0.013)
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait()
    assert seen >= 5, proc.stderr.read().decode()
    assert assert_consistent(store) >= seen
