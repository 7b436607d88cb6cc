"""Controlled contrast-shift experiment.

A model pretrained on profile-A phantoms is refined through the full
client/server loop on group A (profile-B) datasets; every published version is
then evaluated frozen on both groups. Group B never contributes training data.
"""

from __future__ import annotations

import json
import logging
import tempfile
import threading
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

import numpy as np
from fastapi.testclient import TestClient

from ..client import Client, SessionConfig, run_session
from ..engine import LabelMap, SliceStack, TrainConfig, Variant, segment_stack
from ..errors import ConfigError
from ..nn import ArchDescriptor
from ..package import ModelPackage, decode_package
from ..roi import labelmap_dsc
from ..server.http import create_app
from ..server.service import FederationServer, TaskConfig
from ..server.validation import ValidationCase, ValidationSet
from .analysis import RelativeScoreTable, SlopeFit, fit_slope
from .annotators import AnnotatorModel, make_annotator
from .phantoms import PhantomSpec, generate_phantom
from .pretrain import pretrain

log = logging.getLogger(__name__)

ADMIN_KEY = "scenario-admin"
ROLE_PRETRAIN, ROLE_VALIDATION, ROLE_GROUP_A, ROLE_GROUP_B = range(4)


@dataclass
class ScenarioConfig:
    seed: int = 0
    task_id: str = "leg"
    pretrain_count: int = 20
    groupA_count: int = 25
    groupB_count: int = 13
    validation_count: int = 10
    n_clients: int = 2
    pretrain_profile: str = "profile-A"
    validation_profile: str = "profile-A"
    groupA_profile: str = "profile-B"
    groupB_profile: str = "profile-B"
    pretrain_epochs: int = 200
    pretrain_lr: float = 3e-3
    train_epochs: int = 5
    train_lr: float = 1e-3
    min_slices: int = 5
    dsc_threshold: float = 0.5
    merge_alpha: float = 0.5
    annotator: str = "oracle"
    annotator_sigma: float = 0.0
    noise_sigma: float = 0.03
    n_bootstrap: int = 1000
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        self.encoder_channels = tuple(self.encoder_channels)
        self.image_size = tuple(self.image_size)
        for name in ("pretrain_count", "groupA_count", "groupB_count", "validation_count", "n_clients"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)

    def descriptor(self) -> ArchDescriptor:
        return ArchDescriptor(
            input_size=self.image_size,
            n_classes=5,
            encoder_channels=self.encoder_channels,
            n_levels=len(self.encoder_channels) - 1,
        )

    def phantom_seed(self, role: int, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, role, index]).generate_state(1)[0])

    def phantom(self, role: int, index: int, profile: str) -> tuple[SliceStack, LabelMap]:
        spec = PhantomSpec(size=self.image_size, profile=profile, noise_sigma=self.noise_sigma)
        return generate_phantom(spec, self.phantom_seed(role, index))


class LogicalClock:
    """Deterministic timestamps: one second per tick from a fixed origin."""

    def __init__(self, origin: datetime = datetime(2020, 1, 1, tzinfo=timezone.utc)):
        self._t = origin
        self._lock = threading.Lock()

    def __call__(self) -> str:
        with self._lock:
            self._t += timedelta(seconds=1)
            return self._t.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    tableA: RelativeScoreTable
    tableB: RelativeScoreTable
    fitA: SlopeFit | None
    fitB: SlopeFit | None
    audit: list[dict]
    versions: list[int]
    pretrain_self_dsc: float
    purity_ok: bool
    history: list[dict] = field(default_factory=list)

    @property
    def final_relative_B(self) -> float:
        return self.tableB.final_mean()

    def passed(self, min_gain: float = 0.02) -> bool:
        return (
            self.purity_ok
            and self.fitB is not None
            and self.fitB.slope > 0
            and self.fitB.ci_excludes_zero
            and self.final_relative_B >= min_gain
        )

    def report(self) -> dict:
        return {
            "seed": self.config.seed,
            "published_versions": self.versions,
            "pretrain_self_dsc": self.pretrain_self_dsc,
            "groupA": None if self.fitA is None else self.fitA.to_dict(),
            "groupB": None if self.fitB is None else self.fitB.to_dict(),
            "final_relative_groupA": self.tableA.final_mean(),
            "final_relative_groupB": self.final_relative_B,
            "purity_ok": self.purity_ok,
            "sessions": len(self.audit),
            "accepted": sum(1 for a in self.audit if a.get("status") == "merged-published"),
        }

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "relative_scores_groupA.csv", out / "relative_scores_groupB.csv", out / "slope_report.json", out / "training_audit.jsonl"]
        self.tableA.write_csv(paths[0])
        self.tableB.write_csv(paths[1])
        paths[2].write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths[3].write_text("".join(json.dumps(a, sort_keys=True) + "\n" for a in self.audit), encoding="utf-8")
        return paths


def assignment_order(cfg: ScenarioConfig) -> list[tuple[int, int]]:
    """``(client, dataset index)`` pairs in round-robin order over a random split."""
    rng = np.random.default_rng(cfg.phantom_seed(99, 0))
    perm = rng.permutation(cfg.groupA_count)
    queues = [list(perm[c :: cfg.n_clients]) for c in range(cfg.n_clients)]
    order = []
    for k in range(max(len(q) for q in queues)):
        for c, q in enumerate(queues):
            if k < len(q):
                order.append((c, int(q[k])))
    return order


def check_purity(audit: list[dict], history: list[dict], forbidden: set[str]) -> bool:
    """No published version descends from a training step on a forbidden dataset."""
    trained_by_job = {a["job_id"]: a["dataset_id"] for a in audit if a.get("trained")}
    if any(a["dataset_id"] in forbidden for a in audit if a.get("trained")):
        return False
    for entry in history:
        if entry.get("source") == "merge" and trained_by_job.get(entry.get("job_id")) in (None, *forbidden):
            return False
    return True


def _evaluate(packages: list[ModelPackage], data: dict[str, tuple[SliceStack, LabelMap]]) -> dict[str, list[float]]:
    scores = {}
    for ds, (stack, gold) in data.items():
        slices = sorted(gold.segmented_slices)
        n = packages[0].descriptor.n_classes
        scores[ds] = [labelmap_dsc(segment_stack(p, stack).labels, gold.labels, slices, n) for p in packages]
    return scores


def run_contrast_shift_scenario(
    cfg: ScenarioConfig,
    *,
    store_path=None,
    concurrent: bool = False,
    progress: Callable[[str], None] | None = None,
) -> ScenarioResult:
    """Run the full experiment; deterministic unless ``concurrent`` is set."""
    say = progress or (lambda msg: log.info(msg))
    desc = cfg.descriptor()
    pre = [cfg.phantom(ROLE_PRETRAIN, i, cfg.pretrain_profile) for i in range(cfg.pretrain_count)]
    val = [cfg.phantom(ROLE_VALIDATION, i, cfg.validation_profile) for i in range(cfg.validation_count)]
    group_a = {f"A{i:02d}": cfg.phantom(ROLE_GROUP_A, i, cfg.groupA_profile) for i in range(cfg.groupA_count)}
    group_b = {f"B{i:02d}": cfg.phantom(ROLE_GROUP_B, i, cfg.groupB_profile) for i in range(cfg.groupB_count)}

    pkg0, self_score = pretrain(desc, pre, cfg.pretrain_epochs, cfg.seed, task_id=cfg.task_id, lr=cfg.pretrain_lr)
    say(f"pretrained: self-DSC {self_score:.3f}")

    tmp = None
    if store_path is None:
        tmp = tempfile.TemporaryDirectory(prefix="fedincr-scenario-")
        store_path = tmp.name
    clock = LogicalClock()
    keys = {ADMIN_KEY: "admin", **{f"client-{c}": "user" for c in range(cfg.n_clients)}}
    vset = ValidationSet(ValidationCase(s, g, Variant.LEFT, f"val{i:02d}") for i, (s, g) in enumerate(val))
    server = FederationServer(
        store_path,
        keys,
        {cfg.task_id: TaskConfig(cfg.task_id, vset, cfg.dsc_threshold, cfg.merge_alpha)},
        inline=not concurrent,
        clock=clock,
    )
    try:
        server.publish_initial(cfg.task_id, pkg0, ADMIN_KEY)
        app = create_app(server)
        audit: list[dict] = []
        order = assignment_order(cfg)
        if concurrent:
            _run_concurrent(cfg, app, order, group_a, audit, clock)
            server.wait_idle()
        else:
            with TestClient(app) as http:
                for step, (c, i) in enumerate(order):
                    audit.append(_session(cfg, http, c, f"A{i:02d}", group_a[f"A{i:02d}"], step, clock))
                    say(f"session {step + 1}/{len(order)} {audit[-1]['dataset_id']}: {audit[-1].get('status')}")
        for a in audit:
            if a.get("job_id"):
                job = server.jobs[a["job_id"]].to_dict()
                a.update(status=job["status"], published_version=job["published_version"], candidate_dsc=job["candidate_dsc"], merged_dsc=job["merged_dsc"])
        history = server.registry.history(cfg.task_id)
        versions = [e["version"] for e in history]
        packages = [decode_package(server.registry.read(cfg.task_id, v)) for v in versions]
    finally:
        if not server.inline:
            server.stop()
        if tmp is not None:
            tmp.cleanup()

    purity = check_purity(audit, history, set(group_b))
    say(f"evaluating {len(versions)} versions")
    table_a = RelativeScoreTable.from_scores(_evaluate(packages, group_a), versions)
    table_b = RelativeScoreTable.from_scores(_evaluate(packages, group_b), versions)
    fit_a = fit_b = None
    if len(versions) >= 2:
        fit_a = fit_slope(table_a, cfg.n_bootstrap, seed=cfg.seed)
        fit_b = fit_slope(table_b, cfg.n_bootstrap, seed=cfg.seed)
    return ScenarioResult(cfg, table_a, table_b, fit_a, fit_b, audit, versions, self_score, purity, history)


def _session(cfg: ScenarioConfig, http, client_idx: int, dataset_id: str, data, step: int, clock) -> dict:
    stack, gold = data
    key = f"client-{client_idx}"
    entry = {"step": step, "client": client_idx, "dataset_id": dataset_id, "trained": False}

    def on_train(n_images: int) -> None:
        entry.update(trained=True, n_train_images=n_images)

    ann = AnnotatorModel(cfg.annotator, cfg.annotator_sigma, seed=cfg.phantom_seed(98, step))
    scfg = SessionConfig(
        server_url="",
        api_key=key,
        task_id=cfg.task_id,
        train=TrainConfig(epochs=cfg.train_epochs, lr=cfg.train_lr, min_slices=cfg.min_slices, seed=cfg.phantom_seed(97, step)),
        annotator=make_annotator(gold, ann),
    )
    res = run_session(scfg, stack, client=Client(api_key=key, http=http), clock=clock, on_train=on_train)
    entry.update(
        base_version=res.model_version,
        session_dsc=res.stats.mean_dsc,
        job_id=res.job_id,
        candidate_hash=res.uploaded_version_candidate,
        upload_error=res.upload_error,
    )
    return entry


def _run_concurrent(cfg, app, order, group_a, audit, clock) -> None:
    """Free-running mode: one thread per client, no ordering guarantees between them."""
    lock = threading.Lock()
    per_client: dict[int, list[tuple[int, int]]] = {}
    for step, (c, i) in enumerate(order):
        per_client.setdefault(c, []).append((step, i))
    errors: list[BaseException] = []

    def worker(c: int) -> None:
        try:
            with TestClient(app) as http:
                for step, i in per_client[c]:
                    entry = _session(cfg, http, c, f"A{i:02d}", group_a[f"A{i:02d}"], step, clock)
                    with lock:
                        audit.append(entry)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(c,)) for c in sorted(per_client)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    audit.sort(key=lambda a: a["step"])
