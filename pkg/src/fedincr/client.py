"""Client workflow: fetch, segment, refine, report, learn, upload.

Only two kinds of payload ever leave the client: encoded model packages and
:class:`StatsRecord` JSON. Image data stays local.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import httpx

from . import errors
from .engine import LabelMap, SliceStack, TrainConfig, Variant, incremental_learn, segment_stack
from .errors import EmptyInputError, PackageError, ProtocolError, StatsDropped, TransportError
from .package import ModelPackage, decode_package, encode_package, utc_now
from .records import StatsRecord, client_hash
from .roi import dsc, global_dsc, per_roi_dsc

log = logging.getLogger(__name__)

PREFIX = "/api/v1"
UPLOAD_SKIPPED = "upload skipped: below minimum slices"

Annotator = Callable[[LabelMap, SliceStack], LabelMap]


def identity_annotator(auto: LabelMap, stack: SliceStack) -> LabelMap:
    return auto


@dataclass
class SessionConfig:
    server_url: str
    api_key: str
    task_id: str
    variant: Variant = Variant.LEFT
    train: TrainConfig = field(default_factory=TrainConfig)
    annotator: Annotator = identity_annotator
    stats_retry_delay: float = 0.5
    timeout: float = 120.0


@dataclass
class SessionResult:
    auto: LabelMap
    refined: LabelMap
    stats: StatsRecord
    model_version: int
    uploaded_version_candidate: str | None = None  # hex content hash
    job_id: str | None = None
    upload_error: str | None = None
    skipped: str | None = None
    stats_error: str | None = None

    def summary(self) -> dict:
        return {
            "stats": self.stats.to_dict(),
            "candidate_hash": self.uploaded_version_candidate,
            "job_id": self.job_id,
            "upload_error": self.upload_error,
            "upload_skipped": self.skipped,
            "stats_error": self.stats_error,
        }


def _raise_for(resp: httpx.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        body = resp.json()
        name, detail = body.get("error", ""), body.get("detail", resp.text)
    except ValueError:
        name, detail = "", resp.text
    cls = getattr(errors, name, None)
    if not (isinstance(cls, type) and issubclass(cls, errors.FedIncrError)):
        cls = {401: errors.Unauthorized, 404: errors.NotFound, 409: errors.Conflict, 422: PackageError}.get(
            resp.status_code, ProtocolError
        )
    raise cls(f"HTTP {resp.status_code}: {detail}")


class Client:
    """Thin wrapper over the server's HTTP API.

    ``http`` may be any ``httpx.Client`` (a FastAPI ``TestClient`` works) and
    is used as-is; otherwise one is created for ``server_url``.
    """

    def __init__(
        self,
        server_url: str = "",
        api_key: str = "",
        *,
        http: httpx.Client | None = None,
        timeout: float = 120.0,
        retry_delay: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.http = http if http is not None else httpx.Client(base_url=server_url, timeout=timeout)
        self.api_key = api_key
        self.retry_delay = retry_delay
        self.sleep = sleep

    def _request(self, method: str, path: str, **kw) -> httpx.Response:
        headers = {"X-Api-Key": self.api_key, **kw.pop("headers", {})}
        try:
            resp = self.http.request(method, PREFIX + path, headers=headers, **kw)
        except httpx.TransportError as exc:
            raise TransportError(f"{method} {path}: {exc}") from exc
        _raise_for(resp)
        return resp

    def fetch_model(self, task: str, version: int | None = None) -> ModelPackage:
        path = f"/models/{task}/latest" if version is None else f"/models/{task}/{version}"
        return decode_package(self._request("GET", path).content)

    def history(self, task: str) -> list[dict]:
        return self._request("GET", f"/models/{task}/versions").json()["versions"]

    def submit_model(self, pkg: ModelPackage | bytes) -> str | int:
        data = pkg if isinstance(pkg, (bytes, bytearray)) else encode_package(pkg)
        task = decode_package(data).task_id if isinstance(pkg, (bytes, bytearray)) else pkg.task_id
        body = self._request(
            "POST", f"/models/{task}", content=bytes(data), headers={"Content-Type": "application/octet-stream"}
        ).json()
        return body.get("job_id", body.get("version"))

    def job_status(self, job_id: str) -> dict:
        return self._request("GET", f"/jobs/{job_id}").json()

    def wait_job(self, job_id: str, timeout: float = 300.0, poll: float = 0.2) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            status = self.job_status(job_id)
            if status["status"] in ("merged-published", "rejected-upload", "rejected-merge"):
                return status
            if time.monotonic() > deadline:
                raise TransportError(f"job {job_id} still {status['status']} after {timeout}s")
            self.sleep(poll)

    def report_stats(self, rec: StatsRecord) -> None:
        """POST a record, retrying once on transport failure; raises StatsDropped after that."""
        rec.validate()
        payload = rec.to_dict()
        for attempt in (1, 2):
            try:
                self._request("POST", "/stats", json=payload)
                return
            except TransportError as exc:
                if attempt == 2:
                    log.warning("stats record dropped: %s", exc)
                    raise StatsDropped(str(exc)) from exc
                self.sleep(self.retry_delay)


def session_dsc(auto: LabelMap, refined: LabelMap, slices, n_classes: int) -> float:
    """Voxel-weighted global DSC; pooled foreground DSC when every refined ROI is empty."""
    try:
        return global_dsc(per_roi_dsc(auto.labels, refined.labels, slices, n_classes))
    except EmptyInputError:
        idx = list(slices)
        return dsc(auto.labels[idx] > 0, refined.labels[idx] > 0)


def run_session(
    cfg: SessionConfig,
    stack: SliceStack,
    slice_range=None,
    *,
    client: Client | None = None,
    http: httpx.Client | None = None,
    clock: Callable[[], str] = utc_now,
    on_train: Callable[[int], None] | None = None,
) -> SessionResult:
    """One user session. Upload failures are attached to the result, not raised."""
    if client is None:
        client = Client(cfg.server_url, cfg.api_key, http=http, timeout=cfg.timeout, retry_delay=cfg.stats_retry_delay)
    pkg = client.fetch_model(cfg.task_id)  # pinned for the whole session
    auto = segment_stack(pkg, stack, cfg.variant, slice_range)
    refined = cfg.annotator(auto, stack)
    refined.check(pkg.descriptor.n_classes, stack)
    slices = sorted(refined.segmented_slices)
    if not slices:
        raise EmptyInputError("session has no segmented slices")
    stats = StatsRecord(
        timestamp=clock(),
        client_hash=client_hash(cfg.api_key),
        task_id=cfg.task_id,
        mean_dsc=float(session_dsc(auto, refined, slices, pkg.descriptor.n_classes)),
        n_slices=len(slices),
        model_version=pkg.version,
    ).validate()
    result = SessionResult(auto, refined, stats, pkg.version)
    if len(slices) >= cfg.train.min_slices:
        candidate = incremental_learn(pkg, stack, refined, cfg.train, variant=cfg.variant, created_at=clock(), on_train=on_train)
        result.uploaded_version_candidate = candidate.hash_hex
        try:
            result.job_id = client.submit_model(candidate)
        except (ProtocolError, PackageError) as exc:
            result.upload_error = str(exc)
            log.warning("model upload failed: %s", exc)
    else:
        result.skipped = UPLOAD_SKIPPED
    try:
        client.report_stats(stats)
    except StatsDropped as exc:
        result.stats_error = str(exc)
    return result


def fetch_model(cfg: SessionConfig, *, http: httpx.Client | None = None) -> ModelPackage:
    return Client(cfg.server_url, cfg.api_key, http=http, timeout=cfg.timeout).fetch_model(cfg.task_id)


def report_stats(cfg: SessionConfig, rec: StatsRecord, *, http: httpx.Client | None = None) -> None:
    Client(cfg.server_url, cfg.api_key, http=http, retry_delay=cfg.stats_retry_delay).report_stats(rec)
