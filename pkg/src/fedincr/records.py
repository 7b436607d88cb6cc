"""Usage statistics records shared by client, server and analysis."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from datetime import datetime

from .errors import InvalidRecord


def client_hash(api_key: str) -> str:
    """Pseudonymous client id: first 16 hex chars of SHA-256 of the API key."""
    return hashlib.sha256(api_key.encode("utf-8")).hexdigest()[:16]


def parse_timestamp(ts: str) -> datetime:
    return datetime.fromisoformat(ts.replace("Z", "+00:00"))


@dataclass(frozen=True)
class StatsRecord:
    timestamp: str
    client_hash: str
    task_id: str
    mean_dsc: float
    n_slices: int
    model_version: int

    def validate(self) -> "StatsRecord":
        try:
            parse_timestamp(self.timestamp)
        except (TypeError, ValueError, AttributeError) as exc:
            raise InvalidRecord(f"bad timestamp {self.timestamp!r}") from exc
        if not isinstance(self.task_id, str) or not self.task_id:
            raise InvalidRecord("task_id must be a non-empty string")
        if not isinstance(self.client_hash, str):
            raise InvalidRecord("client_hash must be a string")
        if isinstance(self.mean_dsc, bool) or not isinstance(self.mean_dsc, (int, float)):
            raise InvalidRecord("mean_dsc must be a number")
        if not math.isfinite(self.mean_dsc) or not 0.0 <= self.mean_dsc <= 1.0:
            raise InvalidRecord(f"mean_dsc {self.mean_dsc} outside [0, 1]")
        for name in ("n_slices", "model_version"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise InvalidRecord(f"{name} must be an integer")
        if self.n_slices < 1:
            raise InvalidRecord("n_slices must be >= 1")
        if self.model_version < 0:
            raise InvalidRecord("model_version must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StatsRecord":
        if not isinstance(d, dict):
            raise InvalidRecord("record must be a JSON object")
        try:
            rec = cls(
                timestamp=d["timestamp"],
                client_hash=d.get("client_hash", ""),
                task_id=d["task_id"],
                mean_dsc=d["mean_dsc"],
                n_slices=d["n_slices"],
                model_version=d["model_version"],
            )
        except KeyError as exc:
            raise InvalidRecord(f"missing field {exc}") from exc
        return rec.validate()
