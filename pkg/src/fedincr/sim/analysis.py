"""Relative-score tables, slope fits and usage-log analysis."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from ..errors import EmptyInputError, FitError, InvalidRecord
from ..records import StatsRecord, parse_timestamp

log = logging.getLogger(__name__)

EXCLUDE_AT_OR_ABOVE = 0.99
EXCLUDE_BELOW = 0.1


# --- relative scores -------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    dataset_id: str
    version_index: int  # 0 = initial model
    model_version: int  # registry version
    dsc: float
    relative_score: float


@dataclass
class RelativeScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: dict[str, Sequence[float]], versions: Sequence[int]) -> "RelativeScoreTable":
        """``scores[dataset][i]`` is the DSC of ``versions[i]``; index 0 is the reference."""
        rows = []
        for ds in sorted(scores):
            s = scores[ds]
            if len(s) != len(versions):
                raise ValueError(f"{ds}: {len(s)} scores for {len(versions)} versions")
            for i, (v, d) in enumerate(zip(versions, s)):
                rows.append(ScoreRow(ds, i, int(v), float(d), float(d) - float(s[0]) if i else 0.0))
        return cls(rows)

    def datasets(self) -> list[str]:
        return sorted({r.dataset_id for r in self.rows})

    def arrays(self):
        ids = np.array([r.dataset_id for r in self.rows])
        x = np.array([r.version_index for r in self.rows], dtype=np.float64)
        y = np.array([r.relative_score for r in self.rows], dtype=np.float64)
        return ids, x, y

    def final_mean(self) -> float:
        """Mean relative score of the last version across datasets."""
        last = max(r.version_index for r in self.rows)
        return float(np.mean([r.relative_score for r in self.rows if r.version_index == last]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset_id", "model_version_index", "model_version", "dsc", "relative_score"])
        for r in self.rows:
            w.writerow([r.dataset_id, r.version_index, r.model_version, repr(r.dsc), repr(r.relative_score)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "RelativeScoreTable":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls(
                [
                    ScoreRow(r["dataset_id"], int(r["model_version_index"]), int(r["model_version"]), float(r["dsc"]), float(r["relative_score"]))
                    for r in csv.DictReader(fh)
                ]
            )


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    per_dataset: dict[str, float]
    ci_low: float
    ci_high: float
    n_boot: int

    @property
    def ci_excludes_zero(self) -> bool:
        return self.ci_low > 0.0 or self.ci_high < 0.0

    def to_dict(self) -> dict:
        return {
            "pooled_slope": self.slope,
            "ci95": [self.ci_low, self.ci_high],
            "ci_excludes_zero": self.ci_excludes_zero,
            "per_dataset_slopes": self.per_dataset,
            "n_boot": self.n_boot,
        }


def _through_origin(x: np.ndarray, y: np.ndarray) -> float:
    sxx = float(np.dot(x, x))
    if sxx == 0.0:
        raise FitError("all model-version indices are zero; slope undefined")
    return float(np.dot(x, y)) / sxx


def _expanded_tail(n: int, level: float = 0.95) -> float:
    """Tail probability of the expanded percentile interval.

    The plain percentile bootstrap undercovers with few resampled units; the
    expansion matches a t interval with the ``n / (n - 1)`` variance correction.
    """
    if n < 2:
        return (1 - level) / 2
    return float(stats.norm.cdf(-np.sqrt(n / (n - 1)) * stats.t.ppf(0.5 + level / 2, n - 1)))


def fit_slope(table: RelativeScoreTable, n_boot: int = 1000, seed: int = 0) -> SlopeFit:
    """Through-origin least squares, per-dataset slopes, and a dataset-level bootstrap 95% CI (expanded percentile)."""
    if not table.rows:
        raise FitError("empty table")
    ids, x, y = table.arrays()
    if len(np.unique(x)) < 2:
        raise FitError("need at least two model versions")
    slope = _through_origin(x, y)
    datasets = table.datasets()
    groups = [np.flatnonzero(ids == d) for d in datasets]
    per = {}
    sxy = np.empty(len(groups))
    sxx = np.empty(len(groups))
    for k, (d, idx) in enumerate(zip(datasets, groups)):
        sxy[k] = np.dot(x[idx], y[idx])
        sxx[k] = np.dot(x[idx], x[idx])
        per[d] = float(sxy[k] / sxx[k]) if sxx[k] > 0 else float("nan")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(groups), size=(n_boot, len(groups)))
    num, den = sxy[draws].sum(axis=1), sxx[draws].sum(axis=1)
    boot = np.divide(num, den, out=np.full(n_boot, np.nan), where=den > 0)
    tail = _expanded_tail(len(groups))
    lo, hi = np.nanpercentile(boot, [100 * tail, 100 * (1 - tail)])
    return SlopeFit(slope, per, float(lo), float(hi), n_boot)


# --- usage log ---------------------------------------------------------------------


def exclusion_filter(records: Iterable[StatsRecord]):
    """Split into ``(kept, excluded)``: excluded iff mean_dsc >= 0.99 or < 0.1."""
    kept, excluded = [], []
    for r in records:
        (excluded if r.mean_dsc >= EXCLUDE_AT_OR_ABOVE or r.mean_dsc < EXCLUDE_BELOW else kept).append(r)
    return kept, excluded


@dataclass(frozen=True)
class TaskSummary:
    task_id: str
    count: int
    median: float
    q1: float
    q3: float


@dataclass(frozen=True)
class MonthBin:
    task_id: str
    month: str  # YYYY-MM
    n_records: int
    mean_dsc: float
    n_users: int


@dataclass
class UsageSummary:
    tasks: list[TaskSummary]
    series: list[MonthBin]
    n_kept: int = 0
    n_excluded: int = 0
    n_skipped: int = 0

    def task(self, task_id: str) -> TaskSummary:
        return next(t for t in self.tasks if t.task_id == task_id)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary, series = out / "usage_summary.csv", out / "usage_timeseries.csv"
        with open(summary, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "count", "median", "q1", "q3"])
            for t in self.tasks:
                w.writerow([t.task_id, t.count, repr(t.median), repr(t.q1), repr(t.q3)])
        with open(series, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "month", "n_records", "mean_dsc", "n_users"])
            for b in self.series:
                w.writerow([b.task_id, b.month, b.n_records, repr(b.mean_dsc), b.n_users])
        return [summary, series]

    def to_dict(self) -> dict:
        return {
            "kept": self.n_kept,
            "excluded": self.n_excluded,
            "skipped_lines": self.n_skipped,
            "tasks": {t.task_id: {"count": t.count, "median": t.median, "iqr": [t.q1, t.q3]} for t in self.tasks},
        }


def analyze_usage_log(records: Sequence[StatsRecord]) -> UsageSummary:
    """Per-task median/IQR and monthly mean-DSC / active-user series of already-filtered records."""
    if not records:
        raise EmptyInputError("no records to analyse")
    by_task: dict[str, list[StatsRecord]] = defaultdict(list)
    for r in records:
        by_task[r.task_id].append(r)
    tasks, series = [], []
    for task in sorted(by_task):
        recs = by_task[task]
        vals = np.array([r.mean_dsc for r in recs], dtype=np.float64)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        tasks.append(TaskSummary(task, len(vals), float(med), float(q1), float(q3)))
        bins: dict[str, list[StatsRecord]] = defaultdict(list)
        for r in recs:
            bins[parse_timestamp(r.timestamp).strftime("%Y-%m")].append(r)
        for month in sorted(bins):
            b = bins[month]
            series.append(
                MonthBin(task, month, len(b), float(np.mean([r.mean_dsc for r in b])), len({r.client_hash for r in b}))
            )
    return UsageSummary(tasks, series, n_kept=len(records))


def summarize(records: Sequence[StatsRecord], n_skipped: int = 0) -> UsageSummary:
    kept, excluded = exclusion_filter(records)
    summary = analyze_usage_log(kept)
    summary.n_excluded = len(excluded)
    summary.n_skipped = n_skipped
    return summary


def _coerce(row: dict) -> dict:
    out = dict(row)
    for k, conv in (("mean_dsc", float), ("n_slices", int), ("model_version", int)):
        if k in out and isinstance(out[k], str):
            out[k] = conv(out[k])
    return out


def load_records(path) -> tuple[list[StatsRecord], int]:
    """Read a JSON-lines or CSV stats log; unparseable lines are skipped and counted."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    records, skipped = [], 0
    is_csv = path.suffix.lower() == ".csv" or not text.lstrip().startswith("{")
    if is_csv:
        rows = csv.DictReader(io.StringIO(text))
        items = ((i + 2, r) for i, r in enumerate(rows))
    else:
        items = ((i + 1, line) for i, line in enumerate(text.splitlines()) if line.strip())
    for lineno, item in items:
        try:
            row = _coerce(item) if is_csv else json.loads(item)
            records.append(StatsRecord.from_dict(row))
        except (ValueError, TypeError, InvalidRecord) as exc:
            skipped += 1
            log.warning("%s:%d: skipped unparseable record (%s)", path, lineno, exc)
    return records, skipped
