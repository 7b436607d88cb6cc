"""Simulated annotators standing in for a human refining automatic masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import LabelMap, SliceStack
from ..errors import ShapeError

MODES = ("oracle", "noisy-oracle")


@dataclass(frozen=True)
class AnnotatorModel:
    mode: str = "oracle"
    sigma: float = 0.0  # boundary jitter, pixels
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def boundary_pixels(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of a different label."""
    b = np.zeros(labels.shape, dtype=bool)
    diff_r = labels[1:, :] != labels[:-1, :]
    diff_c = labels[:, 1:] != labels[:, :-1]
    b[1:, :] |= diff_r
    b[:-1, :] |= diff_r
    b[:, 1:] |= diff_c
    b[:, :-1] |= diff_c
    return b


def _jitter(labels: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    out = labels.copy()
    rows, cols = np.nonzero(boundary_pixels(labels))
    if len(rows) == 0:
        return out
    dy, dx = np.rint(rng.normal(0.0, sigma, (2, len(rows)))).astype(np.int64)
    h, w = labels.shape
    out[rows, cols] = labels[np.clip(rows + dy, 0, h - 1), np.clip(cols + dx, 0, w - 1)]
    return out


def oracle_refine(auto: LabelMap, gold: LabelMap, ann: AnnotatorModel = AnnotatorModel()) -> LabelMap:
    """Replace the automatic masks with (optionally jittered) gold labels on the session's slices."""
    if auto.labels.shape != gold.labels.shape:
        raise ShapeError(f"auto {auto.labels.shape} vs gold {gold.labels.shape}")
    slices = sorted(auto.segmented_slices)
    out = auto.labels.copy()
    if ann.mode == "noisy-oracle" and ann.sigma > 0:
        rng = np.random.default_rng(ann.seed)
        for s in slices:
            out[s] = _jitter(gold.labels[s], ann.sigma, rng)
    else:
        out[slices] = gold.labels[slices]
    return LabelMap(out, frozenset(slices))


def make_annotator(gold: LabelMap, ann: AnnotatorModel = AnnotatorModel()):
    """Session callback ``(auto, stack) -> refined`` bound to one dataset's gold labels."""

    def annotate(auto: LabelMap, stack: SliceStack) -> LabelMap:
        return oracle_refine(auto, gold, ann)

    return annotate
