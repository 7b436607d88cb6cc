"""Validation gate: score a model against the server's gold-standard library."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..datasets import list_datasets, read_dataset
from ..engine import LabelMap, SliceStack, Variant, segment_stack
from ..errors import EmptyInputError, FedIncrError, ValidationError
from ..package import ModelPackage
from ..roi import labelmap_dsc

Segmenter = Callable[[ModelPackage, SliceStack, Variant, object], LabelMap]


@dataclass(frozen=True)
class ValidationCase:
    stack: SliceStack
    gold: LabelMap
    variant: Variant = Variant.LEFT
    name: str = ""


class ValidationSet(list):
    """Non-empty list of :class:`ValidationCase`."""

    @classmethod
    def from_directory(cls, root) -> "ValidationSet":
        cases = cls()
        for path in list_datasets(root):
            stack, gold, variant = read_dataset(path)
            if gold is None:
                raise ValidationError(f"{path} has no gold labels")
            cases.append(ValidationCase(stack, gold, variant, Path(path).name))
        if not cases:
            raise ValidationError(f"no validation datasets under {root}")
        return cases


@dataclass(frozen=True)
class ValidationConfig:
    dsc_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.dsc_threshold < 1.0:
            raise ValueError("dsc_threshold must lie in (0, 1)")


def score_model(pkg: ModelPackage, vset, segmenter: Segmenter = segment_stack) -> float:
    """Mean over validation datasets of the voxel-weighted global DSC."""
    if not vset:
        raise ValidationError("empty validation set")
    scores = []
    for case in vset:
        slices = sorted(case.gold.segmented_slices)
        if not slices:
            raise ValidationError(f"validation case {case.name!r} has no annotated slices")
        try:
            auto = segmenter(pkg, case.stack, case.variant, slices)
            scores.append(labelmap_dsc(auto.labels, case.gold.labels, slices, pkg.descriptor.n_classes))
        except EmptyInputError as exc:
            raise ValidationError(f"validation case {case.name!r} has empty gold masks") from exc
        except FedIncrError as exc:
            raise ValidationError(f"segmentation failed on {case.name!r}: {exc}") from exc
    return float(np.mean(scores))


def validate_model(pkg: ModelPackage, vset, cfg: ValidationConfig, segmenter: Segmenter = segment_stack):
    """``(passed, mean_dsc)``; passing requires a score strictly above the threshold."""
    score = score_model(pkg, vset, segmenter)
    return score > cfg.dsc_threshold, score
