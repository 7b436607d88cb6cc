"""Full (non-incremental) training of the initial model."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .. import nn
from ..engine import LabelMap, SliceStack, Variant, canonicalize, canonicalize_labels, segment_stack
from ..errors import PretrainError
from ..nn import ArchDescriptor
from ..package import ModelPackage
from ..roi import labelmap_dsc

log = logging.getLogger(__name__)

DEFAULT_LABELS = ("background", "region1", "region2", "region3", "region4")
EPOCH_CREATED_AT = "1970-01-01T00:00:00Z"


def self_dsc(pkg: ModelPackage, data: Sequence[tuple[SliceStack, LabelMap]], variant=Variant.LEFT) -> float:
    """Mean global DSC of ``pkg`` on its own training data."""
    n = pkg.descriptor.n_classes
    return float(
        np.mean(
            [labelmap_dsc(segment_stack(pkg, s, variant).labels, g.labels, sorted(g.segmented_slices), n) for s, g in data]
        )
    )


def pretrain(
    desc: ArchDescriptor,
    phantoms: Sequence[tuple[SliceStack, LabelMap]],
    epochs: int = 200,
    seed: int = 0,
    *,
    task_id: str = "leg",
    label_names: Sequence[str] | None = None,
    lr: float = 3e-3,
    batch_size: int = 5,
    target: float = 0.85,
    floor: float = 0.60,
    check_every: int = 5,
    variant=Variant.LEFT,
    created_at: str = EPOCH_CREATED_AT,
) -> tuple[ModelPackage, float]:
    """Train from scratch until the mean self-DSC reaches ``target`` or ``epochs`` runs out.

    Returns the version-0 package and its self-DSC. Raises PretrainError when
    the final self-DSC is below ``floor``.
    """
    if not phantoms:
        raise PretrainError("no pretraining data")
    if epochs < 1:
        raise PretrainError("epoch cap must be >= 1")
    label_names = tuple(label_names or DEFAULT_LABELS[: desc.n_classes])
    xs, ys = [], []
    for stack, gold in phantoms:
        slices = sorted(gold.segmented_slices)
        x, geo = canonicalize(stack, desc, variant, slices)
        xs.append(x)
        ys.append(canonicalize_labels(gold.labels, geo))
    inputs, targets = np.concatenate(xs), np.concatenate(ys)
    cw = nn.compute_class_weights(targets, desc.n_classes)
    weights = nn.build_network(desc, seed)
    rng = np.random.default_rng(seed)
    state = nn.AdamState.zeros_like(weights, lr=lr)

    def package(w) -> ModelPackage:
        return ModelPackage(task_id, 0, None, desc, label_names, w, created_at)

    score = 0.0
    for epoch in range(1, epochs + 1):
        weights, state, _ = nn.train(
            weights, inputs, targets, epochs=1, batch_size=batch_size, rng=rng, class_weights=cw, state=state, lr=lr
        )
        if epoch % check_every == 0 or epoch == epochs:
            score = self_dsc(package(weights), phantoms, variant)
            log.info("pretrain epoch %d self-DSC %.3f", epoch, score)
            if score >= target:
                break
    if score < floor:
        raise PretrainError(f"self-DSC {score:.3f} below {floor} after {epoch} epochs")
    return package(weights), score
