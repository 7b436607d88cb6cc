"""Dataset canonicalisation, model application and client-side incremental learning."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import nn
from .errors import EmptyInputError, GeometryError, InsufficientSlices, ShapeError
from .nn import ArchDescriptor
from .package import ModelPackage, utc_now

VARIANCE_FLOOR = 1e-6


class Variant(str, enum.Enum):
    BOTH_LIMBS = "both_limbs"
    LEFT = "left"
    RIGHT = "right"


@dataclass
class SliceStack:
    """Grayscale slices ``voxels[n, H, W]``; ``pixel_spacing`` is (row, column) in mm."""

    voxels: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    slice_thickness: float = 1.0
    contrast_tag: str = ""

    def __post_init__(self) -> None:
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim == 2:
            self.voxels = self.voxels[None]
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise ShapeError("voxels must be [n_slices, H, W] with n_slices >= 1")
        self.pixel_spacing = (float(self.pixel_spacing[0]), float(self.pixel_spacing[1]))
        if min(self.pixel_spacing) <= 0 or not self.slice_thickness > 0:
            raise GeometryError(f"non-positive spacing {self.pixel_spacing}, {self.slice_thickness}")
        if not np.isfinite(self.voxels).all():
            raise ShapeError("voxels contain non-finite values")

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.voxels.shape[1:]


@dataclass
class LabelMap:
    labels: np.ndarray
    segmented_slices: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim == 2:
            self.labels = self.labels[None]
        self.segmented_slices = frozenset(int(s) for s in self.segmented_slices)
        if any(s < 0 or s >= self.labels.shape[0] for s in self.segmented_slices):
            raise ShapeError("segmented slice index out of range")

    def check(self, n_classes: int, stack: SliceStack | None = None) -> None:
        if self.labels.size and int(self.labels.max()) >= n_classes:
            raise ShapeError(f"label id >= {n_classes}")
        if stack is not None and self.labels.shape != stack.voxels.shape:
            raise ShapeError(f"labels {self.labels.shape} do not match stack {stack.voxels.shape}")


@dataclass(frozen=True)
class SubImage:
    """Where one canonical sub-image came from inside an original slice."""

    x0: int
    width: int
    mirrored: bool
    resampled_shape: tuple[int, int]
    offset: tuple[int, int]  # canonical[i, j] = resampled[i + oy, j + ox]


@dataclass(frozen=True)
class GeometryRecord:
    original_shape: tuple[int, int]
    pixel_spacing: tuple[float, float]
    canonical_spacing: float
    canonical_shape: tuple[int, int]
    variant: Variant
    parts: tuple[SubImage, ...]
    slices: tuple[int, ...]

    @property
    def is_identity(self) -> bool:
        return all(
            p.resampled_shape == (self.original_shape[0], p.width) == self.canonical_shape for p in self.parts
        )


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 5
    min_slices: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    boundary_focus: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.min_slices < 1:
            raise ValueError("epochs, batch_size and min_slices must be >= 1")


# --- geometry -----------------------------------------------------------------


def split_mirror(raster: np.ndarray, variant: Variant | str) -> list[tuple[np.ndarray, bool]]:
    """Sub-images in left-limb orientation, each with its mirror flag.

    Works on the last axis, so stacks ``[n, H, W]`` split the same way as slices.
    """
    variant = Variant(variant)
    width = raster.shape[-1]
    if variant is Variant.LEFT:
        return [(raster, False)]
    if variant is Variant.RIGHT:
        return [(raster[..., ::-1], True)]
    if width % 2:
        raise GeometryError(f"both_limbs needs an even width, got {width}")
    half = width // 2
    return [(raster[..., :half], False), (raster[..., half:][..., ::-1], True)]


def _parts_layout(width: int, variant: Variant) -> list[tuple[int, int, bool]]:
    if variant is Variant.LEFT:
        return [(0, width, False)]
    if variant is Variant.RIGHT:
        return [(0, width, True)]
    if width % 2:
        raise GeometryError(f"both_limbs needs an even width, got {width}")
    return [(0, width // 2, False), (width // 2, width // 2, True)]


def _resampled_size(n: int, spacing: float, canonical: float) -> int:
    return max(1, int(round(n * spacing / canonical)))


def resample_bilinear(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Pixel-centre aligned bilinear resampling of a 2D raster."""
    h, w = img.shape
    if (h, w) == tuple(shape):
        return img.copy()
    ry = (np.arange(shape[0]) + 0.5) * (h / shape[0]) - 0.5
    rx = (np.arange(shape[1]) + 0.5) * (w / shape[1]) - 0.5
    yy, xx = np.meshgrid(ry, rx, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1, mode="nearest").astype(np.float32)


def resample_nearest(lab: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling over the last two axes."""
    h, w = lab.shape[-2:]
    if (h, w) == tuple(shape):
        return lab.copy()
    rows = np.minimum(((np.arange(shape[0]) + 0.5) * h / shape[0]).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(shape[1]) + 0.5) * w / shape[1]).astype(np.int64), w - 1)
    return lab[..., rows[:, None], cols[None, :]]


def _crop_pad(img: np.ndarray, offset: tuple[int, int], shape: tuple[int, int], fill) -> np.ndarray:
    """``out[i, j] = img[i + oy, j + ox]`` where in range, else ``fill``."""
    oy, ox = offset
    out = np.full(img.shape[:-2] + tuple(shape), fill, dtype=img.dtype)
    h, w = img.shape[-2:]
    ys, ye = max(0, -oy), min(shape[0], h - oy)
    xs, xe = max(0, -ox), min(shape[1], w - ox)
    if ys < ye and xs < xe:
        out[..., ys:ye, xs:xe] = img[..., ys + oy : ye + oy, xs + ox : xe + ox]
    return out


def normalize(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float64)
    std = np.sqrt(max(img.var(), VARIANCE_FLOOR))
    return ((img - img.mean()) / std).astype(np.float32)


def _select(stack_n: int, slices) -> tuple[int, ...]:
    if slices is None:
        return tuple(range(stack_n))
    chosen = tuple(sorted({int(s) for s in slices}))
    if any(s < 0 or s >= stack_n for s in chosen):
        raise ShapeError("slice index out of range")
    return chosen


def geometry_for(stack: SliceStack, desc: ArchDescriptor, variant, slices=None) -> GeometryRecord:
    variant = Variant(variant)
    h, w = stack.shape
    sy, sx = stack.pixel_spacing
    canon = desc.canonical_resolution
    H, W = desc.input_size
    parts = []
    for x0, width, mirrored in _parts_layout(w, variant):
        rh, rw = _resampled_size(h, sy, canon), _resampled_size(width, sx, canon)
        parts.append(SubImage(x0, width, mirrored, (rh, rw), ((rh - H) // 2, (rw - W) // 2)))
    return GeometryRecord((h, w), (sy, sx), canon, (H, W), variant, tuple(parts), _select(stack.n_slices, slices))


def _part_view(raster: np.ndarray, part: SubImage) -> np.ndarray:
    sub = raster[..., part.x0 : part.x0 + part.width]
    return sub[..., ::-1] if part.mirrored else sub


def canonicalize(stack: SliceStack, desc: ArchDescriptor, variant, slices=None):
    """Network inputs ``[n_sel * n_parts, 1, H, W]`` (slice-major) and the geometry record."""
    desc.validate()
    geo = geometry_for(stack, desc, variant, slices)
    out = np.empty((len(geo.slices) * len(geo.parts), 1) + geo.canonical_shape, dtype=np.float32)
    k = 0
    for s in geo.slices:
        for part in geo.parts:
            sub = _part_view(stack.voxels[s], part)
            sub = resample_bilinear(sub, part.resampled_shape)
            sub = _crop_pad(sub, part.offset, geo.canonical_shape, sub.min())
            out[k, 0] = normalize(sub)
            k += 1
    return out, geo


def canonicalize_labels(labels: np.ndarray, geo: GeometryRecord) -> np.ndarray:
    """Label rasters on the canonical grid, aligned with :func:`canonicalize` output."""
    labels = np.asarray(labels)
    if labels.shape[-2:] != geo.original_shape:
        raise GeometryError("labels do not match geometry record")
    out = np.empty((len(geo.slices) * len(geo.parts),) + geo.canonical_shape, dtype=np.uint8)
    k = 0
    for s in geo.slices:
        for part in geo.parts:
            sub = resample_nearest(_part_view(labels[s], part), part.resampled_shape)
            out[k] = _crop_pad(sub, part.offset, geo.canonical_shape, 0)
            k += 1
    return out


def restore_geometry(canonical: np.ndarray, geo: GeometryRecord, n_slices: int | None = None) -> LabelMap:
    """Inverse of :func:`canonicalize` for label rasters (nearest neighbour)."""
    canonical = np.asarray(canonical)
    expected = (len(geo.slices) * len(geo.parts),) + geo.canonical_shape
    if canonical.shape != expected:
        raise GeometryError(f"canonical labels {canonical.shape} do not match record {expected}")
    n = n_slices if n_slices is not None else (max(geo.slices) + 1 if geo.slices else 0)
    out = np.zeros((n,) + geo.original_shape, dtype=np.uint8)
    k = 0
    for s in geo.slices:
        for part in geo.parts:
            oy, ox = part.offset
            back = _crop_pad(canonical[k], (-oy, -ox), part.resampled_shape, 0)
            back = resample_nearest(back, (geo.original_shape[0], part.width))
            if part.mirrored:
                back = back[:, ::-1]
            out[s, :, part.x0 : part.x0 + part.width] = back
            k += 1
    return LabelMap(out, frozenset(geo.slices))


# --- model application -----------------------------------------------------------


def segment_stack(pkg: ModelPackage, stack: SliceStack, variant=Variant.LEFT, slice_range=None) -> LabelMap:
    """Automatic segmentation of the selected slices (all by default)."""
    inputs, geo = canonicalize(stack, pkg.descriptor, variant, slice_range)
    labels = nn.predict(pkg.weights, inputs)
    return restore_geometry(labels, geo, stack.n_slices)


def incremental_learn(
    pkg: ModelPackage,
    stack: SliceStack,
    refined: LabelMap,
    cfg: TrainConfig = TrainConfig(),
    *,
    variant=Variant.LEFT,
    created_at: str | None = None,
    loss_log: list | None = None,
    on_train: Callable[[int], None] | None = None,
) -> ModelPackage:
    """Fine-tune ``pkg`` on the refined slices and return a new candidate package.

    ``loss_log`` (if given) receives the loss before training and after each epoch;
    ``on_train`` is called with the number of training sub-images, for auditing.
    """
    slices = sorted(refined.segmented_slices)
    if len(slices) < cfg.min_slices:
        raise InsufficientSlices(f"{len(slices)} segmented slices, need {cfg.min_slices}")
    refined.check(pkg.descriptor.n_classes, stack)
    inputs, geo = canonicalize(stack, pkg.descriptor, variant, slices)
    targets = canonicalize_labels(refined.labels, geo)
    cw = nn.compute_class_weights(targets, pkg.descriptor.n_classes)
    if cw.sum() <= 0:
        raise EmptyInputError("no labelled pixels in refined slices")
    pw = nn.boundary_weight_map(targets) if cfg.boundary_focus else None
    if on_train is not None:
        on_train(len(inputs))
    weights, _, losses = nn.train(
        pkg.weights,
        inputs,
        targets,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        rng=np.random.default_rng(cfg.seed),
        class_weights=cw,
        pixel_weights=pw,
        state=nn.AdamState.zeros_like(pkg.weights, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps),
        shuffle=cfg.shuffle,
        track_loss=loss_log is not None,
    )
    if loss_log is not None:
        loss_log.extend(losses)
    return ModelPackage(
        task_id=pkg.task_id,
        version=pkg.version + 1,
        parent_version=pkg.version,
        descriptor=pkg.descriptor,
        label_names=pkg.label_names,
        weights=weights,
        created_at=created_at or utc_now(),
    )
