"""On-disk dataset directories.

A dataset directory holds::

    stack.json               dims [n, H, W], spacing [row, col] mm, slice_thickness,
                             contrast_tag, variant
    voxels.bin               little-endian float32, slice-major
    labels.bin               optional little-endian uint8, same order
    segmented_slices.json    optional list of annotated slice indices
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import LabelMap, SliceStack, Variant
from .errors import FormatError


def write_dataset(path, stack: SliceStack, labels: LabelMap | None = None, variant=Variant.LEFT) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": list(stack.voxels.shape),
        "spacing": list(stack.pixel_spacing),
        "slice_thickness": stack.slice_thickness,
        "contrast_tag": stack.contrast_tag,
        "variant": Variant(variant).value,
    }
    (path / "stack.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (path / "voxels.bin").write_bytes(stack.voxels.astype("<f4").tobytes())
    if labels is not None:
        (path / "labels.bin").write_bytes(labels.labels.astype("u1").tobytes())
        seg = sorted(labels.segmented_slices)
        (path / "segmented_slices.json").write_text(json.dumps(seg) + "\n", encoding="utf-8")
    return path


def read_dataset(path) -> tuple[SliceStack, LabelMap | None, Variant]:
    path = Path(path)
    try:
        meta = json.loads((path / "stack.json").read_text(encoding="utf-8"))
        dims = tuple(int(d) for d in meta["dims"])
        raw = (path / "voxels.bin").read_bytes()
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable dataset ({exc})") from exc
    if len(dims) != 3 or len(raw) != 4 * int(np.prod(dims)):
        raise FormatError(f"{path}: voxels.bin does not match dims {dims}")
    stack = SliceStack(
        np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32),
        pixel_spacing=tuple(meta.get("spacing", (1.0, 1.0))),
        slice_thickness=float(meta.get("slice_thickness", 1.0)),
        contrast_tag=meta.get("contrast_tag", ""),
    )
    labels = None
    lab_path = path / "labels.bin"
    if lab_path.exists():
        lraw = lab_path.read_bytes()
        if len(lraw) != int(np.prod(dims)):
            raise FormatError(f"{path}: labels.bin does not match dims {dims}")
        seg_path = path / "segmented_slices.json"
        seg = json.loads(seg_path.read_text(encoding="utf-8")) if seg_path.exists() else range(dims[0])
        labels = LabelMap(np.frombuffer(lraw, dtype="u1").reshape(dims).copy(), frozenset(seg))
    return stack, labels, Variant(meta.get("variant", "left"))


def list_datasets(root) -> list[Path]:
    """Dataset directories directly under ``root`` (sorted by name)."""
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "stack.json").exists())
