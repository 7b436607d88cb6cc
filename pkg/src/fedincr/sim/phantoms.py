"""Synthetic limb phantoms with known ground truth.

A phantom is a stack of axial slices through a limb: an irregular silhouette
holding ``n_regions`` smooth blob "muscles" arranged around the limb centre.
Geometry depends only on the seed; intensities come from a named contrast
profile, so the same seed under two profiles gives identical labels and
different images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..engine import LabelMap, SliceStack, Variant
from ..errors import PackingError

# per-class mean intensity; "regions" is indexed by class id - 1
PROFILES: dict[str, dict] = {
    "profile-A": {"outside": 0.05, "tissue": 0.25, "regions": [0.45, 0.60, 0.75, 0.90, 0.35, 0.55]},
    "profile-B": {"outside": 0.10, "tissue": 0.50, "regions": [0.30, 0.80, 0.65, 0.95, 0.20, 0.40]},
}

MAX_ATTEMPTS = 1000


@dataclass
class PhantomSpec:
    size: tuple[int, int] = (64, 64)
    n_regions: int = 4
    n_slices: int = 6
    profile: str = "profile-A"
    noise_sigma: float = 0.03
    variant: Variant = Variant.LEFT
    pixel_spacing: tuple[float, float] = (1.0, 1.0)
    slice_thickness: float = 5.0
    intensities: dict | None = field(default=None, repr=False)

    def contrast(self) -> dict:
        prof = self.intensities or PROFILES[self.profile]
        if len(prof["regions"]) < self.n_regions:
            raise ValueError(f"profile defines {len(prof['regions'])} regions, need {self.n_regions}")
        return prof

    def validate(self) -> None:
        if self.n_slices < 6:
            raise ValueError("phantoms have at least 6 slices")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        self.contrast()


def _harmonic_radius(theta: np.ndarray, base: float, amps, phases) -> np.ndarray:
    r = np.ones_like(theta)
    for k, (a, p) in enumerate(zip(amps, phases), start=2):
        r = r + a * np.cos(k * theta + p)
    return base * r


def _blob(shape, cy, cx, base, aspect, angle, amps, phases) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / aspect
    v = -dx * sa + dy * ca
    theta = np.arctan2(v, u)
    return np.hypot(u, v) <= _harmonic_radius(theta, base, amps, phases)


def _draw_geometry(rng: np.random.Generator, size, n_regions: int) -> dict:
    h, w = size
    scale = min(h, w) / 64.0
    limb = {
        "cy": h / 2 + rng.uniform(-1.5, 1.5) * scale,
        "cx": w / 2 + rng.uniform(-1.5, 1.5) * scale,
        "base": rng.uniform(25.0, 28.0) * scale,
        "aspect": rng.uniform(1.0, 1.12),
        "angle": rng.uniform(0, np.pi),
        "amps": rng.uniform(-0.04, 0.04, 3),
        "phases": rng.uniform(0, 2 * np.pi, 3),
    }
    regions = []
    offset = rng.uniform(-0.25, 0.25)
    for k in range(n_regions):
        ang = offset + 2 * np.pi * k / n_regions + rng.uniform(-0.2, 0.2)
        dist = rng.uniform(0.45, 0.55) * limb["base"]
        regions.append(
            {
                "ang": ang,
                "dist": dist,
                "base": rng.uniform(0.26, 0.34) * limb["base"],
                "aspect": rng.uniform(0.8, 1.3),
                "angle": rng.uniform(0, np.pi),
                "amps": rng.uniform(-0.08, 0.08, 3),
                "phases": rng.uniform(0, 2 * np.pi, 3),
            }
        )
    drift = rng.uniform(-0.015, 0.015, 2)
    return {"limb": limb, "regions": regions, "drift": drift}


def _render_slice(geom: dict, size, z: float):
    """Label raster and silhouette for slice position ``z`` in [-1, 1]."""
    limb = geom["limb"]
    s = 1.0 - 0.06 * z * z
    cy = limb["cy"] + geom["drift"][0] * z * limb["base"]
    cx = limb["cx"] + geom["drift"][1] * z * limb["base"]
    sil = _blob(size, cy, cx, limb["base"] * s, limb["aspect"], limb["angle"], limb["amps"], limb["phases"])
    labels = np.zeros(size, dtype=np.uint8)
    inner = _erode(sil, 2)
    for k, reg in enumerate(geom["regions"], start=1):
        ry = cy + np.sin(reg["ang"] + 0.05 * z) * reg["dist"] * s
        rx = cx + np.cos(reg["ang"] + 0.05 * z) * reg["dist"] * s
        m = _blob(size, ry, rx, reg["base"] * s, reg["aspect"], reg["angle"], reg["amps"], reg["phases"])
        if (m & ~inner).any() or (_dilate(m, 1) & (labels > 0)).any() or m.sum() < 12:
            return None, None
        labels[m] = k
    return labels, sil


def _erode(m: np.ndarray, it: int) -> np.ndarray:
    return ndimage.binary_erosion(m, iterations=it)


def _dilate(m: np.ndarray, it: int) -> np.ndarray:
    return ndimage.binary_dilation(m, iterations=it)


def _limb(spec: PhantomSpec, rng: np.random.Generator, size):
    zs = np.linspace(-1.0, 1.0, spec.n_slices)
    for _ in range(MAX_ATTEMPTS):
        geom = _draw_geometry(rng, size, spec.n_regions)
        rendered = [_render_slice(geom, size, z) for z in zs]
        if all(lab is not None for lab, _ in rendered):
            return np.stack([r[0] for r in rendered]), np.stack([r[1] for r in rendered])
    raise PackingError(f"could not pack {spec.n_regions} regions in {MAX_ATTEMPTS} attempts")


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[SliceStack, LabelMap]:
    """Deterministic ``(stack, gold labels)`` for ``(spec, seed)``.

    Geometry and noise use independent streams, so changing the profile keeps
    the labels unchanged.
    """
    spec.validate()
    prof = spec.contrast()
    geo_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    variant = Variant(spec.variant)
    h, w = spec.size
    if variant is Variant.BOTH_LIMBS:
        left_lab, left_sil = _limb(spec, geo_rng, (h, w))
        right_lab, right_sil = _limb(spec, geo_rng, (h, w))
        labels = np.concatenate([left_lab, right_lab[..., ::-1]], axis=-1)
        sil = np.concatenate([left_sil, right_sil[..., ::-1]], axis=-1)
    else:
        labels, sil = _limb(spec, geo_rng, (h, w))
        if variant is Variant.RIGHT:
            labels, sil = labels[..., ::-1], sil[..., ::-1]
    img = np.full(labels.shape, prof["outside"], dtype=np.float64)
    img[sil] = prof["tissue"]
    for k in range(1, spec.n_regions + 1):
        img[labels == k] = prof["regions"][k - 1]
    if spec.noise_sigma > 0:
        img = img + noise_rng.normal(0.0, spec.noise_sigma, img.shape)
    stack = SliceStack(
        img.astype(np.float32),
        pixel_spacing=spec.pixel_spacing,
        slice_thickness=spec.slice_thickness,
        contrast_tag=spec.profile,
    )
    return stack, LabelMap(np.ascontiguousarray(labels), frozenset(range(spec.n_slices)))
