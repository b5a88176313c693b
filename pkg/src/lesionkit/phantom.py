"""Deterministic synthetic-volume generator with exact ground truth.

Produces a liver-like ellipsoidal organ on soft-tissue background, darker
low-contrast lesions with optional blobby heterogeneity, small node-like
blobs, Gaussian HU noise, and the matching label mask plus tight boxes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .volume import (
    DEFAULT_SPACING,
    BoxRegion,
    Mask3,
    Volume3,
    write_mask,
    write_volume,
)

BACKGROUND_HU = 40.0
ORGAN_HU = 60.0


@dataclass(frozen=True)
class OrganSpec:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    mean_hu: float = ORGAN_HU


@dataclass(frozen=True)
class LesionSpec:
    """One ellipsoidal target.  Interior mean HU is organ mean minus contrast."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    contrast: float
    sigma_tex: float = 0.0

    def __post_init__(self):
        if min(self.radii) < 2:
            raise ValidationError(f"lesion radii must be >= 2 voxels, got {self.radii}")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    dims: tuple[int, int, int]
    organ: OrganSpec
    lesions: tuple[LesionSpec, ...] = ()
    noise_sigma: float = 0.0
    node_count: int = 0
    spacing: tuple[float, float, float] = DEFAULT_SPACING


@dataclass(frozen=True)
class GroundTruth:
    mask: Mask3
    boxes: tuple[BoxRegion, ...]
    organ_box: BoxRegion


def _ellipsoid_mask(dims, center, radii) -> np.ndarray:
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    q = (
        ((x - center[0]) / radii[0]) ** 2
        + ((y - center[1]) / radii[1]) ** 2
        + ((z - center[2]) / radii[2]) ** 2
    )
    return q <= 1.0


def _tight_box(mask: np.ndarray) -> BoxRegion:
    idx = np.nonzero(mask)
    return BoxRegion(
        tuple(int(ax.min()) for ax in idx),
        tuple(int(ax.max()) for ax in idx),
    )


def _texture_field(rng, dims, lesion_mask, center, radii, sigma_tex) -> np.ndarray:
    """Sum of 3-10 Gaussian blobs inside the lesion, centered to zero mean
    over the lesion so the nominal contrast is preserved exactly."""
    n_blobs = int(rng.integers(3, 11))
    x = np.arange(dims[0], dtype=np.float64)[:, None, None]
    y = np.arange(dims[1], dtype=np.float64)[None, :, None]
    z = np.arange(dims[2], dtype=np.float64)[None, None, :]
    bumps = np.zeros(dims, dtype=np.float64)
    for _ in range(n_blobs):
        u = rng.uniform(-0.7, 0.7, size=3)
        bc = tuple(center[i] + u[i] * radii[i] for i in range(3))
        width = rng.uniform(0.15, 0.4) * min(radii)
        amp = sigma_tex * rng.uniform(0.5, 1.0) * (1.0 if rng.random() < 0.5 else -1.0)
        r2 = (
            ((x - bc[0]) / width) ** 2
            + ((y - bc[1]) / width) ** 2
            + ((z - bc[2]) / width) ** 2
        )
        bumps += amp * np.exp(-0.5 * r2)
    bumps[~lesion_mask] = 0.0
    inside = lesion_mask.sum()
    if inside:
        bumps[lesion_mask] -= bumps[lesion_mask].mean()
    return bumps


def _sample_node_specs(rng, organ: OrganSpec, count: int, existing) -> list[LesionSpec]:
    """Small node-like blobs placed inside the organ so the ROI-constrained
    detector can reach them."""
    specs = []
    placed = list(existing)
    for _ in range(count):
        r = rng.uniform(3.0, 6.0)
        radii = tuple(max(2.0, r * rng.uniform(0.85, 1.15)) for _ in range(3))
        for _ in range(50):
            center = _sample_center_inside(rng, organ, radii)
            if all(_separated(center, radii, o.center, o.radii) for o in placed):
                node = LesionSpec(center, radii, rng.uniform(5.0, 15.0),
                                  sigma_tex=rng.uniform(0.0, 3.0))
                specs.append(node)
                placed.append(node)
                break
    return specs


def _sample_center_inside(rng, organ: OrganSpec, radii, tries: int = 200):
    for _ in range(tries):
        u = rng.uniform(-1.0, 1.0, size=3)
        if np.sum(u**2) > 1.0:
            continue
        center = tuple(
            organ.center[i] + u[i] * max(organ.radii[i] - radii[i] - 1.5, 0.0)
            for i in range(3)
        )
        # Conservative containment: normalized center offset plus normalized
        # lesion extent must stay inside the unit ball.
        margin = np.sqrt(
            sum(((center[i] - organ.center[i]) / organ.radii[i]) ** 2 for i in range(3))
        ) + max(radii[i] / organ.radii[i] for i in range(3))
        if margin <= 0.98:
            return center
    raise ValidationError("could not place a lesion inside the organ ellipsoid")


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3, GroundTruth]:
    """Render a phantom volume and its exact ground truth.

    Deterministic for a fixed spec: instance geometry, texture, node
    placement, and noise are all drawn in a fixed order from spec.seed.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    organ_mask = _ellipsoid_mask(dims, spec.organ.center, spec.organ.radii)
    if not organ_mask.any():
        raise ValidationError("organ ellipsoid does not intersect the volume")

    vol = np.full(dims, BACKGROUND_HU, dtype=np.float64)
    vol[organ_mask] = spec.organ.mean_hu

    instances = list(spec.lesions)
    instances.extend(_sample_node_specs(rng, spec.organ, spec.node_count, instances))
    if len(instances) > 255:
        raise ValidationError("more than 255 lesion instances")

    labels = np.zeros(dims, dtype=np.uint8)
    boxes = []
    for k, les in enumerate(instances, start=1):
        m = _ellipsoid_mask(dims, les.center, les.radii)
        if not m.any():
            raise ValidationError(f"lesion {k} rasterizes to zero voxels")
        if np.any(m & ~organ_mask):
            raise ValidationError(f"lesion {k} escapes the organ ellipsoid")
        if np.any(labels[m] != 0):
            raise ValidationError(f"lesion {k} overlaps an earlier instance")
        vol[m] = spec.organ.mean_hu - les.contrast
        if les.sigma_tex > 0:
            vol += _texture_field(rng, dims, m, les.center, les.radii, les.sigma_tex)
        labels[m] = k
        boxes.append(_tight_box(m))

    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=dims)

    gt = GroundTruth(
        mask=Mask3(labels, spec.spacing),
        boxes=tuple(boxes),
        organ_box=_tight_box(organ_mask),
    )
    return Volume3.from_array(vol, spec.spacing), gt


DEFAULT_DIMS = (96, 96, 48)


def sample_spec(seed: int, dims: tuple[int, int, int] = DEFAULT_DIMS) -> PhantomSpec:
    """Draw a randomized phantom spec from the default desk-scale ranges:
    1-4 lesions (contrast 5-40 HU, base radius 3-15 voxels, texture 0-15),
    0-2 node-like blobs, noise sigma 3-10."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    organ = OrganSpec(
        center=(
            nx / 2 + rng.uniform(-3, 3),
            ny / 2 + rng.uniform(-3, 3),
            nz / 2 + rng.uniform(-1.5, 1.5),
        ),
        radii=(
            nx * rng.uniform(0.29, 0.34),
            ny * rng.uniform(0.26, 0.31),
            nz * rng.uniform(0.30, 0.36),
        ),
    )
    lesions = []

    def place(radii, contrast, sigma_tex):
        for _ in range(50):
            center = _sample_center_inside(rng, organ, radii)
            if all(_separated(center, radii, o.center, o.radii) for o in lesions):
                lesions.append(LesionSpec(center, radii, contrast, sigma_tex))
                return

    n_lesions = int(rng.integers(1, 5))
    for _ in range(n_lesions):
        base = rng.uniform(3.0, 15.0)
        radii = tuple(
            float(np.clip(base * rng.uniform(0.8, 1.2), 2.0, 0.62 * organ.radii[i]))
            for i in range(3)
        )
        place(radii, float(rng.uniform(5.0, 40.0)), float(rng.uniform(0.0, 15.0)))

    # Node-like blobs are sampled here (rather than via node_count) so the
    # dataset manifest carries complete per-instance metadata.
    n_nodes = int(rng.integers(0, 3))
    for _ in range(n_nodes):
        r = rng.uniform(3.0, 6.0)
        radii = tuple(float(max(2.0, r * rng.uniform(0.85, 1.15))) for _ in range(3))
        place(radii, float(rng.uniform(5.0, 15.0)), float(rng.uniform(0.0, 3.0)))

    return PhantomSpec(
        seed=seed,
        dims=dims,
        organ=organ,
        lesions=tuple(lesions),
        noise_sigma=float(rng.uniform(3.0, 10.0)),
        node_count=0,
    )


def _separated(c1, r1, c2, r2, gap: float = 2.5) -> bool:
    d = np.sqrt(sum((a - b) ** 2 for a, b in zip(c1, c2)))
    return d >= max(r1) + max(r2) + gap


def generate_dataset(count: int, seed: int, out_dir) -> list[dict]:
    """Write `count` LSV1/LSM1 pairs plus manifest.json; child seeds are
    seed + index.  Returns the manifest entries."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    for i in range(count):
        spec = sample_spec(seed + i)
        vol, gt = generate_phantom(spec)
        vol_name = f"vol_{i:03d}.lsv"
        msk_name = f"msk_{i:03d}.lsm"
        write_volume(vol, os.path.join(out_dir, vol_name))
        write_mask(gt.mask, os.path.join(out_dir, msk_name))
        lesions_meta = [
            {
                "label": k,
                "box_min": list(box.min),
                "box_max": list(box.max),
                "contrast": spec.lesions[k - 1].contrast,
                "radii": list(spec.lesions[k - 1].radii),
            }
            for k, box in enumerate(gt.boxes, start=1)
        ]
        manifest.append(
            {
                "volume": vol_name,
                "mask": msk_name,
                "lesions": lesions_meta,
            }
        )
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest
