"""Spatial augmentation of volume/label pairs.

Four families, applied jointly to intensities and labels where the
transform is geometric: normalization, random anisotropy (downsample one
axis and resample back), random elastic deformation from a control-point
grid, and random affine. Every output of generate_augmented_set draws
its own RNG stream from (seed, output index), so generation order and
parallelism cannot change results.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import ValidationError
from .volume_io import (
    Domain,
    LabelMap,
    Provenance,
    Sample,
    Volume,
    write_labelmap,
    write_volume,
)

ZSCORE = "zscore"
RESCALE_UNIT = "rescale_unit"

# fixed application order when composing: intensity ops before geometric
_FAMILIES = ("anisotropy", "elastic", "affine")


@dataclass
class AugmentSpec:
    """Augmentation parameters; defaults target 256-scale volumes.

    The elastic defaults violate the fold-over guard on small grids, so
    desk-scale runs must shrink max displacement or coarsen the control
    grid (see random_elastic).
    """

    seed: int = 0
    n_outputs: int = 200
    anisotropy_axes: tuple[int, ...] = (0, 1, 2)
    anisotropy_factor_range: tuple[float, float] = (1.5, 4.0)
    elastic_grid: tuple[int, int, int] = (7, 7, 7)
    elastic_max_displacement: float = 8.0
    affine_scale_range: tuple[float, float] = (0.9, 1.1)
    affine_rotation_deg: tuple[float, float] = (-10.0, 10.0)
    affine_translation_vox: tuple[float, float] = (-5.0, 5.0)
    normalization: str = ZSCORE
    clip_percentiles: tuple[float, float] = (0.5, 99.5)
    compose: bool = False  # apply all three families instead of drawing one

    def __post_init__(self):
        if self.n_outputs < 0:
            raise ValidationError(f"n_outputs must be >= 0, got {self.n_outputs}")
        for name in ("anisotropy_factor_range", "affine_scale_range", "affine_rotation_deg", "affine_translation_vox"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} has lower > upper: ({lo}, {hi})")
        if self.anisotropy_factor_range[0] < 1.0:
            raise ValidationError("anisotropy factors must be >= 1")
        if any(g < 2 for g in self.elastic_grid):
            raise ValidationError(f"elastic grid needs >= 2 control points per axis, got {self.elastic_grid}")
        if self.elastic_max_displacement < 0:
            raise ValidationError("elastic max displacement must be >= 0")
        if self.normalization not in (ZSCORE, RESCALE_UNIT):
            raise ValidationError(f"unknown normalization {self.normalization!r}")
        lo, hi = self.clip_percentiles
        if not (0 <= lo < hi <= 100):
            raise ValidationError(f"bad clip percentiles ({lo}, {hi})")
        if any(a not in (0, 1, 2) for a in self.anisotropy_axes) or not self.anisotropy_axes:
            raise ValidationError(f"anisotropy axes must be a nonempty subset of (0,1,2)")


def normalize(v: Volume, spec: AugmentSpec) -> Volume:
    """Percentile-clip then zscore or rescale intensities to [-1, 1]."""
    data = v.data
    lo, hi = np.percentile(data, spec.clip_percentiles)
    clipped = np.clip(data, lo, hi)
    if spec.normalization == ZSCORE:
        mu = clipped.mean(dtype=np.float64)
        sd = clipped.std(dtype=np.float64)
        if sd < 1e-12:
            warnings.warn("constant volume: zscore undefined, returning zeros", stacklevel=2)
            out = np.zeros_like(data)
        else:
            out = ((clipped - mu) / sd).astype(data.dtype)
    else:
        mn, mx = clipped.min(), clipped.max()
        if mx - mn < 1e-12:
            warnings.warn("constant volume: rescale undefined, returning zeros", stacklevel=2)
            out = np.zeros_like(data)
        else:
            out = (2.0 * (clipped - mn) / (mx - mn) - 1.0).astype(data.dtype)
    return replace(v, data=out)


def _zoom(data, out_shape, order):
    factors = [o / i for o, i in zip(out_shape, data.shape)]
    return ndimage.zoom(data, factors, order=order, mode="nearest", grid_mode=True)


def random_anisotropy(v: Volume, labels: LabelMap, spec: AugmentSpec, rng) -> tuple[Volume, LabelMap]:
    """Degrade one random axis: downsample by a drawn factor, resample back.

    An anti-alias blur along the axis stands in for slice-thickness
    integration, so thin structures blur out instead of aliasing away.
    Intensity-only; labels pass through unchanged.
    """
    axis = int(rng.choice(np.asarray(spec.anisotropy_axes)))
    factor = float(rng.uniform(*spec.anisotropy_factor_range))
    n = v.shape[axis]
    small = max(1, int(round(n / factor)))
    if small == n:
        return replace(v, data=v.data.copy()), labels
    low_shape = list(v.shape)
    low_shape[axis] = small
    blurred = ndimage.gaussian_filter1d(v.data, sigma=(factor - 1.0) / 2.0, axis=axis)
    low = _zoom(blurred, low_shape, order=1)
    out = _zoom(low, v.shape, order=1)
    return replace(v, data=out.astype(v.data.dtype)), labels


def _control_spacings(shape, grid):
    return [
        (n - 1) / (g - 1) if n > 1 else float("inf") for n, g in zip(shape, grid)
    ]


def random_elastic(v: Volume, labels: LabelMap, spec: AugmentSpec, rng) -> tuple[Volume, LabelMap]:
    """Warp both grids with one displacement field drawn on a control grid.

    The control-point displacements are cubic-B-spline interpolated to a
    dense field; intensities are pulled back trilinearly, labels with
    nearest-neighbor. max displacement must stay below half the control
    spacing or the field could fold over itself.
    """
    grid = spec.elastic_grid
    max_disp = spec.elastic_max_displacement
    min_spacing = min(_control_spacings(v.shape, grid))
    if max_disp >= 0.5 * min_spacing:
        raise ValidationError(
            f"elastic max displacement {max_disp} >= half control spacing "
            f"{0.5 * min_spacing:.2f} (fold-over guard); coarsen the grid or shrink it"
        )
    control = rng.uniform(-max_disp, max_disp, size=(3, *grid))
    coords = np.indices(v.shape, dtype=np.float32)
    if max_disp > 0:
        scale = [
            (g - 1) / (n - 1) if n > 1 else 0.0 for n, g in zip(v.shape, grid)
        ]
        control_coords = [coords[i] * scale[i] for i in range(3)]
        for i in range(3):
            coords[i] += ndimage.map_coordinates(
                control[i], control_coords, order=3, mode="nearest"
            ).astype(np.float32)
    vol_out = ndimage.map_coordinates(
        v.data, coords, order=1, mode="constant", cval=float(v.data.min())
    )
    lbl_out = ndimage.map_coordinates(labels.data, coords, order=0, mode="constant", cval=0)
    return (
        replace(v, data=vol_out.astype(v.data.dtype)),
        replace(labels, data=lbl_out),
    )


def apply_affine(v: Volume, labels: LabelMap, scale, rotation_deg, translation) -> tuple[Volume, LabelMap]:
    """Scale/rotate/translate both grids about the volume center.

    Positive translation moves content toward higher indices. Out-of-field
    voxels are filled with the intensity minimum and label 0.
    """
    r = Rotation.from_euler("xyz", rotation_deg, degrees=True).as_matrix()
    forward = r @ np.diag(np.asarray(scale, dtype=float))
    center = (np.array(v.shape, dtype=float) - 1.0) / 2.0
    m = np.linalg.inv(forward)
    offset = center - m @ (center + np.asarray(translation, dtype=float))
    vol_out = ndimage.affine_transform(
        v.data, m, offset=offset, order=1, mode="constant", cval=float(v.data.min())
    )
    lbl_out = ndimage.affine_transform(
        labels.data, m, offset=offset, order=0, mode="constant", cval=0
    )
    return (
        replace(v, data=vol_out.astype(v.data.dtype)),
        replace(labels, data=lbl_out),
    )


def random_affine(v: Volume, labels: LabelMap, spec: AugmentSpec, rng) -> tuple[Volume, LabelMap]:
    """Apply one sampled scale/rotation/translation to both grids."""
    scale = rng.uniform(*spec.affine_scale_range, size=3)
    rot_deg = rng.uniform(*spec.affine_rotation_deg, size=3)
    trans = rng.uniform(*spec.affine_translation_vox, size=3)
    return apply_affine(v, labels, scale, rot_deg, trans)


_FAMILY_FN = {
    "anisotropy": random_anisotropy,
    "elastic": random_elastic,
    "affine": random_affine,
}


def _augment_one(src: Sample, spec: AugmentSpec, index: int) -> tuple[Sample, dict]:
    rng = np.random.default_rng([spec.seed, index])
    vol = normalize(src.volume, spec)
    lbl = src.labels
    if spec.compose:
        families = list(_FAMILIES)
    else:
        families = [_FAMILIES[int(rng.integers(len(_FAMILIES)))]]
    for fam in families:
        vol, lbl = _FAMILY_FN[fam](vol, lbl, spec, rng)
    out = Sample(
        volume=vol,
        labels=lbl,
        domain=src.domain,
        provenance=Provenance.AUGMENTED,
        name=f"aug_{src.domain.value.lower()}_{index:03d}",
    )
    record = {
        "index": index,
        "domain": src.domain.value,
        "source": src.name,
        "transforms": families,
    }
    return out, record


def generate_augmented_set(samples: list[Sample], spec: AugmentSpec) -> list[Sample]:
    """Produce spec.n_outputs augmented Samples, sources chosen round-robin."""
    return [s for s, _ in generate_augmented_records(samples, spec)]


def generate_augmented_records(samples: list[Sample], spec: AugmentSpec) -> list[tuple[Sample, dict]]:
    if not samples:
        raise ValidationError("cannot augment an empty sample set")
    return [
        _augment_one(samples[k % len(samples)], spec, k) for k in range(spec.n_outputs)
    ]


def augment_to_dir(samples_by_domain: dict, spec: AugmentSpec, out_dir) -> dict:
    """Write spec.n_outputs augmented pairs per domain plus one manifest.

    Layout: <out>/<domain>/<index>_img.nii.gz and <index>_lbl.nii.gz.
    """
    out_dir = Path(out_dir)
    manifest = {"seed": spec.seed, "spec": asdict(spec), "outputs": []}
    for domain in sorted(samples_by_domain, key=lambda d: Domain(d).value):
        pool = samples_by_domain[domain]
        sub = out_dir / Domain(domain).value.lower()
        sub.mkdir(parents=True, exist_ok=True)
        for sample, record in generate_augmented_records(pool, spec):
            img = sub / f"{record['index']:03d}_img.nii.gz"
            lbl = sub / f"{record['index']:03d}_lbl.nii.gz"
            write_volume(sample.volume, img)
            write_labelmap(sample.labels, lbl)
            record["img"] = str(img.relative_to(out_dir))
            record["lbl"] = str(lbl.relative_to(out_dir))
            manifest["outputs"].append(record)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
