"""Volumes, label maps and the geometric preprocessing they go through.

A Volume is a 3D scalar grid plus voxel spacing and a 4x4 voxel-to-world
affine; a LabelMap is the aligned integer segmentation. Orientation codes
(RAS, LAS, PSR, ...) are decoded from the affine: letter j names the
anatomical direction that voxel axis j points toward.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError
from .nifti import read_nifti, write_nifti

# letter for the (negative, positive) direction of each world axis
_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))
_LETTER_TO_AXIS = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


class Domain(str, Enum):
    A = "A"
    B = "B"

    @property
    def other(self) -> "Domain":
        return Domain.B if self is Domain.A else Domain.A


class Provenance(str, Enum):
    ORIGINAL = "original"
    AUGMENTED = "augmented"
    SYNTHESIZED = "synthesized"


def _axis_assignment(affine) -> list[tuple[int, int]]:
    """Per voxel axis: (dominant world axis, sign), ties broken x,y,z."""
    m = np.asarray(affine, dtype=float)[:3, :3]
    taken: list[int] = []
    out = []
    for j in range(3):
        col = m[:, j]
        order = np.argsort(-np.abs(col), kind="stable")
        w = next(int(i) for i in order if int(i) not in taken)
        taken.append(w)
        out.append((w, 1 if col[w] >= 0 else -1))
    return out


def orientation_from_affine(affine) -> str:
    """Three-letter anatomical code of the grid described by `affine`."""
    return "".join(
        _AXIS_LETTERS[w][(s + 1) // 2] for w, s in _axis_assignment(affine)
    )


def affine_for_orientation(code: str, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Build a diagonal-up-to-permutation affine realizing an orientation code."""
    code = code.upper()
    if sorted(_LETTER_TO_AXIS[c][0] for c in code) != [0, 1, 2]:
        raise ValidationError(f"invalid orientation code {code!r}")
    affine = np.zeros((4, 4))
    affine[3, 3] = 1.0
    for j, letter in enumerate(code):
        w, s = _LETTER_TO_AXIS[letter]
        affine[w, j] = s * spacing[j]
    affine[:3, 3] = origin
    return affine


def all_orientation_codes() -> list[str]:
    """The 48 valid permutation/sign codes."""
    codes = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            codes.append(
                "".join(_AXIS_LETTERS[w][(s + 1) // 2] for w, s in zip(perm, signs))
            )
    return codes


def _validate_grid(data: np.ndarray, spacing, affine) -> None:
    if data.ndim != 3:
        raise ShapeError(f"expected 3 spatial dimensions, got shape {data.shape}")
    if any(n < 1 for n in data.shape):
        raise ShapeError(f"every spatial dimension must be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValidationError(f"spacing must be 3 positive numbers, got {spacing}")
    if affine.shape != (4, 4):
        raise ValidationError(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise ValidationError("affine is not invertible")


def _default_affine(spacing) -> np.ndarray:
    return np.diag([spacing[0], spacing[1], spacing[2], 1.0])


@dataclass
class Volume:
    """3D intensity grid with spacing and voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        _validate_grid(self.data, self.spacing, self.affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def orientation(self) -> str:
        return orientation_from_affine(self.affine)


@dataclass
class LabelMap:
    """Integer segmentation aligned voxel-for-voxel with its Volume."""

    data: np.ndarray
    label_set: tuple[tuple[int, str], ...] = ()
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            rounded = np.rint(self.data)
            if not np.allclose(self.data, rounded, atol=1e-3):
                raise ValidationError("label map contains non-integer values")
            self.data = rounded.astype(np.int16)
        if self.data.min() < 0:
            raise ValidationError("label values must be non-negative")
        if not self.label_set:
            self.label_set = tuple(
                (int(v), f"label_{int(v)}") for v in np.unique(self.data) if v != 0
            )
        self.label_set = tuple((int(i), str(n)) for i, n in self.label_set)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.affine is None:
            self.affine = _default_affine(self.spacing)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        _validate_grid(self.data, self.spacing, self.affine)
        allowed = {0} | {i for i, _ in self.label_set}
        present = set(int(v) for v in np.unique(self.data))
        if not present <= allowed:
            raise ValidationError(
                f"label map contains ids {sorted(present - allowed)} outside the label set"
            )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def orientation(self) -> str:
        return orientation_from_affine(self.affine)

    def ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.label_set)

    def id_for(self, name: str) -> int:
        for i, n in self.label_set:
            if n == name:
                return i
        raise ValidationError(f"label {name!r} not in label set")


@dataclass
class Sample:
    """A volume/label pair with its domain and provenance tags."""

    volume: Volume
    labels: LabelMap
    domain: Domain
    provenance: Provenance = Provenance.ORIGINAL
    name: str = ""

    def __post_init__(self):
        self.domain = Domain(self.domain)
        self.provenance = Provenance(self.provenance)
        if self.volume.shape != self.labels.shape:
            raise ShapeError(
                f"volume shape {self.volume.shape} != label shape {self.labels.shape}"
            )
        if not np.allclose(self.volume.spacing, self.labels.spacing, atol=1e-6):
            raise ValidationError("volume and labels disagree on spacing")
        if not np.allclose(self.volume.affine, self.labels.affine, atol=1e-6):
            raise ValidationError("volume and labels disagree on affine")


def read_volume(path) -> Volume:
    """Read a .nii/.nii.gz intensity volume."""
    data, affine, spacing = read_nifti(path)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float32)
    return Volume(data=data, spacing=spacing, affine=affine)


def read_labelmap(path, label_set=()) -> LabelMap:
    """Read a .nii/.nii.gz label map, keeping the on-disk integer dtype."""
    data, affine, spacing = read_nifti(path)
    return LabelMap(data=data, label_set=tuple(label_set), spacing=spacing, affine=affine)


def write_volume(v: Volume, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise ValidationError(f"parent directory does not exist: {path.parent}")
    write_nifti(path, v.data, v.affine, v.spacing)


def write_labelmap(m: LabelMap, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise ValidationError(f"parent directory does not exist: {path.parent}")
    write_nifti(path, m.data, m.affine, m.spacing)


def _reorient_to_ras(data, spacing, affine):
    affine = affine.copy()
    data = data
    assignment = _axis_assignment(affine)
    # flip axes that point in negative world directions
    for j, (_, sign) in enumerate(assignment):
        if sign < 0:
            n = data.shape[j]
            data = np.flip(data, axis=j)
            affine[:3, 3] += affine[:3, j] * (n - 1)
            affine[:3, j] = -affine[:3, j]
    # permute so voxel axis k maps to world axis k
    world = [w for w, _ in assignment]
    perm = [world.index(k) for k in range(3)]
    if perm != [0, 1, 2]:
        data = np.transpose(data, perm)
        affine = affine[:, perm + [3]]
        spacing = tuple(spacing[j] for j in perm)
    return np.ascontiguousarray(data), spacing, affine


def to_ras(obj):
    """Reorient a Volume or LabelMap to RAS, preserving world coordinates.

    Pure axis flips/permutations: no resampling, idempotent, and the world
    position of every voxel is unchanged.
    """
    data, spacing, affine = _reorient_to_ras(obj.data, obj.spacing, obj.affine)
    return replace(obj, data=data, spacing=spacing, affine=affine)


def _scaled_affine(affine, in_shape, out_shape):
    # pixel-edge-aligned resampling: old = (new + 0.5) * (in/out) - 0.5
    s = np.array([i / o for i, o in zip(in_shape, out_shape)])
    out = affine.copy()
    out[:3, :3] = affine[:3, :3] @ np.diag(s)
    out[:3, 3] = affine[:3, 3] + affine[:3, :3] @ (0.5 * s - 0.5)
    return out


def _zoom_to_shape(data, out_shape, order, cval=0.0):
    factors = [o / i for o, i in zip(out_shape, data.shape)]
    return ndimage.zoom(
        data, factors, order=order, mode="grid-constant", cval=cval, grid_mode=True
    )


def resize_ct(v: Volume, labels: LabelMap, target_xy: int = 256) -> tuple[Volume, LabelMap]:
    """Resample to target_xy x target_xy x Z, Z keeping the width-depth ratio.

    Intensities are resampled trilinearly, labels nearest-neighbor, and
    spacing is rescaled so the physical extent is preserved.
    """
    if target_xy < 1:
        raise ValidationError(f"target_xy must be >= 1, got {target_xy}")
    nx, ny, nz = v.shape
    if nx != ny:
        warnings.warn(
            f"anisotropic XY input ({nx}x{ny}) mapped to square {target_xy}x{target_xy}",
            stacklevel=2,
        )
    out_shape = (target_xy, target_xy, max(1, int(np.round(nz * target_xy / nx))))
    if out_shape == v.shape:
        return v, labels
    new_affine = _scaled_affine(v.affine, v.shape, out_shape)
    new_spacing = tuple(
        sp * i / o for sp, i, o in zip(v.spacing, v.shape, out_shape)
    )
    vol_out = _zoom_to_shape(v.data, out_shape, order=1, cval=float(v.data.min()))
    lbl_out = _zoom_to_shape(labels.data, out_shape, order=0)
    return (
        Volume(data=vol_out, spacing=new_spacing, affine=new_affine),
        LabelMap(data=lbl_out, label_set=labels.label_set, spacing=new_spacing, affine=new_affine),
    )


def crop(v: Volume, labels: LabelMap, bbox) -> tuple[Volume, LabelMap]:
    """Extract the half-open box (x0,x1,y0,y1,z0,z1), keeping world coordinates."""
    if len(bbox) != 6:
        raise ValidationError(f"bbox must have 6 entries, got {len(bbox)}")
    x0, x1, y0, y1, z0, z1 = (int(b) for b in bbox)
    lo, hi = (x0, y0, z0), (x1, y1, z1)
    for axis, (a, b) in enumerate(zip(lo, hi)):
        if a < 0 or b > v.shape[axis]:
            raise ValidationError(
                f"bbox {bbox} out of bounds for shape {v.shape} on axis {axis}"
            )
        if a >= b:
            raise ValidationError(f"bbox {bbox} is empty on axis {axis}")
    sl = (slice(x0, x1), slice(y0, y1), slice(z0, z1))
    affine = v.affine.copy()
    affine[:3, 3] += affine[:3, :3] @ np.array(lo, dtype=float)
    vol = Volume(data=v.data[sl].copy(), spacing=v.spacing, affine=affine)
    lbl = LabelMap(
        data=labels.data[sl].copy(),
        label_set=labels.label_set,
        spacing=labels.spacing,
        affine=affine,
    )
    return vol, lbl
