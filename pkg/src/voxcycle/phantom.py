"""Synthetic cardiac-like phantoms for desk-scale runs and tests.

Each phantom is a stack of nested ellipsoidal shells with equal-volume
bands, one band per foreground label, plus per-label Gaussian
intensities. The two modality styles share the exact label geometry for
a given seed but draw intensities from different per-tissue
distributions (with inverted contrast), so a translation model can be
probed against a known ground truth.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .evaluation import label_names_for
from .volume_io import Domain, LabelMap, Provenance, Sample, Volume

PSEUDO_CT = "pseudo_ct"
PSEUDO_MRI = "pseudo_mri"

_STYLE_CODE = {PSEUDO_CT: 0, PSEUDO_MRI: 1}
_STYLE_DOMAIN = {PSEUDO_CT: Domain.A, PSEUDO_MRI: Domain.B}


class PhantomSpec:
    """Parameters of one synthetic sample."""

    def __init__(self, shape=(32, 32, 32), n_labels=4, seed=0, modality_style=PSEUDO_CT):
        self.shape = tuple(int(s) for s in shape)
        self.n_labels = int(n_labels)
        self.seed = int(seed)
        self.modality_style = modality_style
        if len(self.shape) != 3 or any(s % 32 != 0 or s < 32 for s in self.shape):
            raise ValidationError(f"phantom shape must be divisible by 32, got {self.shape}")
        if self.n_labels not in (4, 7):
            raise ValidationError(f"n_labels must be 4 or 7, got {self.n_labels}")
        if modality_style not in _STYLE_CODE:
            raise ValidationError(f"unknown modality style {modality_style!r}")


def _label_geometry(spec: PhantomSpec) -> np.ndarray:
    # geometry stream depends on the seed only, never on the style
    rng = np.random.default_rng([spec.seed, 17])
    shape = np.array(spec.shape, dtype=float)
    center = shape / 2.0 + rng.uniform(-1, 1, size=3) * shape / 16.0
    base = 0.42 * shape.min()
    semi = base * (1.0 + rng.uniform(-0.1, 0.1, size=3))

    grid = np.stack(
        np.meshgrid(*(np.arange(n, dtype=float) for n in spec.shape), indexing="ij")
    )
    rho = np.sqrt(sum(((grid[i] - center[i]) / semi[i]) ** 2 for i in range(3)))

    # equal-volume bands: boundaries at (k/n)^(1/3) of the outer radius
    n = spec.n_labels
    bounds = (np.arange(1, n + 1) / n) ** (1.0 / 3.0)
    labels = np.zeros(spec.shape, dtype=np.int16)
    inner = 0.0
    for k, outer in enumerate(bounds, start=1):
        labels[(rho >= inner) & (rho < outer)] = k
        inner = outer
    return labels


_STYLE_INTENSITY = {
    # per-style (background mean, per-label step, noise sigma); steps stay
    # well clear of the noise so per-label supports remain separable
    PSEUDO_CT: (-100.0, 120.0, 18.0),
    PSEUDO_MRI: (900.0, -110.0, 20.0),
}


def generate_phantom(spec: PhantomSpec) -> Sample:
    """Deterministic phantom Sample for the given spec."""
    labels = _label_geometry(spec)
    bg, step, sigma = _STYLE_INTENSITY[spec.modality_style]
    rng = np.random.default_rng([spec.seed, _STYLE_CODE[spec.modality_style], 29])
    means = bg + step * labels.astype(np.float32)
    data = means + sigma * rng.standard_normal(spec.shape).astype(np.float32)

    label_set = tuple(
        (k, name) for k, name in enumerate(label_names_for(spec.n_labels), start=1)
    )
    volume = Volume(data=data.astype(np.float32))
    labelmap = LabelMap(data=labels, label_set=label_set)
    return Sample(
        volume=volume,
        labels=labelmap,
        domain=_STYLE_DOMAIN[spec.modality_style],
        provenance=Provenance.ORIGINAL,
        name=f"phantom_{spec.seed}_{spec.modality_style}",
    )


def generate_phantom_pair(shape, n_labels, seed) -> tuple[Sample, Sample]:
    """(pseudo_ct, pseudo_mri) Samples sharing the same label geometry."""
    ct = generate_phantom(PhantomSpec(shape, n_labels, seed, PSEUDO_CT))
    mri = generate_phantom(PhantomSpec(shape, n_labels, seed, PSEUDO_MRI))
    return ct, mri
