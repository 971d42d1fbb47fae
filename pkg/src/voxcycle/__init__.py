"""Cross-modality 3D volume translation and cardiac segmentation.

Library layout:

- volume_io: Volume/LabelMap/Sample types, NIfTI I/O, reorientation,
  cropping and resizing
- augment: deterministic spatial augmentation of volume/label pairs
- networks: 3D U-Net segmentor, 3D U-Net generator, 3D patch discriminator
- losses: adversarial, cycle, Dice, cross-entropy and combined objectives
- pipeline: the three training phases, synthesis, patch sampling,
  checkpoints
- evaluation: per-label Dice reports
- phantom: synthetic paired pseudo-CT/pseudo-MRI volumes
- config / workflow / cli: configuration schema and the command line
"""

from .config import PipelineConfig, load_config, validate_config
from .errors import NiftiFormatError, PipelineError, ShapeError, ValidationError
from .volume_io import (
    Domain,
    LabelMap,
    Provenance,
    Sample,
    Volume,
    crop,
    read_labelmap,
    read_volume,
    resize_ct,
    to_ras,
    write_labelmap,
    write_volume,
)

__version__ = "0.1.0"
