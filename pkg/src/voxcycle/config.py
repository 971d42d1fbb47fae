"""Configuration schema binding the pipeline stages together.

Configs are versioned YAML. Every run is driven by one root ``seed``;
consumers derive their streams from it so that a fixed config is
bit-reproducible end to end:

- phantom sample i of domain d: ``SeedSequence([seed, domain_code, i])``
- augmentation output k:        ``default_rng([seed, k])``
- training phase p, epoch e:    ``default_rng([seed, p, e])``
- torch init for phase p:       ``SeedSequence([seed, p])``

Relative paths (data directories, output_dir) resolve against the
directory containing the config file.
"""

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import RESCALE_UNIT, ZSCORE, AugmentSpec
from .errors import ValidationError
from .evaluation import FOUR_LABEL, SEVEN_LABEL
from .losses import LossWeights
from .pipeline import AblationFlags, PhasePlan

CONFIG_VERSION = 1

SOURCE_PHANTOM = "phantom"
SOURCE_DIRECTORY = "directory"

_NORMS = ("instance", "batch", "none")


@dataclass
class DomainPaths:
    """Input location for one domain when reading scans from disk."""

    dir: Path
    resize_xy: int | None = None


@dataclass
class DataConfig:
    source: str = SOURCE_PHANTOM
    n_labels: int = 4
    val_fraction: float = 0.2
    phantom_shape: tuple[int, int, int] = (32, 32, 32)
    phantom_per_domain: int = 4
    domain_a: DomainPaths | None = None
    domain_b: DomainPaths | None = None
    label_map: dict[int, int] = field(default_factory=dict)
    crops: dict[str, tuple[int, int, int, int, int, int]] = field(default_factory=dict)


@dataclass
class NetworkConfig:
    base_filters: int = 16
    norm: str = "instance"


@dataclass
class PipelineConfig:
    seed: int
    output_dir: Path
    eval_mode: str
    data: DataConfig
    augment: AugmentSpec
    networks: NetworkConfig
    weights: LossWeights
    phases: PhasePlan
    ablations: AblationFlags
    config_version: int = CONFIG_VERSION
    source_path: Path | None = None


class _Collector:
    """Accumulates violations so validation reports all of them at once."""

    def __init__(self):
        self.violations: list[str] = []

    def add(self, field_name: str, rule: str) -> None:
        self.violations.append(f"{field_name}: {rule}")

    def section(self, raw, name: str, allowed: set[str]) -> dict:
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            self.add(name, "must be a mapping")
            return {}
        for key in raw:
            if key not in allowed:
                self.add(f"{name}.{key}", "unknown field")
        return raw


def _as_int_triple(value, default):
    if value is None:
        return default
    if not (isinstance(value, (list, tuple)) and len(value) == 3
            and all(isinstance(x, int) and not isinstance(x, bool) for x in value)):
        return None
    return tuple(value)


def _check_int(col, raw, section, key, default, minimum):
    value = raw.get(key, default)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        col.add(f"{section}.{key}", f"must be an integer >= {minimum}, got {value!r}")
        return default
    return value


def _check_number(col, raw, section, key, default, *, positive=False, nonnegative=False):
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        col.add(f"{section}.{key}", f"must be a number, got {value!r}")
        return default
    if positive and value <= 0:
        col.add(f"{section}.{key}", f"must be > 0, got {value}")
        return default
    if nonnegative and value < 0:
        col.add(f"{section}.{key}", f"must be >= 0, got {value}")
        return default
    return float(value)


def _build_data(col, raw, base_dir, eval_mode) -> DataConfig:
    raw = col.section(raw, "data", {
        "source", "n_labels", "val_fraction", "phantom", "domain_a", "domain_b",
        "label_map", "crops",
    })
    source = raw.get("source", SOURCE_PHANTOM)
    if source not in (SOURCE_PHANTOM, SOURCE_DIRECTORY):
        col.add("data.source", f"must be one of ({SOURCE_PHANTOM!r}, {SOURCE_DIRECTORY!r}), got {source!r}")
        source = SOURCE_PHANTOM
    n_labels = raw.get("n_labels", 4)
    if n_labels not in (4, 7):
        col.add("data.n_labels", f"must be 4 or 7, got {n_labels!r}")
        n_labels = 4
    if eval_mode == SEVEN_LABEL and n_labels != 7:
        col.add("eval_mode", "seven_label evaluation requires data.n_labels == 7")
    val_fraction = raw.get("val_fraction", 0.2)
    if isinstance(val_fraction, bool) or not isinstance(val_fraction, (int, float)) \
            or not 0 <= val_fraction < 1:
        col.add("data.val_fraction", f"must lie in [0, 1), got {val_fraction!r}")
        val_fraction = 0.2

    phantom = col.section(raw.get("phantom"), "data.phantom", {"shape", "per_domain"})
    shape = _as_int_triple(phantom.get("shape"), (32, 32, 32))
    if shape is None:
        col.add("data.phantom.shape", f"must be 3 integers, got {phantom.get('shape')!r}")
        shape = (32, 32, 32)
    elif any(n < 32 or n % 32 for n in shape):
        col.add("data.phantom.shape", f"each dim must be a positive multiple of 32, got {shape}")
    per_domain = _check_int(col, phantom, "data.phantom", "per_domain", 4, 1)

    domains = {}
    for key in ("domain_a", "domain_b"):
        sub = raw.get(key)
        if source == SOURCE_DIRECTORY:
            sub = col.section(sub, f"data.{key}", {"dir", "resize_xy"})
            if "dir" not in sub:
                col.add(f"data.{key}.dir", "required for directory data sources")
                continue
            path = (base_dir / sub["dir"]).resolve()
            if not path.is_dir():
                col.add(f"data.{key}.dir", f"referenced path does not exist: {path}")
            resize_xy = sub.get("resize_xy")
            if resize_xy is not None and (not isinstance(resize_xy, int)
                                          or isinstance(resize_xy, bool) or resize_xy < 1):
                col.add(f"data.{key}.resize_xy", f"must be a positive integer or omitted, got {resize_xy!r}")
                resize_xy = None
            domains[key] = DomainPaths(dir=path, resize_xy=resize_xy)
        elif sub is not None:
            col.add(f"data.{key}", "only valid for directory data sources")

    label_map = raw.get("label_map", {})
    if not isinstance(label_map, dict):
        col.add("data.label_map", f"must map raw label values to ids, got {label_map!r}")
        label_map = {}
    else:
        for k, v in label_map.items():
            if not isinstance(k, int) or not isinstance(v, int) or not 1 <= v <= n_labels:
                col.add("data.label_map", f"entries must be int -> id in 1..{n_labels}, got {k!r}: {v!r}")

    crops = raw.get("crops", {})
    if not isinstance(crops, dict):
        col.add("data.crops", f"must map scan name to a 6-integer bbox, got {crops!r}")
        crops = {}
    else:
        clean = {}
        for name, box in crops.items():
            if not (isinstance(box, (list, tuple)) and len(box) == 6
                    and all(isinstance(x, int) and not isinstance(x, bool) for x in box)):
                col.add(f"data.crops.{name}", f"bbox must be 6 integers (x0,x1,y0,y1,z0,z1), got {box!r}")
                continue
            if any(box[2 * i] >= box[2 * i + 1] for i in range(3)):
                col.add(f"data.crops.{name}", f"bbox must satisfy lo < hi per axis, got {tuple(box)}")
                continue
            clean[str(name)] = tuple(box)
        crops = clean

    return DataConfig(source=source, n_labels=n_labels, val_fraction=float(val_fraction),
                      phantom_shape=shape, phantom_per_domain=per_domain,
                      domain_a=domains.get("domain_a"), domain_b=domains.get("domain_b"),
                      label_map=dict(label_map), crops=crops)


def _build_augment(col, raw, seed) -> AugmentSpec:
    raw = col.section(raw, "augment", {
        "n_outputs", "anisotropy_axes", "anisotropy_factor_range", "elastic_grid",
        "elastic_max_displacement", "affine_scale_range", "affine_rotation_deg",
        "affine_translation_vox", "normalization", "clip_percentiles", "compose",
    })
    kwargs = {"seed": seed}
    for key, cast in (
        ("n_outputs", None), ("anisotropy_axes", tuple), ("anisotropy_factor_range", tuple),
        ("elastic_grid", tuple), ("elastic_max_displacement", None),
        ("affine_scale_range", tuple), ("affine_rotation_deg", tuple),
        ("affine_translation_vox", tuple), ("normalization", None),
        ("clip_percentiles", tuple), ("compose", None),
    ):
        if key in raw:
            value = raw[key]
            kwargs[key] = cast(value) if cast and isinstance(value, (list, tuple)) else value
    normalization = kwargs.get("normalization", ZSCORE)
    if normalization not in (ZSCORE, RESCALE_UNIT):
        col.add("augment.normalization", f"must be {ZSCORE!r} or {RESCALE_UNIT!r}, got {normalization!r}")
        kwargs.pop("normalization", None)
    try:
        return AugmentSpec(**kwargs)
    except (ValidationError, TypeError) as exc:
        col.add("augment", str(exc))
        return AugmentSpec(seed=seed)


def _build_networks(col, raw) -> NetworkConfig:
    raw = col.section(raw, "networks", {"base_filters", "norm"})
    base_filters = _check_int(col, raw, "networks", "base_filters", 16, 1)
    norm = raw.get("norm", "instance")
    if norm not in _NORMS:
        col.add("networks.norm", f"must be one of {_NORMS}, got {norm!r}")
        norm = "instance"
    return NetworkConfig(base_filters=base_filters, norm=norm)


def _build_weights(col, raw) -> LossWeights:
    raw = col.section(raw, "weights", {"lambda_adv", "lambda_cycle", "lambda_spatial"})
    values = {}
    for key in ("lambda_adv", "lambda_cycle", "lambda_spatial"):
        default = LossWeights.__dataclass_fields__[key].default
        value = raw.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
            col.add(f"weights.{key}", f"loss weights must be nonnegative numbers, got {value!r}")
            value = default
        values[key] = float(value)
    try:
        return LossWeights(**values)
    except ValidationError as exc:
        col.add("weights", str(exc))
        return LossWeights()


def _build_phases(col, raw) -> PhasePlan:
    raw = col.section(raw, "phases", {
        "phase1_epochs", "phase2_warmup_epochs", "phase2_spatial_epochs",
        "phase3_epochs", "learning_rate", "batch_size", "patch_size",
        "patches_per_sample", "phase2_steps_per_epoch",
    })
    kwargs = {}
    for key in ("phase1_epochs", "phase2_warmup_epochs", "phase2_spatial_epochs", "phase3_epochs"):
        kwargs[key] = _check_int(col, raw, "phases", key,
                                 PhasePlan.__dataclass_fields__[key].default, 0)
    kwargs["learning_rate"] = _check_number(col, raw, "phases", "learning_rate",
                                            PhasePlan.__dataclass_fields__["learning_rate"].default,
                                            positive=True)
    kwargs["batch_size"] = _check_int(col, raw, "phases", "batch_size", 1, 1)
    kwargs["patches_per_sample"] = _check_int(col, raw, "phases", "patches_per_sample", 4, 1)
    if raw.get("phase2_steps_per_epoch") is not None:
        kwargs["phase2_steps_per_epoch"] = _check_int(
            col, raw, "phases", "phase2_steps_per_epoch", 1, 1)
    patch = _as_int_triple(raw.get("patch_size"), (64, 64, 64))
    if patch is None:
        col.add("phases.patch_size", f"must be 3 integers, got {raw.get('patch_size')!r}")
        patch = (64, 64, 64)
    elif any(n < 32 or n % 32 for n in patch):
        col.add("phases.patch_size", f"patch dims divisible by 32 required, got {patch}")
        patch = (64, 64, 64)
    kwargs["patch_size"] = patch
    try:
        return PhasePlan(**kwargs)
    except ValidationError as exc:
        col.add("phases", str(exc))
        return PhasePlan()


def _build_ablations(col, raw) -> AblationFlags:
    raw = col.section(raw, "ablations", {
        "use_preprocess_augment", "use_synthesized", "use_shape_consistency",
    })
    kwargs = {}
    for key in ("use_preprocess_augment", "use_synthesized", "use_shape_consistency"):
        value = raw.get(key, True)
        if not isinstance(value, bool):
            col.add(f"ablations.{key}", f"must be true or false, got {value!r}")
            value = True
        kwargs[key] = value
    return AblationFlags(**kwargs)


def config_from_dict(raw: dict, base_dir=None, source_path=None):
    """Build a PipelineConfig, returning (config_or_none, violations)."""
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    col = _Collector()
    if not isinstance(raw, dict):
        return None, ["config: top level must be a mapping"]
    col.section(raw, "config", {
        "config_version", "seed", "output_dir", "eval_mode", "data", "augment",
        "networks", "weights", "phases", "ablations",
    })

    version = raw.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        col.add("config_version", f"supported version is {CONFIG_VERSION}, got {version!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        col.add("seed", f"must be a nonnegative integer, got {seed!r}")
        seed = 0
    if "output_dir" not in raw:
        col.add("output_dir", "required field")
    output_dir = base_dir / str(raw.get("output_dir", "runs"))
    eval_mode = raw.get("eval_mode", FOUR_LABEL)
    if eval_mode not in (FOUR_LABEL, SEVEN_LABEL):
        col.add("eval_mode", f"must be {FOUR_LABEL!r} or {SEVEN_LABEL!r}, got {eval_mode!r}")
        eval_mode = FOUR_LABEL

    data = _build_data(col, raw.get("data"), base_dir, eval_mode)
    augment = _build_augment(col, raw.get("augment"), seed)
    networks = _build_networks(col, raw.get("networks"))
    weights = _build_weights(col, raw.get("weights"))
    phases = _build_phases(col, raw.get("phases"))
    ablations = _build_ablations(col, raw.get("ablations"))

    if data.source == SOURCE_PHANTOM:
        if any(p > n for p, n in zip(phases.patch_size, data.phantom_shape)):
            col.add("phases.patch_size",
                    f"patch {phases.patch_size} exceeds phantom shape {data.phantom_shape}")
        guard = 0.5 * min((n - 1) / (g - 1) for n, g in zip(data.phantom_shape, augment.elastic_grid))
        if augment.elastic_max_displacement >= guard:
            col.add("augment.elastic_max_displacement",
                    f"must be < {guard:.2f} for shape {data.phantom_shape} and grid "
                    f"{augment.elastic_grid} to rule out fold-over")

    if col.violations:
        return None, col.violations
    return PipelineConfig(seed=seed, output_dir=output_dir, eval_mode=eval_mode,
                          data=data, augment=augment, networks=networks,
                          weights=weights, phases=phases, ablations=ablations,
                          config_version=CONFIG_VERSION, source_path=source_path), []


def _read_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ValidationError(f"unparseable config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return raw


def validate_config(path) -> list[str]:
    """Return every violated invariant in the config file (empty = valid)."""
    raw = _read_yaml(path)
    _, violations = config_from_dict(raw, base_dir=Path(path).resolve().parent,
                                     source_path=Path(path))
    return violations


def load_config(path) -> PipelineConfig:
    """Parse and validate; raises ValidationError listing all violations."""
    raw = _read_yaml(path)
    cfg, violations = config_from_dict(raw, base_dir=Path(path).resolve().parent,
                                       source_path=Path(path))
    if violations:
        detail = "\n  ".join(violations)
        raise ValidationError(f"invalid config {path}:\n  {detail}")
    return cfg
