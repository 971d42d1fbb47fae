"""File-based pipeline stages over one run directory.

Each stage reads only the artifacts of earlier stages and writes its own,
so stages can be run one subcommand at a time or all at once. Run layout:

    <output_dir>/
      data/          preprocessed originals (a/, b/, manifest.json)
      augmented/     spatially augmented training pairs
      synthesized/   cross-domain translations from the trained generators
      checkpoints/   all network checkpoints
      logs/          one JSON-lines file per training phase
      reports/       final Dice tables (txt, json, csv)
"""

import json
import os
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import augment_to_dir, normalize
from .config import SOURCE_PHANTOM, PipelineConfig
from .errors import ValidationError
from .evaluation import (
    evaluate,
    label_names_for,
    report_table,
    write_reports_csv,
    write_reports_json,
)
from .networks import load_checkpoint
from .phantom import PSEUDO_CT, PSEUDO_MRI, PhantomSpec, generate_phantom
from .pipeline import (
    TrainLog,
    phase1_pretrain_segmentors,
    phase2_train_gan,
    phase3_train_final,
    predict_labels,
    synthesize,
    to_tensors,
)
from .volume_io import (
    Domain,
    LabelMap,
    Provenance,
    Sample,
    crop,
    read_labelmap,
    read_volume,
    resize_ct,
    to_ras,
    write_labelmap,
    write_volume,
)

OUTPUT_DIR_ENV = "VOXCYCLE_OUTPUT_DIR"

_STYLE = {Domain.A: PSEUDO_CT, Domain.B: PSEUDO_MRI}
_DOMAIN_CODE = {Domain.A: 0, Domain.B: 1}


def resolve_output_dir(cfg: PipelineConfig) -> Path:
    override = os.environ.get(OUTPUT_DIR_ENV)
    return Path(override) if override else Path(cfg.output_dir)


class RunPaths:
    """All on-disk locations for one run."""

    def __init__(self, cfg: PipelineConfig):
        self.root = resolve_output_dir(cfg)
        self.data = self.root / "data"
        self.augmented = self.root / "augmented"
        self.synthesized = self.root / "synthesized"
        self.checkpoints = self.root / "checkpoints"
        self.logs = self.root / "logs"
        self.reports = self.root / "reports"

    def segmentor(self, d: Domain) -> Path:
        return self.checkpoints / f"segmentor_{d.value.lower()}.pt"

    def segmentor_final(self, d: Domain) -> Path:
        return self.checkpoints / f"segmentor_final_{d.value.lower()}.pt"

    def generator(self, src: Domain) -> Path:
        name = "generator_ab.pt" if src is Domain.A else "generator_ba.pt"
        return self.checkpoints / name


def _require(path: Path, stage: str, needed_by: str) -> Path:
    if not path.exists():
        raise ValidationError(
            f"{needed_by} needs artifacts from `{stage}` but {path} is missing; "
            f"run `{stage}` first"
        )
    return path


def _phantom_sample(cfg: PipelineConfig, d: Domain, index: int) -> Sample:
    seed = int(np.random.SeedSequence(
        [cfg.seed, _DOMAIN_CODE[d], index]).generate_state(1)[0])
    spec = PhantomSpec(shape=cfg.data.phantom_shape, n_labels=cfg.data.n_labels,
                       seed=seed, modality_style=_STYLE[d])
    s = generate_phantom(spec)
    return replace(s, domain=d, name=f"{d.value.lower()}{index:03d}")


def _named_label_set(n_labels: int) -> tuple:
    return tuple((i + 1, n) for i, n in enumerate(label_names_for(n_labels)))


def _remap_labels(m: LabelMap, label_map: dict, n_labels: int) -> LabelMap:
    data = m.data
    if label_map:
        data = np.zeros_like(m.data)
        for raw, idx in label_map.items():
            data[m.data == raw] = idx
    extra = set(np.unique(data)) - set(range(n_labels + 1))
    if extra:
        raise ValidationError(
            f"label values {sorted(extra)} outside 0..{n_labels}; "
            f"map them via data.label_map"
        )
    return replace(m, data=data, label_set=_named_label_set(n_labels))


def _read_pairs(cfg: PipelineConfig, d: Domain) -> list[Sample]:
    paths = cfg.data.domain_a if d is Domain.A else cfg.data.domain_b
    imgs = sorted(Path(paths.dir).glob("*_img.nii.gz"))
    if not imgs:
        raise ValidationError(f"no *_img.nii.gz files in {paths.dir}")
    out = []
    for img in imgs:
        name = img.name[:-len("_img.nii.gz")]
        lbl = img.with_name(f"{name}_lbl.nii.gz")
        if not lbl.exists():
            raise ValidationError(f"missing label file for {img}: {lbl}")
        v = to_ras(read_volume(img))
        m = to_ras(_remap_labels(read_labelmap(lbl), cfg.data.label_map,
                                 cfg.data.n_labels))
        if name in cfg.data.crops:
            v, m = crop(v, m, cfg.data.crops[name])
        if paths.resize_xy is not None:
            v, m = resize_ct(v, m, paths.resize_xy)
        out.append(Sample(volume=v, labels=m, domain=d,
                          provenance=Provenance.ORIGINAL, name=name))
    return out


def _split_counts(n: int, val_fraction: float) -> int:
    if val_fraction == 0 or n < 2:
        return 0
    return min(n - 1, max(1, round(n * val_fraction)))


def stage_preprocess(cfg: PipelineConfig) -> Path:
    """Materialize normalized, reoriented originals plus the split manifest."""
    paths = RunPaths(cfg)
    manifest = {"seed": cfg.seed, "n_labels": cfg.data.n_labels, "domains": {}}
    for d in (Domain.A, Domain.B):
        if cfg.data.source == SOURCE_PHANTOM:
            samples = [_phantom_sample(cfg, d, i)
                       for i in range(cfg.data.phantom_per_domain)]
        else:
            samples = _read_pairs(cfg, d)
        samples.sort(key=lambda s: s.name)
        n_val = _split_counts(len(samples), cfg.data.val_fraction)
        sub = paths.data / d.value.lower()
        sub.mkdir(parents=True, exist_ok=True)
        records = []
        for i, s in enumerate(samples):
            vol = normalize(s.volume, cfg.augment)
            img = sub / f"{s.name}_img.nii.gz"
            lbl = sub / f"{s.name}_lbl.nii.gz"
            write_volume(vol, img)
            write_labelmap(s.labels, lbl)
            records.append({
                "name": s.name,
                "img": str(img.relative_to(paths.data)),
                "lbl": str(lbl.relative_to(paths.data)),
                "split": "val" if i >= len(samples) - n_val else "train",
            })
        manifest["domains"][d.value] = records
    out = paths.data / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(cfg: PipelineConfig, split: str | None = None) -> dict:
    """Read preprocessed Samples back, optionally filtered to one split."""
    paths = RunPaths(cfg)
    manifest_path = _require(paths.data / "manifest.json", "preprocess", "loading data")
    manifest = json.loads(manifest_path.read_text())
    label_set = _named_label_set(manifest["n_labels"])
    pools = {}
    for key, records in manifest["domains"].items():
        d = Domain(key)
        pools[d] = [
            Sample(volume=read_volume(paths.data / r["img"]),
                   labels=read_labelmap(paths.data / r["lbl"], label_set),
                   domain=d, provenance=Provenance.ORIGINAL, name=r["name"])
            for r in records if split is None or r["split"] == split
        ]
    return pools


def stage_augment(cfg: PipelineConfig) -> Path:
    """Emit the augmentation budget from the training originals."""
    paths = RunPaths(cfg)
    pools = load_dataset(cfg, split="train")
    augment_to_dir(pools, cfg.augment, paths.augmented)
    return paths.augmented / "manifest.json"


def load_augmented(cfg: PipelineConfig) -> dict:
    paths = RunPaths(cfg)
    manifest_path = _require(paths.augmented / "manifest.json", "augment",
                             "augmented training data")
    manifest = json.loads(manifest_path.read_text())
    label_set = _named_label_set(cfg.data.n_labels)
    pools = {Domain.A: [], Domain.B: []}
    for r in manifest["outputs"]:
        d = Domain(r["domain"])
        pools[d].append(Sample(
            volume=read_volume(paths.augmented / r["img"]),
            labels=read_labelmap(paths.augmented / r["lbl"], label_set),
            domain=d, provenance=Provenance.AUGMENTED,
            name=f"aug_{d.value.lower()}_{r['index']:03d}"))
    return pools


def _training_pools(cfg: PipelineConfig, *, with_synthesized: bool = False) -> dict:
    pools = load_dataset(cfg, split="train")
    if cfg.ablations.use_preprocess_augment:
        aug = load_augmented(cfg)
        for d in pools:
            pools[d].extend(aug[d])
    if with_synthesized and cfg.ablations.use_synthesized:
        syn = load_synthesized(cfg)
        for d in pools:
            pools[d].extend(syn[d])
    return pools


def _val_pools(cfg: PipelineConfig) -> dict | None:
    pools = load_dataset(cfg, split="val")
    if all(not v for v in pools.values()):
        return None
    return pools


def stage_train_seg(cfg: PipelineConfig, resume: bool = False) -> dict:
    """Phase 1: pretrain one segmentor per domain."""
    paths = RunPaths(cfg)
    paths.logs.mkdir(parents=True, exist_ok=True)
    return phase1_pretrain_segmentors(
        _training_pools(cfg), cfg.phases, paths.checkpoints,
        seed=cfg.seed, n_labels=cfg.data.n_labels,
        base_filters=cfg.networks.base_filters, norm=cfg.networks.norm,
        log=TrainLog(paths.logs / "phase1.jsonl"), resume=resume,
        val_data=_val_pools(cfg),
    )


def stage_train_gan(cfg: PipelineConfig, resume: bool = False) -> dict:
    """Phase 2: adversarial translation training."""
    paths = RunPaths(cfg)
    paths.logs.mkdir(parents=True, exist_ok=True)
    ckpts = {d: paths.segmentor(d) for d in (Domain.A, Domain.B)}
    if cfg.ablations.use_shape_consistency and cfg.weights.lambda_spatial > 0:
        for p in ckpts.values():
            _require(p, "train-seg", "shape-consistent GAN training")
    return phase2_train_gan(
        _training_pools(cfg), ckpts, cfg.phases, cfg.ablations, paths.checkpoints,
        seed=cfg.seed, weights=cfg.weights,
        base_filters=cfg.networks.base_filters, norm=cfg.networks.norm,
        log=TrainLog(paths.logs / "phase2.jsonl"), resume=resume,
    )


def stage_synthesize(cfg: PipelineConfig) -> dict:
    """Translate all training data across domains with the trained generators."""
    paths = RunPaths(cfg)
    pools = _training_pools(cfg)
    out = {}
    for src in (Domain.A, Domain.B):
        ckpt = _require(paths.generator(src), "train-gan", "synthesis")
        dst = src.other
        out[dst] = synthesize(pools[src], ckpt,
                              out_dir=paths.synthesized / dst.value.lower())
    return out


def load_synthesized(cfg: PipelineConfig) -> dict:
    paths = RunPaths(cfg)
    label_set = _named_label_set(cfg.data.n_labels)
    pools = {Domain.A: [], Domain.B: []}
    for d in pools:
        sub = paths.synthesized / d.value.lower()
        _require(sub / "manifest.json", "synthesize", "synthesized training data")
        manifest = json.loads((sub / "manifest.json").read_text())
        for r in manifest["outputs"]:
            pools[d].append(Sample(
                volume=read_volume(sub / r["img"]),
                labels=read_labelmap(sub / r["lbl"], label_set),
                domain=Domain(r["domain"]), provenance=Provenance.SYNTHESIZED,
                name=r["name"]))
    return pools


def stage_train_final(cfg: PipelineConfig, resume: bool = False) -> dict:
    """Phase 3: fine-tune the segmentors on the full (flag-filtered) pools."""
    paths = RunPaths(cfg)
    paths.logs.mkdir(parents=True, exist_ok=True)
    init = {d: _require(paths.segmentor(d), "train-seg", "final segmentor training")
            for d in (Domain.A, Domain.B)}
    return phase3_train_final(
        _training_pools(cfg, with_synthesized=True), cfg.phases, cfg.ablations,
        paths.checkpoints, seed=cfg.seed, init_ckpts=init,
        n_labels=cfg.data.n_labels, base_filters=cfg.networks.base_filters,
        norm=cfg.networks.norm, log=TrainLog(paths.logs / "phase3.jsonl"),
        resume=resume, val_data=_val_pools(cfg),
    )


def predict_dataset(ckpt_path, samples) -> list[LabelMap]:
    """Segment each sample with a checkpointed segmentor."""
    handle, _ = load_checkpoint(ckpt_path)
    out = []
    for s in samples:
        vol, _ = to_tensors(s)
        pred = predict_labels(handle, vol).numpy().astype(np.int16)
        out.append(LabelMap(data=pred, spacing=s.labels.spacing,
                            affine=s.labels.affine))
    return out


def stage_evaluate(cfg: PipelineConfig, mode: str | None = None,
                   checkpoints: dict | None = None, run: str = "final") -> list:
    """Per-domain Dice reports on the held-out split."""
    paths = RunPaths(cfg)
    mode = mode or cfg.eval_mode
    if checkpoints is None:
        checkpoints = {d: _require(paths.segmentor_final(d), "train-final", "evaluation")
                       for d in (Domain.A, Domain.B)}
    pools = _val_pools(cfg)
    if pools is None:
        warnings.warn("no validation split; evaluating on training samples",
                      stacklevel=2)
        pools = load_dataset(cfg, split="train")
    reports = []
    for d in sorted(pools):
        preds = predict_dataset(checkpoints[d], pools[d])
        reports.append(evaluate(preds, pools[d], mode, domain=d.value, run=run))
    paths.reports.mkdir(parents=True, exist_ok=True)
    stem = paths.reports / f"{run}_{mode}"
    stem.with_suffix(".txt").write_text(report_table(reports) + "\n")
    write_reports_json(reports, stem.with_suffix(".json"))
    write_reports_csv(reports, stem.with_suffix(".csv"))
    return reports


def run_all(cfg: PipelineConfig, resume: bool = False) -> list:
    """All stages in order, honoring the ablation flags."""
    stage_preprocess(cfg)
    if cfg.ablations.use_preprocess_augment:
        stage_augment(cfg)
    stage_train_seg(cfg, resume=resume)
    if cfg.ablations.use_synthesized:
        stage_train_gan(cfg, resume=resume)
        stage_synthesize(cfg)
    stage_train_final(cfg, resume=resume)
    return stage_evaluate(cfg)
