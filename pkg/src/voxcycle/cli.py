"""Command line entry points.

Exit codes: 0 success, 2 validation or precondition error, 1 anything else.
"""

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .config import load_config, validate_config
from .errors import NiftiFormatError, PipelineError, ShapeError, ValidationError
from .evaluation import FOUR_LABEL, SEVEN_LABEL, report_table
from .phantom import PSEUDO_CT, PSEUDO_MRI, PhantomSpec, generate_phantom
from .volume_io import write_labelmap, write_volume
from . import workflow

_MODES = click.Choice([FOUR_LABEL, SEVEN_LABEL])


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, NiftiFormatError, ShapeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except PipelineError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
    return wrapper


_config_option = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=False, dir_okay=False, path_type=Path),
    help="Pipeline config file (YAML).")
_resume_option = click.option(
    "--resume", is_flag=True, help="Continue from existing checkpoints.")


@click.group()
def cli():
    """Cross-modality volume translation and segmentation pipeline."""


@cli.command()
@_config_option
@_guarded
def validate(config_path):
    """Check a config file; print every violated invariant."""
    violations = validate_config(config_path)
    if violations:
        for v in violations:
            click.echo(v, err=True)
        sys.exit(2)
    click.echo("config ok")


@cli.command()
@_config_option
@_guarded
def preprocess(config_path):
    """Materialize normalized, reoriented original samples."""
    cfg = load_config(config_path)
    manifest = workflow.stage_preprocess(cfg)
    click.echo(f"preprocessed data manifest: {manifest}")


@cli.command()
@_config_option
@_guarded
def augment(config_path):
    """Generate the augmented training set."""
    cfg = load_config(config_path)
    manifest = workflow.stage_augment(cfg)
    n = len(json.loads(Path(manifest).read_text())["outputs"])
    click.echo(f"wrote {n} augmented samples; manifest: {manifest}")


@cli.command("train-seg")
@_config_option
@_resume_option
@_guarded
def train_seg(config_path, resume):
    """Phase 1: pretrain per-domain segmentors."""
    cfg = load_config(config_path)
    paths = workflow.stage_train_seg(cfg, resume=resume)
    for d in sorted(paths):
        click.echo(f"segmentor {d.value}: {paths[d]}")


@cli.command("train-gan")
@_config_option
@_resume_option
@_guarded
def train_gan(config_path, resume):
    """Phase 2: adversarial translation training."""
    cfg = load_config(config_path)
    paths = workflow.stage_train_gan(cfg, resume=resume)
    for key in sorted(paths):
        click.echo(f"{key}: {paths[key]}")


@cli.command()
@_config_option
@_guarded
def synthesize(config_path):
    """Translate training data across domains with trained generators."""
    cfg = load_config(config_path)
    out = workflow.stage_synthesize(cfg)
    for d in sorted(out):
        click.echo(f"synthesized into domain {d.value}: {len(out[d])} samples")


@cli.command("train-final")
@_config_option
@_resume_option
@_guarded
def train_final(config_path, resume):
    """Phase 3: retrain segmentors on the full data pools."""
    cfg = load_config(config_path)
    paths = workflow.stage_train_final(cfg, resume=resume)
    for d in sorted(paths):
        click.echo(f"final segmentor {d.value}: {paths[d]}")


@cli.command()
@_config_option
@click.option("--mode", type=_MODES, default=None,
              help="Label subset to report (defaults to the config's eval_mode).")
@_guarded
def evaluate(config_path, mode):
    """Dice reports for the final segmentors on the held-out split."""
    cfg = load_config(config_path)
    reports = workflow.stage_evaluate(cfg, mode=mode)
    click.echo(report_table(reports))


@cli.command("run-all")
@_config_option
@_resume_option
@_guarded
def run_all(config_path, resume):
    """All phases in order, honoring the ablation flags."""
    cfg = load_config(config_path)
    reports = workflow.run_all(cfg, resume=resume)
    click.echo(report_table(reports))
    click.echo(f"reports written to {workflow.RunPaths(cfg).reports}")


@cli.group()
def phantom():
    """Synthetic phantom data utilities."""


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 3:
        raise ValidationError(f"--shape must be three comma-separated integers, got {text!r}")
    return parts


@phantom.command()
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False, path_type=Path),
              help="Output directory (domain subdirs a/ and b/ are created).")
@click.option("--shape", default="32,32,32", show_default=True,
              help="Volume shape, comma separated, multiples of 32.")
@click.option("--n-labels", type=click.Choice(["4", "7"]), default="4",
              show_default=True)
@click.option("--per-domain", type=int, default=1, show_default=True,
              help="Number of phantoms per domain.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--style", type=click.Choice(["both", PSEUDO_CT, PSEUDO_MRI]),
              default="both", show_default=True)
@_guarded
def generate(out_dir, shape, n_labels, per_domain, seed, style):
    """Emit phantom NIfTI pairs plus a manifest."""
    shape = _parse_shape(shape)
    if per_domain < 1:
        raise ValidationError(f"--per-domain must be >= 1, got {per_domain}")
    styles = {PSEUDO_CT: "a", PSEUDO_MRI: "b"} if style == "both" else \
        {style: "a" if style == PSEUDO_CT else "b"}
    manifest = {"seed": seed, "shape": list(shape), "n_labels": int(n_labels),
                "outputs": []}
    for modality, sub in sorted(styles.items()):
        dcode = 0 if sub == "a" else 1
        dest = out_dir / sub
        dest.mkdir(parents=True, exist_ok=True)
        for i in range(per_domain):
            phantom_seed = int(np.random.SeedSequence(
                [seed, dcode, i]).generate_state(1)[0])
            sample = generate_phantom(PhantomSpec(
                shape=shape, n_labels=int(n_labels), seed=phantom_seed,
                modality_style=modality))
            name = f"{sub}{i:03d}"
            img, lbl = dest / f"{name}_img.nii.gz", dest / f"{name}_lbl.nii.gz"
            write_volume(sample.volume, img)
            write_labelmap(sample.labels, lbl)
            manifest["outputs"].append({
                "name": name, "style": modality, "seed": phantom_seed,
                "img": str(img.relative_to(out_dir)),
                "lbl": str(lbl.relative_to(out_dir)),
            })
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {len(manifest['outputs'])} phantoms to {out_dir}")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
