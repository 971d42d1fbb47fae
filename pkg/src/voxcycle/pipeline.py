"""Three-phase training orchestration, synthesis and patch sampling.

Phase 1 pretrains one segmentor per domain on original data. Phase 2
trains the dual generators and discriminators, first for a warm-up
without the spatial term, then with the frozen segmentors acting as
shape critics. Phase 3 retrains the segmentors on original plus
augmented plus synthesized data.

Determinism: the RNG stream of every epoch is derived from
(seed, phase, epoch), model init from (seed, phase), so resuming from
an epoch checkpoint reproduces an uninterrupted run bit for bit, and
logs carry no timestamps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError, ValidationError
from .losses import (
    LossWeights,
    adv_loss_discriminator,
    adv_loss_generator,
    ce_loss,
    cycle_loss,
    dice_loss,
    make_report,
    one_hot,
    spatial_loss,
)
from .networks import (
    ModelHandle,
    build_discriminator,
    build_generator,
    build_segmentor,
    load_checkpoint,
    save_checkpoint,
)
from .volume_io import Domain, Provenance, Sample

_PHASE1, _PHASE2, _PHASE3 = 1, 2, 3
ADAM_BETAS = (0.9, 0.999)


@dataclass
class PhasePlan:
    """Epoch budgets and optimizer settings for the three phases."""

    phase1_epochs: int = 100
    phase2_warmup_epochs: int = 50
    phase2_spatial_epochs: int = 150
    phase3_epochs: int = 100
    learning_rate: float = 2e-4
    batch_size: int = 1
    patch_size: tuple[int, int, int] = (64, 64, 64)
    patches_per_sample: int = 4  # patch draws per sample per epoch
    phase2_steps_per_epoch: int | None = None  # None: pool size * patches_per_sample

    def __post_init__(self):
        for name in ("phase1_epochs", "phase2_warmup_epochs",
                     "phase2_spatial_epochs", "phase3_epochs"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.batch_size < 1 or self.patches_per_sample < 1:
            raise ValidationError("batch_size and patches_per_sample must be >= 1")
        if self.phase2_steps_per_epoch is not None and self.phase2_steps_per_epoch < 1:
            raise ValidationError("phase2_steps_per_epoch must be >= 1 when set")
        self.patch_size = tuple(int(d) for d in self.patch_size)
        if len(self.patch_size) != 3 or any(d % 32 for d in self.patch_size):
            raise ValidationError(
                f"patch dims must be divisible by 32 (generator constraint), got {self.patch_size}"
            )


@dataclass
class AblationFlags:
    use_preprocess_augment: bool = True
    use_synthesized: bool = True
    use_shape_consistency: bool = True


def _epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase, epoch])


def _init_torch(seed: int, phase: int) -> None:
    state = np.random.SeedSequence([seed, phase]).generate_state(1)[0]
    torch.manual_seed(int(state))


def to_tensors(s: Sample) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample to a (1, X, Y, Z) float volume and (X, Y, Z) long labels."""
    vol = torch.from_numpy(np.ascontiguousarray(s.volume.data, dtype=np.float32))
    lbl = torch.from_numpy(np.ascontiguousarray(s.labels.data, dtype=np.int64))
    return vol.unsqueeze(0), lbl


def sample_patches(s: Sample, patch_size, rng, n_patches: int = 1):
    """Foreground-biased random crops as (volume, labels) tensor pairs.

    Even-indexed draws are anchored on a random foreground voxel, so at
    least half of all patches contain foreground whenever the volume has
    any; odd draws are uniform.
    """
    patch = tuple(int(d) for d in patch_size)
    shape = s.volume.shape
    for axis, (p, n) in enumerate(zip(patch, shape)):
        if p % 32:
            raise ShapeError(f"patch axis {axis} ({p}) must be divisible by 32")
        if p > n:
            raise ShapeError(f"patch axis {axis} ({p}) exceeds volume extent ({n})")
    vol, lbl = to_tensors(s)
    fg = np.argwhere(s.labels.data > 0)
    pairs = []
    for i in range(n_patches):
        if i % 2 == 0 and len(fg):
            voxel = fg[int(rng.integers(len(fg)))]
            lo = [int(rng.integers(max(0, v - p + 1), min(n - p, v) + 1))
                  for v, p, n in zip(voxel, patch, shape)]
        else:
            lo = [int(rng.integers(0, n - p + 1)) for p, n in zip(patch, shape)]
        sl = tuple(slice(l, l + p) for l, p in zip(lo, patch))
        pairs.append((vol[(slice(None),) + sl], lbl[sl]))
    return pairs


def pad_to_divisible(x: torch.Tensor, divisor: int):
    """Replicate-pad the last 3 dims up to a multiple of divisor.

    Returns the padded tensor and the slices recovering the original.
    """
    spatial = x.shape[-3:]
    target = [(d + divisor - 1) // divisor * divisor for d in spatial]
    pad = []
    for d, t in zip(reversed(spatial), reversed(target)):
        pad.extend([0, t - d])
    squeeze = x.dim() == 4
    y = x.unsqueeze(0) if squeeze else x
    y = torch.nn.functional.pad(y, pad, mode="replicate")
    if squeeze:
        y = y.squeeze(0)
    return y, tuple(slice(0, d) for d in spatial)


def predict_labels(handle: ModelHandle, vol: torch.Tensor) -> torch.Tensor:
    """Argmax segmentation of a (1, X, Y, Z) volume of any shape."""
    handle.module.eval()
    with torch.no_grad():
        padded, crop = pad_to_divisible(vol, handle.spec.divisor)
        logits = handle.module(padded.unsqueeze(0)).squeeze(0)
    return logits.argmax(dim=0)[crop[0], crop[1], crop[2]]


class TrainLog:
    """Append-only JSON-lines log; deterministic, no timestamps."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, entry: dict) -> None:
        self.entries.append(entry)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")


def _check_pools(data: dict, what: str) -> dict:
    pools = {Domain(d): list(samples) for d, samples in data.items()}
    for domain in (Domain.A, Domain.B):
        if not pools.get(domain):
            raise ValidationError(f"{what} needs at least one sample in domain {domain.value}")
    for samples in pools.values():
        for s in samples:
            if s.labels is None:
                raise ValidationError(f"sample {s.name!r} has no labels")
    return pools


def _infer_n_labels(pools: dict) -> int:
    top = 0
    for samples in pools.values():
        for s in samples:
            if s.labels.ids():
                top = max(top, max(s.labels.ids()))
    if top == 0:
        raise ValidationError("no foreground labels found in the training pools")
    return top


def _batches(pairs, batch_size):
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        vols = torch.stack([v for v, _ in chunk])
        lbls = torch.stack([y for _, y in chunk])
        yield vols, lbls


def _train_segmentors(pools, plan, out_dir, *, seed, phase, epochs, prefix,
                      init_handles=None, n_labels=None, base_filters=16,
                      norm="instance", include_background=False, log=None,
                      resume=False, val_pools=None):
    """Shared epoch loop for phases 1 and 3."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_labels = n_labels or _infer_n_labels(pools)
    paths = {d: out_dir / f"{prefix}_{d.value.lower()}.pt" for d in sorted(pools)}

    _init_torch(seed, phase)
    handles, opts, start = {}, {}, 0
    if resume and all(p.exists() for p in paths.values()):
        metas = {}
        for d, p in paths.items():
            handles[d], metas[d] = load_checkpoint(p)
        start = min(m["epoch"] for m in metas.values())
        for d in handles:
            opts[d] = torch.optim.Adam(handles[d].module.parameters(),
                                       lr=plan.learning_rate, betas=ADAM_BETAS)
            if metas[d]["optimizer_state"] is not None:
                opts[d].load_state_dict(metas[d]["optimizer_state"])
    else:
        for d in sorted(pools):
            if init_handles is not None:
                handles[d] = init_handles[d]
            else:
                handles[d] = build_segmentor(1, n_labels, base_filters, norm)
            opts[d] = torch.optim.Adam(handles[d].module.parameters(),
                                       lr=plan.learning_rate, betas=ADAM_BETAS)
        for d in sorted(pools):
            save_checkpoint(paths[d], handles[d], opts[d], epoch=0)

    n_classes = n_labels + 1
    for epoch in range(start, epochs):
        rng = _epoch_rng(seed, phase, epoch)
        for d in sorted(pools):
            handles[d].module.train()
            losses = []
            pairs = []
            for s in pools[d]:
                pairs.extend(sample_patches(s, plan.patch_size, rng, plan.patches_per_sample))
            # interleave sources: sequential per-sample sweeps oscillate
            pairs = [pairs[i] for i in rng.permutation(len(pairs))]
            for vols, lbls in _batches(pairs, plan.batch_size):
                opts[d].zero_grad()
                logits = handles[d].module(vols)
                loss = spatial_loss(logits, one_hot(lbls, n_classes),
                                    include_background=include_background)
                loss.backward()
                opts[d].step()
                losses.append(loss.item())
            entry = {"phase": f"phase{phase}", "domain": d.value,
                     "epoch": epoch, "loss": sum(losses) / len(losses),
                     "n_samples": len(pools[d])}
            if val_pools is not None:
                entry["val_dice"] = _mean_foreground_dice(handles[d], val_pools[d])
            if log is not None:
                log.append(entry)
            save_checkpoint(paths[d], handles[d], opts[d], epoch=epoch + 1)
    return paths


def _mean_foreground_dice(handle, samples) -> float:
    scores = []
    for s in samples:
        vol, lbl = to_tensors(s)
        pred = predict_labels(handle, vol)
        for label in s.labels.ids():
            p = pred == label
            t = lbl == label
            union = int(p.sum()) + int(t.sum())
            scores.append(1.0 if union == 0 else 2.0 * int((p & t).sum()) / union)
    return sum(scores) / len(scores)


def phase1_pretrain_segmentors(data, plan: PhasePlan, out_dir, *, seed: int = 0,
                               n_labels: int | None = None, base_filters: int = 16,
                               norm: str = "instance", include_background: bool = False,
                               log: TrainLog | None = None, resume: bool = False,
                               val_data=None):
    """Pretrain one segmentor per domain on original data only.

    Returns {Domain: checkpoint path}; with epochs == 0 the checkpoints
    hold the untouched initialization.
    """
    pools = _check_pools(data, "phase 1")
    val_pools = None
    if val_data is not None:
        val_pools = {Domain(d): list(v) for d, v in val_data.items()}
    return _train_segmentors(
        pools, plan, out_dir, seed=seed, phase=_PHASE1, epochs=plan.phase1_epochs,
        prefix="segmentor", n_labels=n_labels, base_filters=base_filters, norm=norm,
        include_background=include_background, log=log, resume=resume,
        val_pools=val_pools,
    )


def _load_frozen_segmentors(segmentor_ckpts) -> dict:
    frozen = {}
    for d, path in segmentor_ckpts.items():
        path = Path(path)
        if not path.exists():
            raise ValidationError(
                f"shape consistency enabled but segmentor checkpoint missing: {path}"
            )
        handle, _ = load_checkpoint(path)
        handle.module.eval()
        for p in handle.module.parameters():
            p.requires_grad_(False)
        frozen[Domain(d)] = handle
    return frozen


def phase2_train_gan(data, segmentor_ckpts, plan: PhasePlan, flags: AblationFlags,
                     out_dir, *, seed: int = 0, weights: LossWeights | None = None,
                     base_filters: int = 16, norm: str = "instance",
                     log: TrainLog | None = None, resume: bool = False):
    """Adversarial translation training with optional shape critics.

    Warm-up epochs run with the spatial weight forced to zero; afterwards
    the configured weight applies with the phase-1 segmentors frozen.
    Generator and discriminator updates alternate strictly 1:1.
    """
    pools = _check_pools(data, "phase 2")
    weights = weights or LossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total_epochs = plan.phase2_warmup_epochs + plan.phase2_spatial_epochs

    spatial_possible = flags.use_shape_consistency and weights.lambda_spatial > 0
    segmentors = _load_frozen_segmentors(segmentor_ckpts) if spatial_possible else None
    if segmentors is not None:
        n_classes = {d: h.spec.out_channels for d, h in segmentors.items()}

    names = {"g_ab": "generator_ab.pt", "g_ba": "generator_ba.pt",
             "d_a": "discriminator_a.pt", "d_b": "discriminator_b.pt"}
    paths = {k: out_dir / v for k, v in names.items()}

    _init_torch(seed, _PHASE2)
    start = 0
    if resume and all(p.exists() for p in paths.values()):
        loaded = {k: load_checkpoint(p) for k, p in paths.items()}
        nets = {k: h for k, (h, _) in loaded.items()}
        start = min(meta["epoch"] for _, meta in loaded.values())
        opt_g = torch.optim.Adam(
            list(nets["g_ab"].module.parameters()) + list(nets["g_ba"].module.parameters()),
            lr=plan.learning_rate, betas=ADAM_BETAS)
        opt_d = torch.optim.Adam(
            list(nets["d_a"].module.parameters()) + list(nets["d_b"].module.parameters()),
            lr=plan.learning_rate, betas=ADAM_BETAS)
        if loaded["g_ab"][1]["optimizer_state"] is not None:
            opt_g.load_state_dict(loaded["g_ab"][1]["optimizer_state"])
        if loaded["d_a"][1]["optimizer_state"] is not None:
            opt_d.load_state_dict(loaded["d_a"][1]["optimizer_state"])
    else:
        nets = {"g_ab": build_generator(1, base_filters, norm),
                "g_ba": build_generator(1, base_filters, norm),
                "d_a": build_discriminator(1, base_filters, norm),
                "d_b": build_discriminator(1, base_filters, norm)}
        opt_g = torch.optim.Adam(
            list(nets["g_ab"].module.parameters()) + list(nets["g_ba"].module.parameters()),
            lr=plan.learning_rate, betas=ADAM_BETAS)
        opt_d = torch.optim.Adam(
            list(nets["d_a"].module.parameters()) + list(nets["d_b"].module.parameters()),
            lr=plan.learning_rate, betas=ADAM_BETAS)
        for k in names:
            save_checkpoint(paths[k], nets[k],
                            opt_g if k.startswith("g") else opt_d, epoch=0)

    g_ab, g_ba = nets["g_ab"].module, nets["g_ba"].module
    d_a, d_b = nets["d_a"].module, nets["d_b"].module
    a_pool, b_pool = pools[Domain.A], pools[Domain.B]

    g_steps = d_steps = 0
    for epoch in range(start, total_epochs):
        rng = _epoch_rng(seed, _PHASE2, epoch)
        spatial_active = spatial_possible and epoch >= plan.phase2_warmup_epochs
        lam_sp = weights.lambda_spatial if spatial_active else 0.0
        eff = LossWeights(weights.lambda_adv, weights.lambda_cycle, lam_sp)
        steps = plan.phase2_steps_per_epoch or (
            max(len(a_pool), len(b_pool)) * plan.patches_per_sample)
        for step in range(steps):
            sa = a_pool[int(rng.integers(len(a_pool)))]
            sb = b_pool[int(rng.integers(len(b_pool)))]
            va, ya = sample_patches(sa, plan.patch_size, rng, 1)[0]
            vb, yb = sample_patches(sb, plan.patch_size, rng, 1)[0]
            va, vb = va.unsqueeze(0), vb.unsqueeze(0)

            fake_b = g_ab(va)
            rec_a = g_ba(fake_b)
            fake_a = g_ba(vb)
            rec_b = g_ab(fake_a)
            adv_ab = adv_loss_generator(d_b(fake_b))
            adv_ba = adv_loss_generator(d_a(fake_a))
            cyc_a = cycle_loss(va, rec_a)
            cyc_b = cycle_loss(vb, rec_b)
            if spatial_active:
                logits_ab = segmentors[Domain.B].module(fake_b)
                logits_ba = segmentors[Domain.A].module(fake_a)
                hot_a = one_hot(ya.unsqueeze(0), n_classes[Domain.B])
                hot_b = one_hot(yb.unsqueeze(0), n_classes[Domain.A])
                ce_ab = ce_loss(logits_ab, hot_a)
                di_ab = dice_loss(torch.softmax(logits_ab, dim=-4), hot_a)
                ce_ba = ce_loss(logits_ba, hot_b)
                di_ba = dice_loss(torch.softmax(logits_ba, dim=-4), hot_b)
                sp_ab = ce_ab + di_ab
                sp_ba = ce_ba + di_ba
            else:
                ce_ab = di_ab = ce_ba = di_ba = torch.zeros(())
                sp_ab = sp_ba = torch.zeros(())

            g_total = (weights.lambda_adv * (adv_ab + adv_ba)
                       + weights.lambda_cycle * (cyc_a + cyc_b)
                       + lam_sp * (sp_ab + sp_ba))
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()
            g_steps += 1

            d_loss = (adv_loss_discriminator(d_a(va), d_a(fake_a.detach()))
                      + adv_loss_discriminator(d_b(vb), d_b(fake_b.detach())))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            d_steps += 1

            if log is not None:
                log.append({
                    "phase": "phase2", "epoch": epoch, "step": step,
                    "spatial_active": spatial_active,
                    "AB": make_report("AB", adv_ab, cyc_a, ce_ab, di_ab, eff).as_dict(),
                    "BA": make_report("BA", adv_ba, cyc_b, ce_ba, di_ba, eff).as_dict(),
                    "d_loss": d_loss.item(),
                    "g_steps": g_steps, "d_steps": d_steps,
                })
        for k in names:
            save_checkpoint(paths[k], nets[k],
                            opt_g if k.startswith("g") else opt_d, epoch=epoch + 1)
    return paths


def synthesize(samples, generator, *, identity_bypass: bool = False,
               out_dir=None, checkpoint_path=None):
    """Translate each sample to the other domain, labels carried over.

    generator: ModelHandle or checkpoint path. identity_bypass skips the
    network entirely (plumbing test hook). When out_dir is given, pairs
    are written as NIfTI plus a manifest linking each output to its
    source and the generator checkpoint hash.
    """
    if not isinstance(generator, ModelHandle):
        checkpoint_path = Path(generator)
        generator, _ = load_checkpoint(checkpoint_path)
    generator.module.eval()

    out = []
    records = []
    for s in samples:
        vol, _ = to_tensors(s)
        if identity_bypass:
            fake = vol
        else:
            generator.spec.output_shape(vol.shape[-3:])
            with torch.no_grad():
                fake = generator.module(vol.unsqueeze(0)).squeeze(0)
        data = fake.squeeze(0).numpy().astype(np.float32)
        syn = Sample(
            volume=type(s.volume)(data=data, spacing=s.volume.spacing, affine=s.volume.affine),
            labels=s.labels,
            domain=s.domain.other,
            provenance=Provenance.SYNTHESIZED,
            name=f"syn_{s.name}",
        )
        out.append(syn)
        records.append({"name": syn.name, "source": s.name,
                        "source_domain": s.domain.value, "domain": syn.domain.value})

    if out_dir is not None:
        from .volume_io import write_labelmap, write_volume

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_hash = None
        if checkpoint_path is not None and Path(checkpoint_path).exists():
            ckpt_hash = hashlib.sha256(Path(checkpoint_path).read_bytes()).hexdigest()
        for syn, rec in zip(out, records):
            img = out_dir / f"{syn.name}_img.nii.gz"
            lbl = out_dir / f"{syn.name}_lbl.nii.gz"
            write_volume(syn.volume, img)
            write_labelmap(syn.labels, lbl)
            rec["img"] = img.name
            rec["lbl"] = lbl.name
            rec["generator_checkpoint_sha256"] = ckpt_hash
        (out_dir / "manifest.json").write_text(
            json.dumps({"outputs": records}, indent=2, sort_keys=True) + "\n")
    return out


def phase3_train_final(data, plan: PhasePlan, flags: AblationFlags, out_dir, *,
                       seed: int = 0, init_ckpts=None, n_labels: int | None = None,
                       base_filters: int = 16, norm: str = "instance",
                       include_background: bool = False, log: TrainLog | None = None,
                       resume: bool = False, val_data=None):
    """Retrain segmentors on original + augmented + synthesized pools.

    Ablation flags drop the augmented and synthesized pools; with both
    dropped this is continued phase-1 training. init_ckpts fine-tunes
    from the phase-1 checkpoints (the default when provided).
    """
    keep = {Provenance.ORIGINAL}
    if flags.use_preprocess_augment:
        keep.add(Provenance.AUGMENTED)
    if flags.use_synthesized:
        keep.add(Provenance.SYNTHESIZED)
    filtered = {
        Domain(d): [s for s in samples if s.provenance in keep]
        for d, samples in data.items()
    }
    for d, samples in filtered.items():
        if not samples:
            raise ValidationError(
                f"phase 3 pool for domain {d.value} is empty after ablation filtering"
            )
    pools = _check_pools(filtered, "phase 3")

    init_handles = None
    if init_ckpts is not None:
        init_handles = {}
        for d, path in init_ckpts.items():
            handle, _ = load_checkpoint(path)
            init_handles[Domain(d)] = handle

    val_pools = None
    if val_data is not None:
        val_pools = {Domain(d): list(v) for d, v in val_data.items()}

    return _train_segmentors(
        pools, plan, out_dir, seed=seed, phase=_PHASE3, epochs=plan.phase3_epochs,
        prefix="segmentor_final", init_handles=init_handles, n_labels=n_labels,
        base_filters=base_filters, norm=norm, include_background=include_background,
        log=log, resume=resume, val_pools=val_pools,
    )
