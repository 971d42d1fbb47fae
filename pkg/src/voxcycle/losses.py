"""Training objectives: least-squares adversarial, cycle L1, Dice + CE.

All functions take torch tensors and return 0-dim tensors, so they can
sit on the autograd tape; float() them for reporting. The Dice term is
negative (in [-1, 0]) and the spatial loss is its sum with cross-entropy,
so a perfect hard prediction scores -1.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError
from .networks import ModelHandle
from .networks import forward as net_forward

DICE_EPS = 1e-5


def one_hot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(..., X, Y, Z) integer labels to (..., C, X, Y, Z) float channels."""
    if labels.dtype.is_floating_point:
        labels = labels.round().long()
    return F.one_hot(labels.long(), n_classes).movedim(-1, -4).float()


def _check_nonempty(*tensors):
    for t in tensors:
        if t.numel() == 0:
            raise ShapeError("loss input tensor is empty")


def adv_loss_generator(d_scores_on_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator objective: mean (score - 1)^2."""
    _check_nonempty(d_scores_on_fake)
    return ((d_scores_on_fake - 1.0) ** 2).mean()


def adv_loss_discriminator(d_scores_on_real: torch.Tensor,
                           d_scores_on_fake: torch.Tensor) -> torch.Tensor:
    """Least-squares critic objective, targets real=1 fake=0."""
    _check_nonempty(d_scores_on_real, d_scores_on_fake)
    return 0.5 * ((d_scores_on_real - 1.0) ** 2).mean() + 0.5 * (d_scores_on_fake ** 2).mean()


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute reconstruction error, >= 0."""
    if x.shape != x_reconstructed.shape:
        raise ShapeError(
            f"cycle loss shapes differ: {tuple(x.shape)} vs {tuple(x_reconstructed.shape)}"
        )
    _check_nonempty(x)
    return (x - x_reconstructed).abs().mean()


def _check_probabilities(u: torch.Tensor):
    sums = u.sum(dim=-4)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-3):
        raise ValidationError("dice input must be per-voxel probabilities summing to 1")


def dice_loss(u: torch.Tensor, v: torch.Tensor,
              include_background: bool = False, eps: float = DICE_EPS) -> torch.Tensor:
    """Negative soft Dice over the class set, in [-1, 0].

    u: softmax probabilities (..., K+1, X, Y, Z); v: one-hot same shape.
    The per-class term is sum(u*v) / (sum(u) + sum(v) + eps), so a class
    absent from both prediction and truth contributes 0, not a reward.
    """
    if u.shape != v.shape:
        raise ShapeError(f"dice shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    _check_nonempty(u)
    _check_probabilities(u)
    start = 0 if include_background else 1
    if u.shape[-4] - start < 1:
        raise ValidationError("dice needs at least one class in the sum")
    flat_u = u.movedim(-4, 0).reshape(u.shape[-4], -1)[start:]
    flat_v = v.movedim(-4, 0).reshape(v.shape[-4], -1)[start:]
    inter = (flat_u * flat_v).sum(dim=1)
    denom = flat_u.sum(dim=1) + flat_v.sum(dim=1) + eps
    k = flat_u.shape[0]
    return -(2.0 / k) * (inter / denom).sum()


def ce_loss(logits: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of -log softmax(logits) at the true class."""
    if logits.shape != v.shape:
        raise ShapeError(f"ce shapes differ: {tuple(logits.shape)} vs {tuple(v.shape)}")
    _check_nonempty(logits)
    log_p = F.log_softmax(logits, dim=-4)
    return -(v * log_p).sum(dim=-4).mean()


def spatial_loss(logits: torch.Tensor, v: torch.Tensor,
                 include_background: bool = False, eps: float = DICE_EPS) -> torch.Tensor:
    """Shape-consistency objective: cross-entropy plus Dice, in [-1, inf)."""
    return ce_loss(logits, v) + dice_loss(
        torch.softmax(logits, dim=-4), v, include_background=include_background, eps=eps
    )


@dataclass
class LossWeights:
    """Trade-off weights for the combined generator objective."""

    lambda_adv: float = 1.0
    lambda_cycle: float = 10.0
    lambda_spatial: float = 1.0

    def __post_init__(self):
        for name in ("lambda_adv", "lambda_cycle", "lambda_spatial"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.lambda_adv == self.lambda_cycle == self.lambda_spatial == 0:
            raise ValidationError("at least one loss weight must be > 0")


@dataclass
class LossReport:
    """Scalar loss terms for one domain direction of one step."""

    direction: str
    adv: float
    cycle: float
    ce: float
    dice: float
    spatial: float
    total: float

    def __post_init__(self):
        if abs(self.spatial - (self.ce + self.dice)) > 1e-5:
            raise ValidationError("spatial term must equal ce + dice")

    def as_dict(self) -> dict:
        return asdict(self)


def generator_total_loss(parts, w: LossWeights):
    """Weighted sum of the adversarial, cycle and spatial terms.

    Accepts a LossReport (floats) or any object carrying adv/cycle/spatial
    attributes, including tensors for the differentiable path.
    """
    return (w.lambda_adv * parts.adv
            + w.lambda_cycle * parts.cycle
            + w.lambda_spatial * parts.spatial)


def make_report(direction: str, adv, cycle, ce, dice, w: LossWeights) -> LossReport:
    """Assemble a LossReport from scalar tensors or floats."""
    adv, cycle, ce, dice = (
        t.item() if isinstance(t, torch.Tensor) else float(t)
        for t in (adv, cycle, ce, dice)
    )
    spatial = ce + dice
    total = w.lambda_adv * adv + w.lambda_cycle * cycle + w.lambda_spatial * spatial
    return LossReport(direction, adv, cycle, ce, dice, spatial, total)


def _apply(model, x: torch.Tensor) -> torch.Tensor:
    if isinstance(model, ModelHandle):
        return net_forward(model, x)
    return model(x)


def _as_one_hot(y: torch.Tensor, n_classes: int) -> torch.Tensor:
    if y.dim() >= 4 and y.shape[-4] == n_classes and y.dtype.is_floating_point:
        return y
    return one_hot(y, n_classes)


def seg_loss(x: torch.Tensor, y: torch.Tensor, segmentor,
             include_background: bool = False) -> torch.Tensor:
    """Spatial loss of the segmentor's prediction on x against labels y."""
    logits = _apply(segmentor, x)
    return spatial_loss(logits, _as_one_hot(y, logits.shape[-4]),
                        include_background=include_background)


def seg_syn_loss(x: torch.Tensor, y: torch.Tensor, generator, segmentor_other,
                 include_background: bool = False) -> torch.Tensor:
    """Spatial loss of the other-domain segmentor on the translated volume.

    No detach anywhere: gradients reach both the generator and the
    segmentor, which is what makes the segmentor act as a shape critic.
    """
    fake = _apply(generator, x)
    logits = _apply(segmentor_other, fake)
    return spatial_loss(logits, _as_one_hot(y, logits.shape[-4]),
                        include_background=include_background)
