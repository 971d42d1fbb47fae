"""Loss algebra against hand values, brute-force oracles and gradients."""

import math

import numpy as np
import pytest
import torch

from voxcycle.errors import ShapeError, ValidationError
from voxcycle.losses import (
    LossReport,
    LossWeights,
    adv_loss_discriminator,
    adv_loss_generator,
    ce_loss,
    cycle_loss,
    dice_loss,
    generator_total_loss,
    make_report,
    one_hot,
    seg_loss,
    seg_syn_loss,
    spatial_loss,
)
from voxcycle.networks import build_generator, build_segmentor


# naive float64 triple-loop implementations used as independent oracles

def naive_dice(u, v, include_background=False, eps=1e-5):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    start = 0 if include_background else 1
    k = u.shape[0] - start
    total = 0.0
    for c in range(start, u.shape[0]):
        num = du = dv = 0.0
        for i in range(u.shape[1]):
            for j in range(u.shape[2]):
                for l in range(u.shape[3]):
                    num += u[c, i, j, l] * v[c, i, j, l]
                    du += u[c, i, j, l]
                    dv += v[c, i, j, l]
        total += num / (du + dv + eps)
    return -(2.0 / k) * total


def naive_ce(logits, v):
    logits = np.asarray(logits, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    total = 0.0
    n = 0
    for i in range(logits.shape[1]):
        for j in range(logits.shape[2]):
            for l in range(logits.shape[3]):
                z = logits[:, i, j, l]
                m = z.max()
                p = np.exp(z - m) / np.exp(z - m).sum()
                c = int(np.argmax(v[:, i, j, l]))
                total += -math.log(p[c])
                n += 1
    return total / n


def _random_probs(shape, seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=shape))
    return torch.softmax(logits, dim=0), logits


def _random_one_hot(shape, seed):
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(rng.integers(0, shape[0], size=shape[1:]))
    return one_hot(labels, shape[0]).double()


def _fd_input_check(fn, x, coords=8, rel_tol=1e-3, abs_tol=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    x = x.double().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach()
    eps = 1e-6
    for flat in rng.choice(x.numel(), size=min(coords, x.numel()), replace=False):
        flat = int(flat)
        with torch.no_grad():
            orig = x.view(-1)[flat].item()
            x.view(-1)[flat] = orig + eps
            hi = fn(x).item()
            x.view(-1)[flat] = orig - eps
            lo = fn(x).item()
            x.view(-1)[flat] = orig
        fd = (hi - lo) / (2 * eps)
        an = grad.view(-1)[flat].item()
        if abs(fd - an) < abs_tol:
            continue
        assert abs(fd - an) / max(abs(fd), abs(an)) < rel_tol


class TestAdversarial:
    def test_generator_targets(self):
        assert adv_loss_generator(torch.ones(2, 3)).item() == pytest.approx(0.0)
        assert adv_loss_generator(torch.zeros(4)).item() == pytest.approx(1.0)
        assert adv_loss_generator(torch.tensor([0.5, 1.5])).item() == pytest.approx(0.25)

    def test_discriminator_targets(self):
        one, zero, half = torch.ones(3), torch.zeros(3), torch.full((3,), 0.5)
        assert adv_loss_discriminator(one, zero).item() == pytest.approx(0.0)
        assert adv_loss_discriminator(zero, one).item() == pytest.approx(1.0)
        assert adv_loss_discriminator(half, half).item() == pytest.approx(0.25)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            adv_loss_generator(torch.empty(0))
        with pytest.raises(ShapeError):
            adv_loss_discriminator(torch.empty(0), torch.ones(1))

    def test_gradients(self):
        _fd_input_check(adv_loss_generator, torch.randn(2, 4, 4, 4))
        fake = torch.randn(8).double()
        _fd_input_check(lambda s: adv_loss_discriminator(s, fake), torch.randn(8))


class TestCycle:
    def test_hand_values(self):
        x = torch.zeros(2, 4, 4, 4)
        assert cycle_loss(x, x).item() == pytest.approx(0.0)
        assert cycle_loss(x, torch.ones_like(x)).item() == pytest.approx(1.0)
        assert cycle_loss(torch.tensor([0.0, 2.0]), torch.tensor([1.0, 1.0])).item() == pytest.approx(1.0)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(0)
        x = torch.from_numpy(rng.normal(size=(3, 3, 3)))
        y = torch.from_numpy(rng.normal(size=(3, 3, 3)))
        assert cycle_loss(x, y).item() > 0
        assert cycle_loss(y, y).item() == 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cycle_loss(torch.zeros(2, 2), torch.zeros(2, 3))

    def test_gradient(self):
        x0 = torch.randn(4, 4, 4).double()
        _fd_input_check(lambda x: cycle_loss(x, torch.zeros_like(x)), x0)


class TestDice:
    def test_perfect_prediction(self):
        v = _random_one_hot((5, 4, 4, 4), seed=1)
        assert dice_loss(v, v).item() == pytest.approx(-1.0, abs=1e-5)

    def test_uniform_closed_form(self):
        n = 64
        f = 10
        labels = torch.zeros(4, 4, 4, dtype=torch.long)
        labels.view(-1)[:f] = 1
        v = one_hot(labels, 2).double()
        u = torch.full((2, 4, 4, 4), 0.5, dtype=torch.float64)
        expected = -2.0 * (f / 2) / ((n / 2) + f + 1e-5)
        assert dice_loss(u, v).item() == pytest.approx(expected, abs=1e-9)
        assert dice_loss(u, v).item() == pytest.approx(naive_dice(u, v), abs=1e-9)

    def test_disjoint_supports(self):
        labels = torch.zeros(4, 4, 4, dtype=torch.long)
        labels.view(-1)[:32] = 1
        v = one_hot(labels, 2)
        flipped = torch.zeros(4, 4, 4, dtype=torch.long)
        flipped.view(-1)[32:] = 1
        u = one_hot(flipped, 2)
        assert dice_loss(u, v).item() == pytest.approx(0.0, abs=1e-12)

    def test_absent_class_contributes_zero(self):
        labels = torch.zeros(4, 4, 4, dtype=torch.long)
        labels.view(-1)[:16] = 1  # class 2 appears nowhere
        v = one_hot(labels, 3)
        assert dice_loss(v, v).item() == pytest.approx(-0.5, abs=1e-5)

    def test_brute_force_oracle(self):
        for seed in range(5):
            u, _ = _random_probs((5, 4, 4, 4), seed)
            v = _random_one_hot((5, 4, 4, 4), seed + 100)
            got = dice_loss(u.double(), v).item()
            assert got == pytest.approx(naive_dice(u, v), abs=1e-9)
            got_bg = dice_loss(u.double(), v, include_background=True).item()
            assert got_bg == pytest.approx(naive_dice(u, v, include_background=True), abs=1e-9)

    def test_range(self):
        for seed in range(5):
            u, _ = _random_probs((4, 4, 4, 4), seed)
            v = _random_one_hot((4, 4, 4, 4), seed + 10)
            val = dice_loss(u, v).item()
            assert -1.0 <= val <= 0.0

    def test_rejects_non_probabilities(self):
        v = _random_one_hot((3, 4, 4, 4), 0)
        with pytest.raises(ValidationError):
            dice_loss(torch.randn(3, 4, 4, 4) * 5, v)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(torch.softmax(torch.randn(3, 4, 4, 4), 0), torch.zeros(3, 4, 4, 2))

    def test_gradient(self):
        v = _random_one_hot((3, 4, 4, 4), 2)
        _, logits = _random_probs((3, 4, 4, 4), 3)
        _fd_input_check(lambda z: dice_loss(torch.softmax(z, dim=0), v), logits)


class TestCrossEntropy:
    def test_saturated_margin(self):
        labels = (torch.arange(64).reshape(4, 4, 4) % 2).long()
        v = one_hot(labels, 2)
        logits = v * 20.0
        assert ce_loss(logits, v).item() < 1e-8

    def test_uniform_two_class(self):
        v = _random_one_hot((2, 4, 4, 4), 0)
        logits = torch.zeros(2, 4, 4, 4)
        assert ce_loss(logits, v).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_monotone_in_true_logit(self):
        labels = torch.zeros(2, 2, 2, dtype=torch.long)
        v = one_hot(labels, 2)
        vals = []
        for margin in (0.0, 1.0, 2.0):
            logits = torch.zeros(2, 2, 2, 2)
            logits[0] = margin
            vals.append(ce_loss(logits, v).item())
        assert vals[0] > vals[1] > vals[2]

    def test_brute_force_oracle(self):
        for seed in range(5):
            _, logits = _random_probs((5, 4, 4, 4), seed)
            v = _random_one_hot((5, 4, 4, 4), seed + 50)
            assert ce_loss(logits, v).item() == pytest.approx(naive_ce(logits, v), abs=1e-9)

    def test_gradient(self):
        v = _random_one_hot((3, 4, 4, 4), 4)
        _, logits = _random_probs((3, 4, 4, 4), 5)
        _fd_input_check(lambda z: ce_loss(z, v), logits)


class TestSpatial:
    def test_perfect_hard_prediction(self):
        v = _random_one_hot((4, 4, 4, 4), 6)
        logits = v * 30.0
        assert spatial_loss(logits, v).item() == pytest.approx(-1.0, abs=1e-4)

    def test_definitional_identity(self):
        for seed in range(3):
            _, logits = _random_probs((4, 4, 4, 4), seed)
            v = _random_one_hot((4, 4, 4, 4), seed + 30)
            lhs = spatial_loss(logits, v).item()
            rhs = ce_loss(logits, v).item() + dice_loss(torch.softmax(logits, 0), v).item()
            assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_uniform_against_oracle(self):
        labels = torch.zeros(4, 4, 4, dtype=torch.long)
        labels.view(-1)[:20] = 1
        v = one_hot(labels, 2).double()
        logits = torch.zeros(2, 4, 4, 4, dtype=torch.float64)
        expected = math.log(2) + naive_dice(torch.softmax(logits, 0), v)
        assert spatial_loss(logits, v).item() == pytest.approx(expected, abs=1e-9)

    def test_gradient(self):
        v = _random_one_hot((3, 4, 4, 4), 7)
        _, logits = _random_probs((3, 4, 4, 4), 8)
        _fd_input_check(lambda z: spatial_loss(z, v), logits)


class TestWeightsAndReports:
    def test_hand_total(self):
        w = LossWeights(1.0, 10.0, 1.0)
        r = make_report("AB", adv=0.25, cycle=0.1, ce=0.0, dice=-0.5, w=w)
        assert r.total == pytest.approx(0.75)
        assert generator_total_loss(r, w) == pytest.approx(0.75)

    def test_all_zero_weights_forbidden(self):
        with pytest.raises(ValidationError):
            LossWeights(0.0, 0.0, 0.0)
        with pytest.raises(ValidationError):
            LossWeights(-1.0, 1.0, 1.0)

    def test_spatial_ablation_reduces_to_cyclegan(self):
        w = LossWeights(1.0, 10.0, 0.0)
        r = make_report("AB", adv=0.3, cycle=0.2, ce=5.0, dice=-0.1, w=w)
        assert r.total == pytest.approx(0.3 + 2.0)

    def test_linearity_in_each_weight(self):
        parts = make_report("AB", 0.3, 0.2, 0.4, -0.3, LossWeights())
        for field in ("lambda_adv", "lambda_cycle", "lambda_spatial"):
            vals = []
            for lam in (0.0, 1.0, 2.0):
                kw = {"lambda_adv": 1.0, "lambda_cycle": 1.0, "lambda_spatial": 1.0}
                kw[field] = lam
                vals.append(generator_total_loss(parts, LossWeights(**kw)))
            assert vals[2] - vals[1] == pytest.approx(vals[1] - vals[0], abs=1e-12)

    def test_report_invariant(self):
        with pytest.raises(ValidationError):
            LossReport("AB", 0.1, 0.1, 0.5, -0.2, spatial=0.9, total=0.0)

    def test_report_serializable(self):
        r = make_report("BA", 0.1, 0.2, 0.3, -0.2, LossWeights())
        d = r.as_dict()
        assert d["direction"] == "BA"
        assert set(d) == {"direction", "adv", "cycle", "ce", "dice", "spatial", "total"}


class _StubSegmentor(torch.nn.Module):
    """Returns fixed huge-margin logits reproducing the stored labels."""

    def __init__(self, labels, n_classes):
        super().__init__()
        self.logits = one_hot(labels, n_classes) * 30.0
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, x):
        return self.logits + 0.0 * self.dummy


class TestSegLosses:
    def test_perfect_segmentor(self):
        labels = (torch.arange(4 ** 3).reshape(4, 4, 4) % 3).long()
        stub = _StubSegmentor(labels, 3)
        x = torch.randn(1, 4, 4, 4)
        assert seg_loss(x, labels, stub).item() == pytest.approx(-1.0, abs=1e-4)

    def test_identity_generator_substitution(self):
        labels = (torch.arange(4 ** 3).reshape(4, 4, 4) % 3).long()
        stub = _StubSegmentor(labels, 3)
        x = torch.randn(1, 4, 4, 4)
        direct = seg_loss(x, labels, stub).item()
        viagen = seg_syn_loss(x, labels, lambda t: t, stub).item()
        assert direct == pytest.approx(viagen)

    def test_gradient_reaches_generator_and_segmentor(self):
        torch.manual_seed(21)
        gen = build_generator(base_filters=2)
        seg = build_segmentor(n_labels=2, base_filters=2)
        x = torch.randn(1, 1, 32, 32, 32, dtype=torch.float64)
        labels = torch.randint(0, 3, (1, 32, 32, 32))
        gen.module.double()
        seg.module.double()
        loss = seg_syn_loss(x, labels, gen.module, seg.module)
        loss.backward()
        gen_norm = sum(float(p.grad.abs().sum()) for p in gen.module.parameters())
        seg_norm = sum(float(p.grad.abs().sum()) for p in seg.module.parameters())
        assert gen_norm > 0 and seg_norm > 0

        # nonzero finite-difference sensitivity on a coordinate of each
        # network; only sign and magnitude are probed here, the precise
        # gradient match is covered by the per-network checks
        for module in (gen.module, seg.module):
            p = next(iter(module.parameters()))
            with torch.no_grad():
                orig = p.view(-1)[0].item()
                eps = 1e-6
                p.view(-1)[0] = orig + eps
                hi = seg_syn_loss(x, labels, gen.module, seg.module).item()
                p.view(-1)[0] = orig - eps
                lo = seg_syn_loss(x, labels, gen.module, seg.module).item()
                p.view(-1)[0] = orig
            fd = (hi - lo) / (2 * eps)
            an = p.grad.view(-1)[0].item()
            assert fd != 0.0
            assert fd * an > 0
            assert 0.5 < fd / an < 2.0
