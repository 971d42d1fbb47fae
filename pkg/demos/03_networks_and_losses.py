#
# The three networks and the loss algebra, on toy tensors.
#
# Run from the repository root:  python3 demos/03_networks_and_losses.py
#
import torch

from voxcycle.losses import (
    LossWeights,
    adv_loss_generator,
    ce_loss,
    cycle_loss,
    dice_loss,
    one_hot,
    spatial_loss,
)
from voxcycle.networks import (
    build_discriminator,
    build_generator,
    build_segmentor,
    forward,
)


def main():
    torch.manual_seed(0)

    # shape contracts: segmentor keeps shape and emits n_labels+1 channels,
    # generator keeps shape with tanh range, discriminator emits a score grid
    seg = build_segmentor(n_labels=4, base_filters=4)
    gen = build_generator(base_filters=4)
    disc = build_discriminator(base_filters=4)

    x = torch.randn(1, 64, 64, 64)
    print("segmentor    :", tuple(forward(seg, x).shape))
    y = forward(gen, x)
    print("generator    :", tuple(y.shape), " range", (float(y.min()), float(y.max())))
    print("discriminator:", tuple(forward(disc, x).shape), " (one score per receptive patch)")

    # loss algebra on a tiny 4^3 problem with 3 foreground classes
    k = 4  # channels = background + 3 labels
    labels = torch.randint(0, k, (1, 4, 4, 4))
    v = one_hot(labels, k)

    # a hard-correct prediction: dice bottoms out at -1, ce at ~0
    sharp_logits = (v * 200.0) - 100.0
    print("\nhard-correct prediction:")
    print("  dice_loss   :", dice_loss(torch.softmax(sharp_logits, dim=-4), v).item())
    print("  ce_loss     :", ce_loss(sharp_logits, v).item())
    print("  spatial_loss:", spatial_loss(sharp_logits, v).item(), " (= ce + dice)")

    # random prediction for comparison
    logits = torch.randn(1, k, 4, 4, 4)
    print("random prediction:")
    print("  dice_loss   :", round(dice_loss(torch.softmax(logits, dim=-4), v).item(), 4))
    print("  ce_loss     :", round(ce_loss(logits, v).item(), 4))

    # cycle and adversarial pieces
    a = torch.randn(1, 1, 8, 8, 8)
    print("\ncycle_loss(x, x)          :", cycle_loss(a, a).item())
    print("cycle_loss(x, x + 0.5)    :", cycle_loss(a, a + 0.5).item())
    print("adv generator at scores=1 :", adv_loss_generator(torch.ones(1, 1, 2, 2, 2)).item())
    print("adv generator at scores=0 :", adv_loss_generator(torch.zeros(1, 1, 2, 2, 2)).item())

    # one optimization step moves the spatial loss downhill
    w = LossWeights(lambda_adv=1.0, lambda_cycle=10.0, lambda_spatial=1.0)
    print("\nobjective weights:", w)
    seg32 = build_segmentor(n_labels=3, base_filters=2)
    opt = torch.optim.Adam(seg32.module.parameters(), lr=1e-3)
    patch = torch.randn(1, 1, 32, 32, 32)
    target = one_hot(torch.randint(0, 4, (1, 32, 32, 32)), 4)
    before = spatial_loss(seg32.module(patch), target)
    for _ in range(5):
        opt.zero_grad()
        loss = spatial_loss(seg32.module(patch), target)
        loss.backward()
        opt.step()
    after = spatial_loss(seg32.module(patch), target)
    print(f"spatial loss after 5 steps: {before.item():.4f} -> {after.item():.4f}")


if __name__ == "__main__":
    main()
