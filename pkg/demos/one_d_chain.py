"""Train the reverse chain on a 1-d two-Gaussian mixture and sample it.

A minimal end-to-end look at the diffusion loop with no images involved:
the tiny MLP noise predictor learns the mixture at +/-0.8 and ancestral
sampling recovers both modes. Takes a few seconds on CPU.
"""

import torch

from anogen import MlpDenoiser, NoiseSchedule, ancestral_sample, train_denoiser


def sample_batch(g, n):
    sign = torch.where(torch.rand(n, 1, generator=g) < 0.5, -1.0, 1.0)
    return sign * 0.8 + 0.05 * torch.randn(n, 1, generator=g), None


def main():
    schedule = NoiseSchedule.linear(100)
    model = MlpDenoiser(dim=1, hidden=64, depth=3, init_seed=0)
    losses = train_denoiser(model, sample_batch, schedule, steps=2000,
                            batch_size=64, lr=2e-3, seed=1, log_every=500)
    print(f"final loss {losses[-1]:.4f}")

    with torch.no_grad():
        draws = ancestral_sample(model, schedule, (4000, 1),
                                 torch.Generator().manual_seed(2))
    draws = draws.numpy().ravel()
    lo, hi = draws[draws < 0], draws[draws >= 0]
    print(f"negative mode: n={lo.size}  mean={lo.mean():+.3f}  std={lo.std():.3f}")
    print(f"positive mode: n={hi.size}  mean={hi.mean():+.3f}  std={hi.std():.3f}")


if __name__ == "__main__":
    main()
