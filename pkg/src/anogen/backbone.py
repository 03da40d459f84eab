"""Conditional backbone pretraining on the synthetic corpus.

The desk-scale stand-in for a large pretrained diffusion model: a compact
conditional denoiser fitted to the corpus with learned class tokens plus
fixed random-projection position hints derived from each sample's mask.
After this stage the weights are frozen; downstream token optimization only
ever reads them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import data as data_mod
from .checkpoint import (CheckpointError, config_digest, load_checkpoint,
                         load_module_arrays, module_arrays, save_checkpoint)
from .diffusion import (ConditionalDenoiser, ContractViolation, DenoiserConfig,
                        forward_diffuse)
from .embeddings import render_mask_image


class HintProjector:
    """Fixed seeded projection of an average-pooled mask into token rows."""

    def __init__(self, token_dim: int, n_tokens: int = 4, pool: int = 8,
                 seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.token_dim = token_dim
        self.n_tokens = n_tokens
        self.pool = pool
        self.seed = seed
        self.weight = torch.randn(n_tokens, token_dim, pool * pool,
                                  generator=g) / float(pool * pool) ** 0.5

    def __call__(self, grid: np.ndarray) -> torch.Tensor:
        m = torch.from_numpy(np.asarray(grid, dtype=np.float32))[None, None]
        pooled = F.adaptive_avg_pool2d(m, self.pool).reshape(-1)
        return torch.einsum("ndp,p->nd", self.weight, pooled)


class ClassConditioner(nn.Module):
    """One learned token row per training label, joined with position hints."""

    def __init__(self, labels, token_dim: int, hint: HintProjector,
                 init_seed: int = 0):
        super().__init__()
        self.labels = sorted(labels)
        self.hint = hint
        g = torch.Generator().manual_seed(init_seed)
        self.tokens = nn.ParameterDict({
            label: nn.Parameter(torch.randn(1, token_dim, generator=g) * 0.02)
            for label in self.labels})

    def tokens_for(self, label: str, grid: np.ndarray) -> torch.Tensor:
        if label not in self.tokens:
            raise ContractViolation(f"unknown class label {label!r}")
        return torch.cat([self.tokens[label], self.hint(grid)], dim=0)


@dataclass(frozen=True)
class BackboneTrainConfig:
    steps: int = 4000
    batch_size: int = 8
    lr: float = 2e-3
    condition_dropout: float = 0.1
    mask_image_fraction: float = 0.25
    hint_tokens: int = 4
    hint_pool: int = 8
    hint_seed: int = 0
    log_every: int = 0


def _corpus_items(index: data_mod.DatasetIndex):
    """(image, mask-or-None, label) training triples from the corpus."""
    normals = []
    anomalies = []
    mask_items = []
    for name in sorted(index.categories):
        cat = index.categories[name]
        for path in cat.normal_train:
            normals.append((data_mod.read_image(path), None, f"{name}:good"))
        for defect in cat.defects:
            for sample in cat.train_pairs(defect):
                image = data_mod.read_image(sample.image_path)
                grid = data_mod.read_mask(sample.mask_path)
                anomalies.append((image, grid, f"{name}:{defect}"))
                mask_items.append((grid, f"{name}:{defect}:mask"))
    return normals, anomalies, mask_items


def train_backbone(index: data_mod.DatasetIndex, *, denoiser_config: DenoiserConfig,
                   schedule, codec, train: BackboneTrainConfig = BackboneTrainConfig(),
                   seed: int = 0):
    """Fit the conditional denoiser to corpus images and rendered masks."""
    normals, anomalies, mask_items = _corpus_items(index)
    if not normals and not anomalies:
        raise ContractViolation("corpus has no training samples")

    hint = HintProjector(denoiser_config.token_dim, train.hint_tokens,
                         train.hint_pool, train.hint_seed)
    labels = {l for _, _, l in normals} | {l for _, _, l in anomalies} | \
             {l for _, l in mask_items}
    conditioner = ClassConditioner(labels, denoiser_config.token_dim, hint,
                                   init_seed=seed)
    denoiser = ConditionalDenoiser(denoiser_config, init_seed=seed)
    opt = torch.optim.Adam(list(denoiser.parameters()) +
                           list(conditioner.parameters()), lr=train.lr)
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    zero_grid = np.zeros((denoiser_config.resolution * codec.scale_factor,) * 2,
                         dtype=np.uint8)
    corpus = normals + anomalies
    losses = []
    for step in range(train.steps):
        batch_imgs = []
        batch_tokens = []
        if mask_items and rng.random() < train.mask_image_fraction:
            for _ in range(train.batch_size):
                grid, label = mask_items[int(rng.integers(0, len(mask_items)))]
                aug = data_mod.augment(render_mask_image(grid), grid, rng)
                batch_imgs.append(render_mask_image(aug.mask))
                batch_tokens.append(conditioner.tokens_for(label, aug.mask))
        else:
            for _ in range(train.batch_size):
                image, grid, label = corpus[int(rng.integers(0, len(corpus)))]
                if grid is None:
                    batch_imgs.append(image)
                    batch_tokens.append(conditioner.tokens_for(label, zero_grid))
                else:
                    aug = data_mod.augment(image, grid, rng)
                    batch_imgs.append(aug.image)
                    batch_tokens.append(conditioner.tokens_for(label, aug.mask))
        tokens = None if rng.random() < train.condition_dropout \
            else torch.stack(batch_tokens)
        x = torch.from_numpy(np.stack(batch_imgs).transpose(0, 3, 1, 2).copy())
        x0 = codec.encode(x)
        t = torch.randint(1, schedule.steps + 1, (x0.shape[0],), generator=g)
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        z_t = forward_diffuse(x0, t, noise, schedule)
        eps_hat = denoiser(z_t, t, tokens=tokens)
        loss = F.mse_loss(eps_hat, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if train.log_every and (step + 1) % train.log_every == 0:
            print(f"backbone step {step + 1}/{train.steps} "
                  f"loss {losses[-1]:.4f}")
    denoiser.trained = True
    denoiser.eval()
    conditioner.eval()
    return denoiser, conditioner, losses


def backbone_digest(denoiser_config: DenoiserConfig, conditioner) -> str:
    return config_digest({"denoiser": dataclasses.asdict(denoiser_config),
                          "labels": conditioner.labels,
                          "hint": [conditioner.hint.n_tokens,
                                   conditioner.hint.pool,
                                   conditioner.hint.seed]})


def save_backbone(path, denoiser, conditioner) -> None:
    arrays = {f"denoiser/{k}": v for k, v in module_arrays(denoiser).items()}
    for label in conditioner.labels:
        arrays[f"class/{label}"] = conditioner.tokens[label].detach().numpy()
    extra = {"denoiser_config": dataclasses.asdict(denoiser.config),
             "labels": conditioner.labels,
             "hint": {"n_tokens": conditioner.hint.n_tokens,
                      "pool": conditioner.hint.pool,
                      "seed": conditioner.hint.seed},
             "trained": bool(denoiser.trained)}
    save_checkpoint(path, kind="backbone",
                    digest=backbone_digest(denoiser.config, conditioner),
                    arrays=arrays, extra=extra)


def load_backbone(path):
    _, digest, arrays, extra = load_checkpoint(path, kind="backbone")
    cfg_dict = extra.get("denoiser_config")
    if cfg_dict is None:
        raise CheckpointError(f"{path}: backbone header lacks the denoiser config")
    cfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in cfg_dict.items()})
    denoiser = ConditionalDenoiser(cfg)
    load_module_arrays(denoiser,
                       {k[len("denoiser/"):]: v for k, v in arrays.items()
                        if k.startswith("denoiser/")})
    denoiser.trained = bool(extra.get("trained", False))
    denoiser.eval()
    hint_cfg = extra["hint"]
    hint = HintProjector(cfg.token_dim, hint_cfg["n_tokens"], hint_cfg["pool"],
                         hint_cfg["seed"])
    conditioner = ClassConditioner(extra["labels"], cfg.token_dim, hint)
    with torch.no_grad():
        for label in conditioner.labels:
            conditioner.tokens[label].copy_(
                torch.from_numpy(arrays[f"class/{label}"]))
    conditioner.eval()
    if backbone_digest(cfg, conditioner) != digest:
        raise CheckpointError(f"{path}: rebuilt backbone does not match header digest")
    return denoiser, conditioner
