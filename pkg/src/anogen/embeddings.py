"""Embedding learning: masked textual inversion plus the shared mask encoder.

Each anomaly type owns a sequence of anomaly tokens; a single spatial
encoder shared by all types turns a mask into location tokens. The
concatenation [anomaly tokens || spatial tokens] conditions the frozen
denoiser. A separate per-type token sequence is trained on mask images
themselves for later mask synthesis.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as data_mod
from .checkpoint import (CheckpointError, config_digest, load_checkpoint,
                         load_module_arrays, module_arrays, save_checkpoint)
from .diffusion import ContractViolation, forward_diffuse, seeded_init_

EMBEDDING_ROLES = ("anomaly", "spatial", "mask", "concatenated")


class EncodingFault(RuntimeError):
    """The spatial encoder produced non-finite features."""


@dataclass
class AnomalyMask:
    """Binary spatial support of an anomaly."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ContractViolation("mask grid must be 2-d")
        if not np.isin(g, (0, 1)).all():
            raise ContractViolation("mask grid must be binary")
        self.grid = g.astype(np.uint8)

    @classmethod
    def from_any(cls, mask) -> "AnomalyMask":
        if isinstance(mask, AnomalyMask):
            return mask
        if torch.is_tensor(mask):
            mask = mask.detach().cpu().numpy()
        return cls(np.asarray(mask))

    @property
    def area(self) -> int:
        return int(self.grid.sum())

    @property
    def shape(self):
        return self.grid.shape

    def bbox(self):
        """(y0, x0, y1, x1) inclusive extents, or None for an empty mask."""
        ys, xs = np.nonzero(self.grid)
        if len(ys) == 0:
            return None
        return int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max())

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.grid).to(torch.float32)


@dataclass
class TokenEmbedding:
    """A sequence of continuous condition vectors with a role tag."""

    tokens: torch.Tensor
    role: str

    def __post_init__(self):
        if self.role not in EMBEDDING_ROLES:
            raise ContractViolation(f"role must be one of {EMBEDDING_ROLES}")
        if self.tokens.ndim != 2:
            raise ContractViolation("tokens must be [k, d]")
        if not bool(torch.isfinite(self.tokens).all()):
            raise ContractViolation("token embedding contains non-finite values")

    @property
    def count(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])


def concat_embeddings(anomaly: TokenEmbedding, spatial: TokenEmbedding) -> TokenEmbedding:
    """The full condition [e_a || e_s], in that order."""
    if anomaly.role != "anomaly" or spatial.role != "spatial":
        raise ContractViolation("expected an anomaly embedding followed by a spatial one")
    if anomaly.dim != spatial.dim:
        raise ContractViolation("token dimensions differ")
    return TokenEmbedding(torch.cat([anomaly.tokens, spatial.tokens], dim=0), "concatenated")


# ---------------------------------------------------------------------------
# spatial encoder

@dataclass(frozen=True)
class SpatialEncoderConfig:
    """Multi-scale conv pyramid with top-down fusion and per-token heads."""

    resolution: int = 64
    stages: tuple = (8, 16, 32, 64)
    fpn_width: int = 32
    n_tokens: int = 4
    token_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        if len(self.stages) < 2:
            raise ContractViolation("need at least two pyramid stages")
        if self.n_tokens < 1:
            raise ContractViolation("need at least one output token")
        if self.resolution % (2 ** len(self.stages)):
            raise ContractViolation("resolution must survive the stage downsampling")

    def digest(self) -> str:
        return config_digest(dataclasses.asdict(self))


class SpatialEncoder(nn.Module):
    """mask [B,1,H,W] -> n location tokens of dimension d."""

    def __init__(self, config: SpatialEncoderConfig, init_seed: int | None = None):
        super().__init__()
        self.config = config
        stages = []
        cin = 1
        for width in config.stages:
            stages.append(nn.Sequential(
                nn.Conv2d(cin, width, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1), nn.SiLU()))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(
            [nn.Conv2d(w, config.fpn_width, 1) for w in config.stages])
        self.smooth = nn.ModuleList(
            [nn.Conv2d(config.fpn_width, config.fpn_width, 3, padding=1)
             for _ in config.stages])
        fused = config.fpn_width * len(config.stages)
        self.heads = nn.ModuleList(
            [nn.Linear(fused, config.token_dim) for _ in range(config.n_tokens)])
        if init_seed is not None:
            seeded_init_(self, init_seed)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.ndim != 4 or mask.shape[1] != 1:
            raise ContractViolation("mask batch must be [B, 1, H, W]")
        feats = []
        x = mask
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        # top-down fusion
        fused = [self.laterals[-1](feats[-1])]
        for i in range(len(feats) - 2, -1, -1):
            up = F.interpolate(fused[0], size=feats[i].shape[-2:], mode="nearest")
            fused.insert(0, self.laterals[i](feats[i]) + up)
        pooled = [self.smooth[i](f).mean(dim=(2, 3)) for i, f in enumerate(fused)]
        flat = torch.cat(pooled, dim=1)
        tokens = torch.stack([head(flat) for head in self.heads], dim=1)
        if not bool(torch.isfinite(tokens).all()):
            raise EncodingFault("spatial encoder produced non-finite features")
        return tokens


def mask_to_encoder_input(mask, resolution: int) -> torch.Tensor:
    grid = AnomalyMask.from_any(mask).grid
    grid = data_mod.resample_mask_nearest(grid, (resolution, resolution))
    return torch.from_numpy(grid).to(torch.float32).reshape(1, 1, resolution, resolution)


def encode_mask(mask, encoder: SpatialEncoder) -> TokenEmbedding:
    """Location tokens for one mask (resampled to the encoder resolution)."""
    with torch.no_grad():
        tokens = encoder(mask_to_encoder_input(mask, encoder.config.resolution))[0]
    return TokenEmbedding(tokens, "spatial")


# ---------------------------------------------------------------------------
# losses

def masked_diffusion_loss(denoiser, z_t: torch.Tensor, t, tokens, true_noise: torch.Tensor,
                          mask_code: torch.Tensor) -> torch.Tensor:
    """Mean over all grid elements of ||m * (eps - eps_hat)||^2.

    The mean normalization (not mask area) makes the loss scale with mask
    size; positions outside the mask contribute exactly zero, so the value
    is independent of the prediction there. mask_code is [H, W] or
    [B, 1, H, W] at z_t's spatial resolution.
    """
    if true_noise.shape != z_t.shape:
        raise ContractViolation("true noise must match z_t's shape")
    m = mask_code if torch.is_tensor(mask_code) else torch.as_tensor(np.asarray(mask_code))
    m = m.to(z_t.dtype)
    if m.ndim == 2:
        m = m.reshape(1, 1, *m.shape)
    if m.shape[-2:] != z_t.shape[-2:]:
        raise ContractViolation("mask must be resampled to the code resolution first")
    if not bool(torch.all((m == 0) | (m == 1))):
        raise ContractViolation("mask must be binary at the code resolution")
    eps_hat = denoiser(z_t, t, tokens=tokens)
    return ((m * (true_noise - eps_hat)) ** 2).mean()


# ---------------------------------------------------------------------------
# registry

@dataclass
class TypeEntry:
    anomaly_tokens: torch.Tensor          # [k, d]
    mask_tokens: torch.Tensor | None = None   # [k', d]


class AnomalyTypeRegistry:
    """All per-type embeddings plus the one shared spatial encoder."""

    def __init__(self, encoder: SpatialEncoder):
        self.encoder = encoder
        self.entries: dict = {}
        self.counters: dict = {"embed_steps": 0, "mask_steps": {}}

    @property
    def token_dim(self) -> int:
        return self.encoder.config.token_dim

    def type_ids(self):
        return sorted(self.entries)

    def entry(self, type_id: str) -> TypeEntry:
        if type_id not in self.entries:
            raise ContractViolation(
                f"unknown anomaly type {type_id!r}; trained types: {self.type_ids()}")
        return self.entries[type_id]

    def anomaly_embedding(self, type_id: str) -> TokenEmbedding:
        return TokenEmbedding(self.entry(type_id).anomaly_tokens.detach().clone(), "anomaly")

    def mask_embedding(self, type_id: str) -> TokenEmbedding:
        e_m = self.entry(type_id).mask_tokens
        if e_m is None:
            raise ContractViolation(f"type {type_id!r} has no trained mask embedding")
        return TokenEmbedding(e_m.detach().clone(), "mask")

    def condition_for(self, type_id: str, mask) -> TokenEmbedding:
        """The sampling condition [e_a || encode_mask(m)]."""
        return concat_embeddings(self.anomaly_embedding(type_id),
                                 encode_mask(mask, self.encoder))

    def digest(self) -> str:
        return config_digest({"encoder": dataclasses.asdict(self.encoder.config),
                              "types": {tid: [list(e.anomaly_tokens.shape),
                                              list(e.mask_tokens.shape) if e.mask_tokens is not None else None]
                                        for tid, e in sorted(self.entries.items())}})

    def save(self, path) -> None:
        arrays = {f"encoder/{k}": v for k, v in module_arrays(self.encoder).items()}
        for tid, entry in self.entries.items():
            arrays[f"type/{tid}/anomaly"] = entry.anomaly_tokens.detach().numpy()
            if entry.mask_tokens is not None:
                arrays[f"type/{tid}/mask"] = entry.mask_tokens.detach().numpy()
        extra = {"encoder_config": dataclasses.asdict(self.encoder.config),
                 "types": self.type_ids(),
                 "counters": self.counters}
        save_checkpoint(path, kind="registry", digest=self.digest(), arrays=arrays, extra=extra)

    @classmethod
    def load(cls, path) -> "AnomalyTypeRegistry":
        _, digest, arrays, extra = load_checkpoint(path, kind="registry")
        cfg_dict = extra.get("encoder_config")
        if cfg_dict is None:
            raise CheckpointError(f"{path}: registry header lacks the encoder config")
        cfg = SpatialEncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in cfg_dict.items()})
        encoder = SpatialEncoder(cfg)
        load_module_arrays(encoder,
                           {k[len("encoder/"):]: v for k, v in arrays.items()
                            if k.startswith("encoder/")})
        reg = cls(encoder)
        for tid in extra.get("types", []):
            e_a = torch.from_numpy(arrays[f"type/{tid}/anomaly"])
            key = f"type/{tid}/mask"
            e_m = torch.from_numpy(arrays[key]) if key in arrays else None
            reg.entries[tid] = TypeEntry(e_a, e_m)
        reg.counters = extra.get("counters", reg.counters)
        if reg.digest() != digest:
            raise CheckpointError(f"{path}: rebuilt registry does not match header digest")
        return reg


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EmbeddingTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 5e-3
    k_tokens: int = 8
    n_tokens: int = 4
    init_sigma: float = 0.02
    augment: data_mod.AugmentConfig | None = data_mod.AugmentConfig()
    log_every: int = 0


@dataclass(frozen=True)
class MaskTrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 5e-3
    k_tokens: int = 4
    init_sigma: float = 0.02
    augment: data_mod.AugmentConfig | None = data_mod.AugmentConfig()
    log_every: int = 0


def _freeze(module: nn.Module):
    saved = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in saved:
        p.requires_grad_(False)
    return saved


def _restore(saved):
    for p, flag in saved:
        p.requires_grad_(flag)


def _to_chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(torch.float32)


def train_spatial_anomaly_embeddings(pairs_by_type: dict, denoiser, codec, schedule, *,
                                     config: EmbeddingTrainConfig = EmbeddingTrainConfig(),
                                     seed: int = 0,
                                     registry: AnomalyTypeRegistry | None = None,
                                     encoder_config: SpatialEncoderConfig | None = None):
    """Jointly optimize every type's anomaly tokens and the shared encoder.

    pairs_by_type maps type id -> list of (image HWC float, mask HxW binary).
    The denoiser and codec stay frozen; batches sample uniformly from the
    pooled pairs of all types. Returns (registry, losses).
    """
    if not pairs_by_type:
        raise ContractViolation("no anomaly types given")
    for tid, pairs in pairs_by_type.items():
        if not pairs:
            raise ContractViolation(f"type {tid!r} has no training pairs")

    g = torch.Generator().manual_seed(int(seed))
    np_rng = np.random.default_rng(int(seed))

    if registry is None:
        enc_cfg = encoder_config or SpatialEncoderConfig(token_dim=denoiser.config.token_dim)
        encoder = SpatialEncoder(enc_cfg, init_seed=int(seed) + 1)
        registry = AnomalyTypeRegistry(encoder)
    encoder = registry.encoder
    if encoder.config.token_dim != denoiser.config.token_dim:
        raise ContractViolation("encoder token dim must match the denoiser's")

    params = {}
    for tid in sorted(pairs_by_type):
        if tid in registry.entries:
            params[tid] = nn.Parameter(registry.entries[tid].anomaly_tokens.clone())
        else:
            init = torch.empty(config.k_tokens, registry.token_dim)
            init.normal_(0.0, config.init_sigma, generator=g)
            params[tid] = nn.Parameter(init)

    frozen = _freeze(denoiser)
    encoder.train()
    opt = torch.optim.Adam(list(params.values()) + list(encoder.parameters()), lr=config.lr)

    pool = [(tid, img, mask) for tid in sorted(pairs_by_type)
            for img, mask in pairs_by_type[tid]]
    res = encoder.config.resolution
    losses = []
    try:
        for step in range(config.steps):
            picks = np_rng.integers(0, len(pool), size=config.batch_size)
            imgs, masks, tids = [], [], []
            for idx in picks:
                tid, img, mask = pool[int(idx)]
                if config.augment is not None:
                    aug = data_mod.augment(img, mask, np_rng, config.augment)
                    img, mask = aug.image, aug.mask
                imgs.append(_to_chw(img))
                masks.append(data_mod.resample_mask_nearest(mask, (res, res)))
                tids.append(tid)
            batch = torch.stack(imgs)
            codes = codec.encode(batch)
            mask_in = torch.from_numpy(np.stack(masks)).to(torch.float32).unsqueeze(1)
            spatial = encoder(mask_in)                       # [B, n, d]
            tokens = torch.stack(
                [torch.cat([params[tid], spatial[i]], dim=0) for i, tid in enumerate(tids)])

            t = torch.randint(1, schedule.steps + 1, (codes.shape[0],), generator=g)
            noise = torch.randn(codes.shape, generator=g, dtype=codes.dtype)
            z_t = forward_diffuse(codes, t, noise, schedule)
            code_mask = torch.stack(
                [torch.from_numpy(data_mod.resample_mask_nearest(masks[i], codes.shape[-2:]))
                 for i in range(len(masks))]).to(codes.dtype).unsqueeze(1)
            loss = masked_diffusion_loss(denoiser, z_t, t, tokens, noise, code_mask)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if config.log_every and (step + 1) % config.log_every == 0:
                recent = losses[-config.log_every:]
                print(f"  embed step {step + 1}/{config.steps}  "
                      f"loss {sum(recent) / len(recent):.5f}")
    finally:
        _restore(frozen)
        encoder.eval()

    for tid, p in params.items():
        registry.entries[tid] = TypeEntry(
            p.detach().clone(),
            registry.entries[tid].mask_tokens if tid in registry.entries else None)
    registry.counters["embed_steps"] = registry.counters.get("embed_steps", 0) + config.steps
    return registry, losses


def render_mask_image(mask: np.ndarray, channels: int = 3) -> np.ndarray:
    """Mask as a float image replicated to the model's channel count."""
    grid = AnomalyMask.from_any(mask).grid.astype(np.float32)
    return np.repeat(grid[..., None], channels, axis=2)


def train_mask_embedding(masks, denoiser, codec, schedule, *,
                         config: MaskTrainConfig = MaskTrainConfig(), seed: int = 0):
    """Optimize one type's mask tokens on its rendered mask images.

    Plain (unmasked) diffusion objective. Returns (e_m tensor, losses);
    zero steps returns the initialization untouched.
    """
    masks = [AnomalyMask.from_any(m).grid for m in masks]
    if not masks:
        raise ContractViolation("need at least one mask")
    g = torch.Generator().manual_seed(int(seed))
    np_rng = np.random.default_rng(int(seed))
    e_m = torch.empty(config.k_tokens, denoiser.config.token_dim)
    e_m.normal_(0.0, config.init_sigma, generator=g)
    e_m = nn.Parameter(e_m)
    frozen = _freeze(denoiser)
    opt = torch.optim.Adam([e_m], lr=config.lr)
    losses = []
    try:
        for step in range(config.steps):
            picks = np_rng.integers(0, len(masks), size=config.batch_size)
            imgs = []
            for idx in picks:
                mask = masks[int(idx)]
                img = render_mask_image(mask, denoiser.config.in_channels)
                if config.augment is not None:
                    aug = data_mod.augment(img, mask, np_rng, config.augment)
                    img = render_mask_image(aug.mask, denoiser.config.in_channels)
                imgs.append(_to_chw(img))
            batch = codec.encode(torch.stack(imgs))
            t = torch.randint(1, schedule.steps + 1, (batch.shape[0],), generator=g)
            noise = torch.randn(batch.shape, generator=g, dtype=batch.dtype)
            z_t = forward_diffuse(batch, t, noise, schedule)
            eps_hat = denoiser(z_t, t, tokens=e_m.unsqueeze(0).expand(batch.shape[0], -1, -1))
            loss = F.mse_loss(eps_hat, noise)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            if config.log_every and (step + 1) % config.log_every == 0:
                recent = losses[-config.log_every:]
                print(f"  mask-embed step {step + 1}/{config.steps}  "
                      f"loss {sum(recent) / len(recent):.5f}")
    finally:
        _restore(frozen)
    return e_m.detach().clone(), losses
