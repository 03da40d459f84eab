"""Diffusion core: noise schedule, forward/reverse chain, conditional denoisers.

The chain follows the standard epsilon-prediction parameterization. Step
indices run 1..T with alpha_bar[0] == 1, so t = 0 means "clean". Schedules
are kept in float64; per-step coefficients are cast to the data dtype at
the point of use.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import (CheckpointError, config_digest, load_checkpoint,
                         load_module_arrays, module_arrays, save_checkpoint)


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class UntrainedDenoiserError(RuntimeError):
    """Sampling was asked to run a denoiser that never saw training."""


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule for the forward noising chain (immutable, float64)."""

    betas: torch.Tensor        # [T]
    alphas: torch.Tensor       # [T]
    alpha_bars: torch.Tensor   # [T+1]; alpha_bars[0] == 1

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = torch.as_tensor(betas, dtype=torch.float64).clone()
        if betas.ndim != 1 or betas.numel() == 0:
            raise ContractViolation("betas must be a non-empty 1-d sequence")
        if not bool(torch.all((betas > 0) & (betas < 1))):
            raise ContractViolation("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = torch.cat(
            [torch.ones(1, dtype=torch.float64), torch.cumprod(alphas, dim=0)])
        return cls(betas, alphas, alpha_bars)

    @classmethod
    def linear(cls, steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if steps < 1:
            raise ContractViolation("steps must be >= 1")
        return cls.from_betas(torch.linspace(beta_start, beta_end, steps, dtype=torch.float64))

    @property
    def steps(self) -> int:
        return int(self.betas.numel())

    def beta(self, t):
        return self.betas[_index_t(t, 1, self.steps) - 1]

    def alpha(self, t):
        return self.alphas[_index_t(t, 1, self.steps) - 1]

    def alpha_bar(self, t):
        return self.alpha_bars[_index_t(t, 0, self.steps)]


def _index_t(t, lo: int, hi: int):
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim > 1:
        raise ContractViolation("t must be a scalar or a 1-d tensor")
    if not bool(torch.all((t >= lo) & (t <= hi))):
        raise ContractViolation(f"t must lie in [{lo}, {hi}]")
    return t


def _coef_like(values: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape per-sample scalars so they broadcast against x."""
    v = values.to(x.dtype)
    if v.ndim == 0:
        return v
    if v.shape[0] != x.shape[0]:
        raise ContractViolation("per-sample t needs one entry per batch element")
    return v.reshape(v.shape + (1,) * (x.ndim - 1))


def forward_diffuse(x0: torch.Tensor, t, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Sample the closed-form marginal q(x_t | x_0).

    Returns sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise. t may be an int or
    a 1-d tensor with one entry per sample; t == 0 returns x0 unchanged.
    """
    if noise.shape != x0.shape:
        raise ContractViolation("noise must have the same shape as x0")
    t = _index_t(t, 0, schedule.steps)
    if t.ndim == 0 and int(t) == 0:
        return x0.clone()
    abar = schedule.alpha_bars[t]
    return _coef_like(torch.sqrt(abar), x0) * x0 + _coef_like(torch.sqrt(1.0 - abar), x0) * noise


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal: (z_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t)."""
    if eps_hat.shape != z_t.shape:
        raise ContractViolation("eps_hat must have the same shape as z_t")
    t = _index_t(t, 1, schedule.steps)
    abar = schedule.alpha_bars[t]
    if bool(torch.any(abar <= 0)):
        raise ContractViolation("alpha_bar vanished at t; cannot invert the marginal")
    return (z_t - _coef_like(torch.sqrt(1.0 - abar), z_t) * eps_hat) / _coef_like(torch.sqrt(abar), z_t)


def reverse_step(denoiser, z_t: torch.Tensor, t: int, schedule: NoiseSchedule, *,
                 rng: torch.Generator | None = None, tokens=None, hook=None,
                 eps_hat: torch.Tensor | None = None, allow_untrained: bool = False) -> torch.Tensor:
    """One ancestral step z_t -> z_{t-1} with fixed variance beta_t.

    mean = (z_t - beta_t / sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t); fresh
    noise is added except at t == 1. Pass eps_hat to reuse a precomputed
    (e.g. guided) prediction; otherwise the denoiser is invoked with
    `tokens` and the attention `hook`.
    """
    t = int(t)
    if not 1 <= t <= schedule.steps:
        raise ContractViolation(f"t must lie in [1, {schedule.steps}]")
    if eps_hat is None:
        if not (allow_untrained or getattr(denoiser, "trained", False)):
            raise UntrainedDenoiserError(
                "denoiser is untrained; pass allow_untrained=True for stub runs")
        eps_hat = denoiser(z_t, t, tokens=tokens, hook=hook)
    if eps_hat.shape != z_t.shape:
        raise ContractViolation("eps_hat must have the same shape as z_t")
    beta = float(schedule.beta(t))
    alpha = float(schedule.alpha(t))
    abar = float(schedule.alpha_bar(t))
    mean = (z_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    if rng is None:
        raise ContractViolation("rng is required for steps with t > 1")
    noise = torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    return mean + math.sqrt(beta) * noise


def ancestral_sample(denoiser, schedule: NoiseSchedule, shape, rng: torch.Generator, *,
                     tokens=None, hook=None, allow_untrained: bool = False,
                     z_start: torch.Tensor | None = None, callback=None) -> torch.Tensor:
    """Run the full reverse chain from t = T down to 1."""
    z = z_start if z_start is not None else torch.randn(shape, generator=rng)
    for t in range(schedule.steps, 0, -1):
        z = reverse_step(denoiser, z, t, schedule, rng=rng, tokens=tokens, hook=hook,
                         allow_untrained=allow_untrained)
        if callback is not None:
            callback(t, z)
    return z


# ---------------------------------------------------------------------------
# attention

def scaled_softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                             weight_map: torch.Tensor | None = None):
    """softmax(q k^T / sqrt(d)) @ v over the token axis.

    q: [..., P, d], k: [..., K, d], v: [..., K, dv]. Each position's weights
    sum to 1 before any re-weighting. weight_map ([P] or [..., P]), when
    given, multiplies positions' rows after the softmax with no
    renormalization. Returns (output [..., P, dv], attention [..., P, K]).
    """
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ContractViolation("q and k feature dims differ")
    if v.shape[-2] != k.shape[-2]:
        raise ContractViolation("k and v token counts differ")
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    if weight_map is not None:
        if weight_map.shape[-1] != attn.shape[-2]:
            raise ContractViolation("weight map length must match position count")
        attn = attn * weight_map.to(attn.dtype).unsqueeze(-1)
    return attn @ v, attn


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """sin/cos features of integer timesteps, shape [B, dim]."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


_POS_CACHE: dict = {}


def positional_grid(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-d sin/cos position features, shape [dim, h, w]."""
    if dim % 4:
        raise ContractViolation("positional feature dim must be divisible by 4")
    key = (h, w, dim)
    cached = _POS_CACHE.get(key)
    if cached is not None:
        return cached
    q = dim // 4
    freqs = (2.0 ** torch.arange(q, dtype=torch.float32)).reshape(q, 1, 1) * math.pi
    ys = torch.linspace(0.0, 1.0, h).reshape(1, h, 1)
    xs = torch.linspace(0.0, 1.0, w).reshape(1, 1, w)
    ay = (ys * freqs).expand(q, h, w)
    ax = (xs * freqs).expand(q, h, w)
    grid = torch.cat([torch.sin(ay), torch.cos(ay), torch.sin(ax), torch.cos(ax)], dim=0)
    _POS_CACHE[key] = grid
    return grid


def _norm_groups(preferred: int, channels: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class CrossAttention(nn.Module):
    """Single-head cross-attention from image positions to condition tokens.

    Fixed positional features are concatenated to the query input so token
    content can address absolute positions. The optional hook receives the
    post-softmax attention [B, P, K] plus the spatial shape and returns a
    replacement; output is then hook(attn) @ v.
    """

    def __init__(self, channels: int, token_dim: int, attn_dim: int, pos_channels: int = 16,
                 groups: int = 8):
        super().__init__()
        self.pos_channels = pos_channels
        self.norm = nn.GroupNorm(_norm_groups(groups, channels), channels)
        self.to_q = nn.Linear(channels + pos_channels, attn_dim, bias=False)
        self.to_k = nn.Linear(token_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(token_dim, attn_dim, bias=False)
        self.proj = nn.Linear(attn_dim, channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor, hook=None) -> torch.Tensor:
        b, c, h, w = x.shape
        feats = self.norm(x).flatten(2).transpose(1, 2)
        if self.pos_channels:
            pos = positional_grid(h, w, self.pos_channels).to(x.dtype)
            pos = pos.flatten(1).transpose(0, 1).unsqueeze(0).expand(b, -1, -1)
            feats = torch.cat([feats, pos], dim=-1)
        q = self.to_q(feats)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        out, attn = scaled_softmax_attention(q, k, v)
        if hook is not None:
            attn = hook(attn, (h, w))
            out = attn @ v
        out = self.proj(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


# ---------------------------------------------------------------------------
# denoisers

@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of the conditional UNet epsilon-predictor."""

    resolution: int = 64
    in_channels: int = 3
    widths: tuple = (16, 32, 48)
    attn_levels: tuple = (1, 2)
    token_dim: int = 64
    attn_dim: int = 64
    time_dim: int = 64
    pos_channels: int = 16
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "attn_levels", tuple(int(l) for l in self.attn_levels))
        if len(self.widths) < 2:
            raise ContractViolation("need at least two resolution levels")
        if not self.attn_levels:
            raise ContractViolation("at least one cross-attention level is required")
        if any(not 0 <= l < len(self.widths) for l in self.attn_levels):
            raise ContractViolation("attn_levels must index into widths")
        down = 2 ** (len(self.widths) - 1)
        if self.resolution % down:
            raise ContractViolation(f"resolution must be divisible by {down}")

    def digest(self) -> str:
        return config_digest(dataclasses.asdict(self))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_norm_groups(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalDenoiser(nn.Module):
    """UNet epsilon-predictor with cross-attention conditioning.

    Tokens form a set [K, token_dim] or [B, K, token_dim]; `tokens=None`
    substitutes the learned null token (the unconditional branch used by
    guided sampling). The attention hook, when given, is applied at every
    cross-attention site.
    """

    def __init__(self, config: DenoiserConfig, init_seed: int | None = None):
        super().__init__()
        self.config = config
        w = config.widths
        td = config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td))
        self.stem = nn.Conv2d(config.in_channels, w[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, width in enumerate(w):
            cin = w[i - 1] if i else w[0]
            self.down_res.append(ResBlock(cin, width, td, config.groups))
            self.down_attn.append(self._attn(i, width))
            self.downs.append(nn.Conv2d(width, width, 3, stride=2, padding=1)
                              if i < len(w) - 1 else nn.Identity())

        self.mid1 = ResBlock(w[-1], w[-1], td, config.groups)
        self.mid_attn = self._attn(len(w) - 1, w[-1])
        self.mid2 = ResBlock(w[-1], w[-1], td, config.groups)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for i in reversed(range(len(w))):
            cin = w[i] + w[i]          # skip concat
            self.up_res.append(ResBlock(cin, w[i], td, config.groups))
            self.up_attn.append(self._attn(i, w[i]))
            self.up_convs.append(nn.Conv2d(w[i + 1], w[i], 3, padding=1)
                                 if i < len(w) - 1 else nn.Identity())

        self.out_norm = nn.GroupNorm(_norm_groups(config.groups, w[0]), w[0])
        self.out_conv = nn.Conv2d(w[0], config.in_channels, 3, padding=1)
        self.null_token = nn.Parameter(torch.zeros(1, config.token_dim))
        self.trained = False
        if init_seed is not None:
            seeded_init_(self, init_seed)

    def _attn(self, level: int, channels: int):
        if level in self.config.attn_levels:
            return CrossAttention(channels, self.config.token_dim, self.config.attn_dim,
                                  self.config.pos_channels, self.config.groups)
        return None

    def _tokens(self, tokens, batch: int) -> torch.Tensor:
        if tokens is None:
            return self.null_token.unsqueeze(0).expand(batch, -1, -1)
        if not torch.is_tensor(tokens):
            raise ContractViolation("tokens must be a tensor")
        if tokens.ndim == 2:
            tokens = tokens.unsqueeze(0).expand(batch, -1, -1)
        if tokens.ndim != 3 or tokens.shape[0] != batch:
            raise ContractViolation("tokens must be [K, d] or [B, K, d]")
        if tokens.shape[-1] != self.config.token_dim:
            raise ContractViolation(
                f"token dim {tokens.shape[-1]} does not match denoiser config "
                f"({self.config.token_dim})")
        return tokens

    def forward(self, z: torch.Tensor, t, tokens=None, hook=None) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.in_channels:
            raise ContractViolation("z must be [B, C, H, W] with configured channel count")
        b = z.shape[0]
        tok = self._tokens(tokens, b)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(b)
        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_dim).to(z.dtype))

        x = self.stem(z)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downs):
            x = res(x, temb)
            if attn is not None:
                x = attn(x, tok, hook)
            skips.append(x)
            x = down(x)

        x = self.mid1(x, temb)
        if self.mid_attn is not None:
            x = self.mid_attn(x, tok, hook)
        x = self.mid2(x, temb)

        n = len(self.config.widths)
        for j, (res, attn, conv) in enumerate(zip(self.up_res, self.up_attn, self.up_convs)):
            i = n - 1 - j
            if i < n - 1:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = conv(x)
            x = res(torch.cat([x, skips[i]], dim=1), temb)
            if attn is not None:
                x = attn(x, tok, hook)

        return self.out_conv(F.silu(self.out_norm(x)))


class MlpDenoiser(nn.Module):
    """Epsilon-predictor for flat feature vectors (1-d chain checks, demos)."""

    def __init__(self, dim: int = 1, hidden: int = 64, depth: int = 3, time_dim: int = 32,
                 init_seed: int | None = None):
        super().__init__()
        self.dim = dim
        self.time_dim = time_dim
        layers = []
        cin = dim + time_dim
        for _ in range(depth):
            layers += [nn.Linear(cin, hidden), nn.SiLU()]
            cin = hidden
        layers.append(nn.Linear(cin, dim))
        self.net = nn.Sequential(*layers)
        self.trained = False
        if init_seed is not None:
            seeded_init_(self, init_seed)

    def forward(self, z, t, tokens=None, hook=None):
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ContractViolation("z must be [B, dim]")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z.shape[0])
        temb = sinusoidal_embedding(t, self.time_dim).to(z.dtype)
        return self.net(torch.cat([z, temb], dim=1))


def seeded_init_(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically re-draw all parameters (sorted-name order)."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2 and name.endswith(".weight"):
                fan_in = int(np.prod(p.shape[1:]))
                p.normal_(0.0, 1.0 / math.sqrt(max(fan_in, 1)), generator=g)
            elif name.endswith(".bias"):
                p.zero_()
            elif p.ndim == 1 and name.endswith(".weight"):
                p.fill_(1.0)
            else:
                p.normal_(0.0, 0.02, generator=g)
    return module


def train_denoiser(denoiser: nn.Module, sample_batch, schedule: NoiseSchedule, *,
                   steps: int, batch_size: int, lr: float, seed: int,
                   log_every: int = 0) -> list:
    """Generic epsilon-matching training loop.

    sample_batch(generator, n) returns (x0, tokens_or_None). Timesteps are
    uniform on [1, T]; loss is the mean squared error between drawn and
    predicted noise. Marks the denoiser trained and returns per-step losses.
    """
    g = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        x0, tokens = sample_batch(g, batch_size)
        t = torch.randint(1, schedule.steps + 1, (x0.shape[0],), generator=g)
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        z_t = forward_diffuse(x0, t, noise, schedule)
        eps = denoiser(z_t, t, tokens=tokens)
        loss = F.mse_loss(eps, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            recent = losses[-log_every:]
            print(f"  step {step + 1}/{steps}  loss {sum(recent) / len(recent):.4f}")
    denoiser.trained = True
    return losses


# ---------------------------------------------------------------------------
# codec boundary

class IdentityCodec:
    """Pixel-space codec: codes are the images themselves (exact round trip)."""

    scale_factor = 1
    tolerance = 0.0

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        return code


class HaarCodec:
    """Orthonormal 2x2 block transform packing space into channels (factor 2).

    Exercises the non-identity codec path: codes have 4x the channels at
    half the spatial size, and the round trip is exact up to float error.
    """

    scale_factor = 2
    tolerance = 1e-5

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[-1] % 2 or image.shape[-2] % 2:
            raise ContractViolation("image must be [B, C, H, W] with even spatial dims")
        a = image[..., 0::2, 0::2]
        b = image[..., 0::2, 1::2]
        c = image[..., 1::2, 0::2]
        d = image[..., 1::2, 1::2]
        return torch.cat([(a + b + c + d) / 2, (a - b + c - d) / 2,
                          (a + b - c - d) / 2, (a - b - c + d) / 2], dim=1)

    def decode(self, code: torch.Tensor) -> torch.Tensor:
        if code.ndim != 4 or code.shape[1] % 4:
            raise ContractViolation("code must be [B, 4C, H, W]")
        ll, lh, hl, hh = torch.chunk(code, 4, dim=1)
        a = (ll + lh + hl + hh) / 2
        b = (ll - lh + hl - hh) / 2
        c = (ll + lh - hl - hh) / 2
        d = (ll - lh - hl + hh) / 2
        bsz, ch, h, w = a.shape
        out = torch.empty(bsz, ch, h * 2, w * 2, dtype=code.dtype)
        out[..., 0::2, 0::2] = a
        out[..., 0::2, 1::2] = b
        out[..., 1::2, 0::2] = c
        out[..., 1::2, 1::2] = d
        return out


def codec_roundtrip_error(codec, image: torch.Tensor) -> float:
    return float((codec.decode(codec.encode(image)) - image).abs().max())


# ---------------------------------------------------------------------------
# persistence

def save_denoiser(path, denoiser: ConditionalDenoiser) -> None:
    save_checkpoint(path, kind="denoiser", digest=denoiser.config.digest(),
                    arrays=module_arrays(denoiser),
                    extra={"trained": bool(denoiser.trained),
                           "config": dataclasses.asdict(denoiser.config)})


def load_denoiser(path, config: DenoiserConfig | None = None) -> ConditionalDenoiser:
    expected = config.digest() if config is not None else None
    _, digest, arrays, extra = load_checkpoint(path, kind="denoiser", expected_digest=expected)
    stored = extra.get("config")
    if stored is None:
        raise CheckpointError(f"{path}: header lacks the architecture record")
    cfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()})
    if cfg.digest() != digest:
        raise CheckpointError(f"{path}: header digest does not match stored architecture")
    model = ConditionalDenoiser(cfg)
    load_module_arrays(model, arrays)
    model.trained = bool(extra.get("trained", False))
    return model
