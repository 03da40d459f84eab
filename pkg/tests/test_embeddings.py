import numpy as np
import pytest
import torch

from anogen import data as DA
from anogen import embeddings as E
from anogen.checkpoint import CheckpointError
from anogen.diffusion import (ConditionalDenoiser, ContractViolation, DenoiserConfig,
                              IdentityCodec, NoiseSchedule)


def tiny_denoiser(seed=0, res=16, token_dim=16):
    cfg = DenoiserConfig(resolution=res, widths=(8, 12), attn_levels=(1,),
                         token_dim=token_dim, attn_dim=16, time_dim=16,
                         pos_channels=8, groups=4)
    return ConditionalDenoiser(cfg, init_seed=seed)


def tiny_encoder(seed=0, res=16, token_dim=16, n_tokens=2):
    cfg = E.SpatialEncoderConfig(resolution=res, stages=(4, 8), fpn_width=8,
                                 n_tokens=n_tokens, token_dim=token_dim)
    return E.SpatialEncoder(cfg, init_seed=seed)


def blob_mask(n=16, cx=8, cy=8, r=3):
    yy, xx = np.mgrid[0:n, 0:n]
    return (((xx - cx) ** 2 + (yy - cy) ** 2) <= r * r).astype(np.uint8)


# ---------------------------------------------------------------------------
# domain types

def test_anomaly_mask_validation_and_bbox():
    m = E.AnomalyMask(blob_mask())
    assert m.area > 0
    y0, x0, y1, x1 = m.bbox()
    assert (y0, x0, y1, x1) == (5, 5, 11, 11)
    assert E.AnomalyMask(np.zeros((4, 4), np.uint8)).bbox() is None
    with pytest.raises(ContractViolation):
        E.AnomalyMask(np.full((4, 4), 0.5))
    with pytest.raises(ContractViolation):
        E.AnomalyMask(np.zeros((4, 4, 2), np.uint8))


def test_token_embedding_roles_and_concat_order():
    e_a = E.TokenEmbedding(torch.zeros(8, 16), "anomaly")
    e_s = E.TokenEmbedding(torch.ones(4, 16), "spatial")
    e = E.concat_embeddings(e_a, e_s)
    assert e.role == "concatenated"
    assert e.count == 12                      # k=8 anomaly + n=4 spatial tokens
    assert torch.equal(e.tokens[:8], e_a.tokens)
    assert torch.equal(e.tokens[8:], e_s.tokens)
    with pytest.raises(ContractViolation):
        E.concat_embeddings(e_s, e_a)
    with pytest.raises(ContractViolation):
        E.TokenEmbedding(torch.full((2, 3), float("nan")), "anomaly")
    with pytest.raises(ContractViolation):
        E.TokenEmbedding(torch.zeros(2, 3), "other")


# ---------------------------------------------------------------------------
# spatial encoder

def test_encoder_shape_and_determinism():
    enc = tiny_encoder(seed=3)
    mask = blob_mask()
    a = E.encode_mask(mask, enc)
    b = E.encode_mask(mask.copy(), enc)
    assert a.role == "spatial"
    assert a.tokens.shape == (2, 16)
    assert torch.equal(a.tokens, b.tokens)


def test_encoder_accepts_empty_and_offsize_masks():
    enc = tiny_encoder(seed=4)
    out = E.encode_mask(np.zeros((16, 16), np.uint8), enc)
    assert out.tokens.shape == (2, 16)
    big = E.encode_mask(blob_mask(64, 30, 30, 10), enc)   # resampled down
    assert big.tokens.shape == (2, 16)


def test_encoder_nan_fault():
    enc = tiny_encoder(seed=5)
    with torch.no_grad():
        enc.heads[0].weight.fill_(float("inf"))
    with pytest.raises(E.EncodingFault):
        E.encode_mask(blob_mask(), enc)


def test_encoder_different_masks_differ():
    enc = tiny_encoder(seed=6)
    a = E.encode_mask(blob_mask(16, 4, 4, 2), enc)
    b = E.encode_mask(blob_mask(16, 12, 12, 2), enc)
    assert not torch.allclose(a.tokens, b.tokens)


# ---------------------------------------------------------------------------
# masked loss

def make_loss_inputs(seed=0, res=16):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(1, 3, res, res, generator=g)
    noise = torch.randn(1, 3, res, res, generator=g)
    return z, noise


def test_masked_loss_zero_mask_is_zero_with_zero_grads():
    den = tiny_denoiser(seed=1)
    z, noise = make_loss_inputs(2)
    tokens = torch.zeros(3, 16, requires_grad=True)
    loss = E.masked_diffusion_loss(den, z, 3, tokens.unsqueeze(0), noise,
                                   torch.zeros(16, 16))
    assert float(loss.detach()) == 0.0
    loss.backward()
    assert torch.equal(tokens.grad, torch.zeros_like(tokens))


def test_masked_loss_full_mask_equals_unmasked():
    den = tiny_denoiser(seed=2)
    z, noise = make_loss_inputs(3)
    tokens = torch.randn(3, 16, generator=torch.Generator().manual_seed(4))
    loss = E.masked_diffusion_loss(den, z, 5, tokens, noise, torch.ones(16, 16))
    with torch.no_grad():
        plain = torch.nn.functional.mse_loss(den(z, 5, tokens=tokens), noise)
    assert float(loss.detach()) == pytest.approx(float(plain), abs=1e-6)


def test_masked_loss_perfect_prediction_is_zero():
    class Echo:
        config = None
        trained = True

        def __init__(self, noise):
            self.noise = noise

        def __call__(self, z, t, tokens=None, hook=None):
            return self.noise

    z, noise = make_loss_inputs(5)
    loss = E.masked_diffusion_loss(Echo(noise), z, 1, None, noise, torch.ones(16, 16))
    assert float(loss) == 0.0


def test_masked_loss_ignores_outside_mask_bitwise():
    mask = torch.zeros(16, 16)
    mask[2:9, 3:10] = 1.0

    class Shifted:
        trained = True

        def __init__(self, base, delta):
            self.base, self.delta = base, delta

        def __call__(self, z, t, tokens=None, hook=None):
            return self.base + self.delta

    g = torch.Generator().manual_seed(6)
    base = torch.randn(1, 3, 16, 16, generator=g)
    z, noise = make_loss_inputs(7)
    outside = torch.randn(1, 3, 16, 16, generator=g) * (1.0 - mask)
    a = E.masked_diffusion_loss(Shifted(base, 0.0), z, 2, None, noise, mask)
    b = E.masked_diffusion_loss(Shifted(base, outside), z, 2, None, noise, mask)
    assert float(a) == float(b)


def test_masked_loss_validation():
    den = tiny_denoiser(seed=3)
    z, noise = make_loss_inputs(8)
    with pytest.raises(ContractViolation):
        E.masked_diffusion_loss(den, z, 1, None, noise, torch.full((16, 16), 0.5))
    with pytest.raises(ContractViolation):
        E.masked_diffusion_loss(den, z, 1, None, noise, torch.ones(8, 8))
    with pytest.raises(ContractViolation):
        E.masked_diffusion_loss(den, z, 1, None, noise[:, :, :8, :], torch.ones(16, 16))


def test_masked_loss_keeps_denoiser_frozen():
    den = tiny_denoiser(seed=4)
    for p in den.parameters():
        p.requires_grad_(False)
    z, noise = make_loss_inputs(9)
    tokens = torch.randn(3, 16, requires_grad=True)
    mask = torch.from_numpy(blob_mask()).to(torch.float32)
    loss = E.masked_diffusion_loss(den, z, 4, tokens.unsqueeze(0), noise, mask)
    loss.backward()
    assert tokens.grad is not None and float(tokens.grad.abs().sum()) > 0
    assert all(p.grad is None for p in den.parameters())


def test_masked_loss_gradient_matches_finite_differences():
    den = tiny_denoiser(seed=5, res=8).double()
    for p in den.parameters():
        p.requires_grad_(False)
    g = torch.Generator().manual_seed(10)
    z = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    noise = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    mask = torch.from_numpy(blob_mask(8, 4, 4, 2)).to(torch.float64)
    tokens = torch.randn(2, 16, generator=g, dtype=torch.float64, requires_grad=True)

    loss = E.masked_diffusion_loss(den, z, 3, tokens.unsqueeze(0), noise, mask)
    loss.backward()
    grad = tokens.grad.clone()

    h = 1e-5
    rng = np.random.default_rng(0)
    for _ in range(6):
        i, j = int(rng.integers(0, 2)), int(rng.integers(0, 16))
        with torch.no_grad():
            probe = tokens.detach().clone()
            probe[i, j] += h
            up = E.masked_diffusion_loss(den, z, 3, probe.unsqueeze(0), noise, mask)
            probe[i, j] -= 2 * h
            dn = E.masked_diffusion_loss(den, z, 3, probe.unsqueeze(0), noise, mask)
        fd = (float(up) - float(dn)) / (2 * h)
        an = float(grad[i, j])
        denom = max(abs(fd), abs(an), 1e-8)
        assert abs(fd - an) / denom < 1e-3


# ---------------------------------------------------------------------------
# embedding training

def small_pairs(res=16):
    img = DA.render_texture("stripes", res, np.random.default_rng(0))
    mask = blob_mask(res, 8, 8, 3)
    img2, mask2 = DA.render_defect("stain", img, np.random.default_rng(1))
    return {"tex/stain": [(img2, mask2)], "tex/scratch": [(img2, mask)]}


def fast_cfg(**kw):
    base = dict(steps=8, batch_size=2, lr=5e-3, k_tokens=3, n_tokens=2,
                augment=None)
    base.update(kw)
    return E.EmbeddingTrainConfig(**base)


def test_train_embeddings_structure_and_counters():
    den = tiny_denoiser(seed=6)
    sched = NoiseSchedule.linear(10)
    enc_cfg = E.SpatialEncoderConfig(resolution=16, stages=(4, 8), fpn_width=8,
                                     n_tokens=2, token_dim=16)
    reg, losses = E.train_spatial_anomaly_embeddings(
        small_pairs(), den, IdentityCodec(), sched, config=fast_cfg(), seed=0,
        encoder_config=enc_cfg)
    assert reg.type_ids() == ["tex/scratch", "tex/stain"]
    assert len(losses) == 8
    assert reg.counters["embed_steps"] == 8
    a = reg.entry("tex/stain").anomaly_tokens
    b = reg.entry("tex/scratch").anomaly_tokens
    assert a.shape == (3, 16)
    assert not torch.equal(a, b)
    cond = reg.condition_for("tex/stain", blob_mask())
    assert cond.count == 5 and cond.role == "concatenated"
    # denoiser untouched and still unfrozen flags restored
    assert all(p.requires_grad for p in den.parameters())


def test_train_embeddings_rejects_empty_types():
    den = tiny_denoiser(seed=7)
    sched = NoiseSchedule.linear(10)
    with pytest.raises(ContractViolation):
        E.train_spatial_anomaly_embeddings({}, den, IdentityCodec(), sched,
                                           config=fast_cfg(), seed=0)
    with pytest.raises(ContractViolation):
        E.train_spatial_anomaly_embeddings({"a/b": []}, den, IdentityCodec(), sched,
                                           config=fast_cfg(), seed=0)


def test_train_embeddings_loss_decreases_most_seeds():
    # short-T schedule keeps per-step loss variance low enough to read a trend
    sched = NoiseSchedule.from_betas([0.05, 0.1, 0.15])
    pairs = small_pairs()
    wins = 0
    for seed in range(10):
        den = tiny_denoiser(seed=8)
        enc_cfg = E.SpatialEncoderConfig(resolution=16, stages=(4, 8), fpn_width=8,
                                         n_tokens=2, token_dim=16)
        cfg = fast_cfg(steps=10, batch_size=4, lr=2e-2)
        _, losses = E.train_spatial_anomaly_embeddings(
            pairs, den, IdentityCodec(), sched, config=cfg, seed=seed,
            encoder_config=enc_cfg)
        if np.mean(losses[-3:]) < np.mean(losses[:3]):
            wins += 1
    assert wins >= 8


def test_train_embeddings_deterministic():
    sched = NoiseSchedule.linear(10)
    pairs = small_pairs()
    outs = []
    for _ in range(2):
        den = tiny_denoiser(seed=9)
        enc_cfg = E.SpatialEncoderConfig(resolution=16, stages=(4, 8), fpn_width=8,
                                         n_tokens=2, token_dim=16)
        reg, losses = E.train_spatial_anomaly_embeddings(
            pairs, den, IdentityCodec(), sched, config=fast_cfg(), seed=13,
            encoder_config=enc_cfg)
        outs.append((reg.entry("tex/stain").anomaly_tokens, losses))
    assert torch.equal(outs[0][0], outs[1][0])
    assert outs[0][1] == outs[1][1]


# ---------------------------------------------------------------------------
# mask embedding training

def test_mask_embedding_zero_steps_is_initialization():
    den = tiny_denoiser(seed=10)
    sched = NoiseSchedule.linear(10)
    cfg = E.MaskTrainConfig(steps=0, k_tokens=4, augment=None)
    e_m, losses = E.train_mask_embedding([blob_mask()], den, IdentityCodec(), sched,
                                         config=cfg, seed=21)
    assert e_m.shape == (4, 16)
    assert losses == []
    expected = torch.empty(4, 16)
    expected.normal_(0.0, cfg.init_sigma, generator=torch.Generator().manual_seed(21))
    assert torch.equal(e_m, expected)


def test_mask_embedding_loss_decreases():
    sched = NoiseSchedule.from_betas([0.05, 0.1, 0.15])
    wins = 0
    for seed in range(10):
        den = tiny_denoiser(seed=11)
        cfg = E.MaskTrainConfig(steps=10, batch_size=4, lr=2e-2, k_tokens=2, augment=None)
        _, losses = E.train_mask_embedding([blob_mask()], den, IdentityCodec(), sched,
                                           config=cfg, seed=seed)
        if np.mean(losses[-3:]) < np.mean(losses[:3]):
            wins += 1
    assert wins >= 8


# ---------------------------------------------------------------------------
# registry persistence

def test_registry_roundtrip(tmp_path):
    den = tiny_denoiser(seed=12)
    sched = NoiseSchedule.linear(10)
    enc_cfg = E.SpatialEncoderConfig(resolution=16, stages=(4, 8), fpn_width=8,
                                     n_tokens=2, token_dim=16)
    reg, _ = E.train_spatial_anomaly_embeddings(
        small_pairs(), den, IdentityCodec(), sched, config=fast_cfg(), seed=1,
        encoder_config=enc_cfg)
    e_m, _ = E.train_mask_embedding([blob_mask()], den, IdentityCodec(), sched,
                                    config=E.MaskTrainConfig(steps=2, k_tokens=2,
                                                             augment=None), seed=2)
    reg.entries["tex/stain"].mask_tokens = e_m
    reg.counters["mask_steps"]["tex/stain"] = 2

    path = tmp_path / "registry.ckpt"
    reg.save(path)
    back = E.AnomalyTypeRegistry.load(path)
    assert back.type_ids() == reg.type_ids()
    assert torch.equal(back.entry("tex/stain").anomaly_tokens,
                       reg.entry("tex/stain").anomaly_tokens)
    assert torch.equal(back.entry("tex/stain").mask_tokens, e_m)
    assert back.entry("tex/scratch").mask_tokens is None
    assert back.counters["mask_steps"] == {"tex/stain": 2}
    mask = blob_mask()
    assert torch.equal(E.encode_mask(mask, back.encoder).tokens,
                       E.encode_mask(mask, reg.encoder).tokens)
    with pytest.raises(ContractViolation):
        back.mask_embedding("tex/scratch")
    with pytest.raises(ContractViolation):
        back.entry("tex/unknown")


def test_registry_tamper_detected(tmp_path):
    enc = tiny_encoder(seed=14)
    reg = E.AnomalyTypeRegistry(enc)
    reg.entries["a/b"] = E.TypeEntry(torch.zeros(2, 16))
    path = tmp_path / "reg.ckpt"
    reg.save(path)
    blob = bytearray(path.read_bytes())
    pos = blob.find(b'"config_digest": "')
    assert pos > 0
    start = pos + len(b'"config_digest": "')
    blob[start:start + 4] = b"dead"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        E.AnomalyTypeRegistry.load(path)
