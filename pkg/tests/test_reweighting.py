import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from anogen import reweighting as R
from anogen.diffusion import ContractViolation, scaled_softmax_attention


def brute_force_weights(diffs, mask):
    """Independent oracle: plain-python softmax of 1/d over live positions."""
    mask = np.asarray(mask, dtype=float)
    diffs = np.asarray(diffs, dtype=float)
    area = mask.sum()
    live = [(i, j) for i in range(mask.shape[0]) for j in range(mask.shape[1])
            if mask[i, j] > 0 and diffs[i, j] > 0]
    out = np.zeros_like(diffs)
    if not live:
        return out
    logits = [1.0 / diffs[i, j] for i, j in live]
    top = max(logits)
    exps = [math.exp(l - top) for l in logits]
    total = sum(exps)
    for (i, j), e in zip(live, exps):
        out[i, j] = area * e / total
    return out


def make_inputs(diffs, mask):
    """Build (x0_hat, y) whose channel-summed squared gap equals diffs."""
    diffs = np.asarray(diffs, dtype=np.float64)
    y = torch.zeros(1, *diffs.shape, dtype=torch.float64)
    x0 = torch.from_numpy(np.sqrt(diffs)).unsqueeze(0).to(torch.float64)
    return x0, y, torch.as_tensor(np.asarray(mask, dtype=np.float64))


# ---------------------------------------------------------------------------
# compute_weight_map

def test_uniform_differences_give_unit_weights():
    mask = [[1, 1], [1, 1]]
    diffs = [[0.5, 0.5], [0.5, 0.5]]
    x0, y, m = make_inputs(diffs, mask)
    wm = R.compute_weight_map(x0, y, m)
    assert wm.status == "ok"
    assert torch.allclose(wm.weights, torch.ones(2, 2, dtype=torch.float64), atol=1e-12)


def test_hand_example_two_pixel_mask():
    # squared gaps {1, 3} -> logits {1, 1/3}; oracle from scalar softmax
    e1, e3 = math.exp(1.0), math.exp(1.0 / 3.0)
    expected = [2 * e1 / (e1 + e3), 2 * e3 / (e1 + e3)]
    assert expected[0] == pytest.approx(1.3215, abs=1e-3)
    assert expected[1] == pytest.approx(0.6785, abs=1e-3)

    mask = [[1, 1], [0, 0]]
    diffs = [[1.0, 3.0], [0.0, 0.0]]
    x0, y, m = make_inputs(diffs, mask)
    wm = R.compute_weight_map(x0, y, m)
    assert float(wm.weights[0, 0]) == pytest.approx(expected[0], abs=1e-9)
    assert float(wm.weights[0, 1]) == pytest.approx(expected[1], abs=1e-9)
    assert float(wm.weights[1].sum()) == 0.0


def test_empty_mask_warns_and_zeroes():
    x0, y, m = make_inputs([[1.0]], [[0]])
    with pytest.warns(R.DegenerateWeightMapWarning):
        wm = R.compute_weight_map(x0, y, m)
    assert wm.status == "empty-mask"
    assert float(wm.weights.abs().sum()) == 0.0


def test_exact_match_inside_mask_warns_and_zeroes():
    y = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    m = torch.ones(4, 4)
    with pytest.warns(R.DegenerateWeightMapWarning):
        wm = R.compute_weight_map(y.clone(), y, m)
    assert wm.status == "zero-distance"
    assert float(wm.weights.abs().sum()) == 0.0


def test_partial_zero_distance_gets_zero_weight():
    mask = [[1, 1, 1]]
    diffs = [[0.0, 2.0, 2.0]]
    x0, y, m = make_inputs(diffs, mask)
    wm = R.compute_weight_map(x0, y, m)
    assert float(wm.weights[0, 0]) == 0.0
    assert float(wm.weights[0, 1]) == pytest.approx(1.5, abs=1e-12)
    assert float(wm.weights[0, 2]) == pytest.approx(1.5, abs=1e-12)


def test_epsilon_floor_keeps_zero_gap_positions():
    mask = [[1, 1]]
    diffs = [[0.0, 1.0]]
    x0, y, m = make_inputs(diffs, mask)
    wm = R.compute_weight_map(x0, y, m, epsilon=1.0)
    # the exact-match position now carries the LARGEST weight
    e1, e05 = math.exp(1.0), math.exp(0.5)
    assert float(wm.weights[0, 0]) == pytest.approx(2 * e1 / (e1 + e05), abs=1e-9)
    assert float(wm.weights[0, 1]) == pytest.approx(2 * e05 / (e1 + e05), abs=1e-9)
    assert float(wm.weights.sum()) == pytest.approx(2.0, abs=1e-9)


def test_overflowing_inverse_distances_share_mass():
    mask = [[1, 1, 1]]
    diffs = [[1e-320, 1e-320, 1.0]]
    x0, y, m = make_inputs(diffs, mask)
    wm = R.compute_weight_map(x0, y, m)
    assert bool(torch.isfinite(wm.weights).all())
    assert float(wm.weights[0, 0]) == pytest.approx(1.5)
    assert float(wm.weights[0, 1]) == pytest.approx(1.5)
    assert float(wm.weights[0, 2]) == 0.0


def test_mask_validation_errors():
    x0 = torch.zeros(1, 2, 2)
    with pytest.raises(ContractViolation):
        R.compute_weight_map(x0, x0, torch.full((2, 2), 0.5))
    with pytest.raises(ContractViolation):
        R.compute_weight_map(x0, x0, torch.ones(3, 2))
    with pytest.raises(ContractViolation):
        R.compute_weight_map(x0, torch.zeros(1, 3, 3), torch.ones(2, 2))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 12), w=st.integers(1, 12))
def test_random_instances_match_brute_force(seed, h, w):
    rng = np.random.default_rng(seed)
    mask = (rng.random((h, w)) < 0.4).astype(float)
    diffs = np.where(rng.random((h, w)) < 0.2, 0.0, rng.random((h, w)) * 3)
    x0, y, m = make_inputs(diffs, mask)
    expected = brute_force_weights(diffs * mask, mask)
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("ignore", R.DegenerateWeightMapWarning)
        wm = R.compute_weight_map(x0, y, m)
    assert np.allclose(wm.weights.numpy(), expected, atol=1e-9)
    # support and mass
    assert np.all(wm.weights.numpy()[mask == 0] == 0.0)
    if expected.sum() > 0:
        assert float(wm.weights.sum()) == pytest.approx(mask.sum(), abs=1e-4)
    # monotonicity among live positions
    live = [(i, j) for i in range(h) for j in range(w) if mask[i, j] and diffs[i, j] > 0]
    for a in live:
        for b in live:
            if diffs[a] < diffs[b]:
                assert wm.weights[a] > wm.weights[b]


# ---------------------------------------------------------------------------
# resample_weight_map

def test_resample_hand_example():
    # all-ones 4x4 -> 2x2 cells each holding its block sum
    w = torch.ones(4, 4, dtype=torch.float64)
    out = R.resample_weight_map(w, (2, 2))
    assert torch.equal(out, torch.full((2, 2), 4.0, dtype=torch.float64))
    assert float(out.sum()) == float(w.sum())


def test_resample_identity_and_zero():
    w = torch.rand(8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert R.resample_weight_map(w, (8, 8)) is w
    z = torch.zeros(8, 8, dtype=torch.float64)
    assert float(R.resample_weight_map(z, (2, 2)).abs().sum()) == 0.0


def test_resample_preserves_sum_every_level():
    w = torch.rand(32, 32, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    for target in [(16, 16), (8, 8), (4, 4), (2, 2), (1, 1)]:
        out = R.resample_weight_map(w, target)
        assert float(out.sum()) == pytest.approx(float(w.sum()), abs=1e-4)


def test_resample_rejects_upsampling_and_nondivisors():
    w = torch.ones(8, 8)
    with pytest.raises(ContractViolation):
        R.resample_weight_map(w, (16, 16))
    with pytest.raises(ContractViolation):
        R.resample_weight_map(w, (3, 3))
    with pytest.raises(ContractViolation):
        R.resample_weight_map(w, (0, 4))


# ---------------------------------------------------------------------------
# reweight_attention

def test_reweight_scalar_example():
    attn = torch.tensor([[[0.25, 0.75]]])
    out = R.reweight_attention(attn, torch.tensor([2.0]))
    assert out[0, 0].tolist() == pytest.approx([0.5, 1.5], abs=1e-7)


def test_reweight_ones_is_identity():
    g = torch.Generator().manual_seed(3)
    attn = torch.softmax(torch.randn(2, 6, 4, generator=g), dim=-1)
    out = R.reweight_attention(attn, torch.ones(6))
    assert torch.equal(out, attn)


def test_zero_weight_annihilates_attended_output():
    g = torch.Generator().manual_seed(4)
    q = torch.randn(1, 3, 5, generator=g)
    k = torch.randn(1, 2, 5, generator=g)
    v = torch.randn(1, 2, 7, generator=g)
    wmap = torch.tensor([1.0, 0.0, 2.0])
    out, attn = scaled_softmax_attention(q, k, v, weight_map=wmap)
    assert torch.allclose(out[0, 1], torch.zeros(7))
    assert not torch.allclose(out[0, 0], torch.zeros(7))


def test_reweight_shape_mismatch():
    with pytest.raises(ContractViolation):
        R.reweight_attention(torch.zeros(1, 4, 2), torch.ones(5))


# ---------------------------------------------------------------------------
# hook plumbing

def test_hook_resamples_to_layer_resolution():
    w = torch.zeros(8, 8, dtype=torch.float64)
    w[0:2, 0:2] = 1.0   # mass 4 in one corner
    wm = R.AttentionWeightMap(w, mask_area=4.0)
    hook = R.AdaptiveReweightHook(wm)
    attn = torch.ones(1, 16, 3) / 3.0
    out = hook(attn, (4, 4))
    # corner cell holds the whole mass (4), everything else zero
    assert float(out[0, 0, 0]) == pytest.approx(4.0 / 3.0, abs=1e-7)
    assert float(out[0, 5:, :].abs().sum()) == 0.0
    # cached resample reused
    assert wm.at_resolution(4, 4) is wm.at_resolution(4, 4)


def test_ones_hook_matches_no_hook():
    attn = torch.softmax(torch.randn(2, 9, 4, generator=torch.Generator().manual_seed(5)), -1)
    assert torch.equal(R.ones_hook()(attn, (3, 3)), attn)


def test_weight_map_png_dump(tmp_path):
    from PIL import Image
    w = torch.rand(6, 6, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    wm = R.AttentionWeightMap(w, mask_area=float(w.sum()))
    p = tmp_path / "w.png"
    R.save_weight_map_image(wm, p)
    img = np.asarray(Image.open(p))
    assert img.shape == (6, 6)
    assert img.max() == 65535
