"""Blended conditional sampling: anomaly pairs and synthesized masks.

The sampling loop keeps the region outside the mask pinned to the forward
marginal of the normal sample while the conditional reverse process fills
the mask interior. Blending happens in code space each step; a final
pixel-space composite makes the background exactly equal to the input.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from . import data as data_mod
from .checkpoint import arrays_digest, module_arrays
from .diffusion import (ContractViolation, forward_diffuse, predict_x0,
                        reverse_step)
from .embeddings import AnomalyMask, AnomalyTypeRegistry, render_mask_image
from .reweighting import (AdaptiveReweightHook, DegenerateWeightMapWarning,
                          compute_weight_map, save_weight_map_image)


class MaskSynthesisError(RuntimeError):
    """Guided sampling kept producing empty masks."""


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class GenerationRequest:
    normal: np.ndarray                  # HxWx3 float in [0, 1]
    mask: AnomalyMask | None            # None -> synthesize from the type's mask tokens
    type_id: str
    seed: int
    reweight: bool = True
    guidance_scale: float = 5.0
    dump_weight_maps: Path | None = None


@dataclass
class AnomalyPair:
    image: np.ndarray
    mask: AnomalyMask
    type_id: str
    seed: int
    provenance: dict = field(default_factory=dict)


def request_generators(seed: int):
    """Two independent torch generators for one request.

    The main stream drives the conditional chain exactly like plain
    ancestral sampling would; the secondary stream supplies the fresh
    background noise, so turning blending on or off never shifts the main
    stream's draws.
    """
    s_main, s_bg = np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)
    return (torch.Generator().manual_seed(int(s_main) & 0x7FFFFFFFFFFFFFFF),
            torch.Generator().manual_seed(int(s_bg) & 0x7FFFFFFFFFFFFFFF))


def _to_batch(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3:
        raise ContractViolation("normal sample must be HxWx3")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(
        torch.float32).unsqueeze(0)


def weights_digest(denoiser, registry: AnomalyTypeRegistry) -> str:
    """Digest identifying the trained weights feeding a generation run."""
    h = hashlib.sha256()
    h.update(arrays_digest(module_arrays(denoiser)).encode())
    h.update(registry.digest().encode())
    for tid in registry.type_ids():
        entry = registry.entry(tid)
        h.update(arrays_digest({"a": entry.anomaly_tokens.numpy()}).encode())
        if entry.mask_tokens is not None:
            h.update(arrays_digest({"m": entry.mask_tokens.numpy()}).encode())
    return h.hexdigest()[:16]


def generate_anomaly(request: GenerationRequest, registry: AnomalyTypeRegistry,
                     denoiser, codec, schedule, *, allow_untrained: bool = False,
                     reweight_epsilon: float = 0.0) -> AnomalyPair:
    """One blended sampling run producing an aligned image-mask pair."""
    registry.entry(request.type_id)      # raises on unknown type

    mask = request.mask
    mask_source = "given"
    if mask is None:
        mask = synthesize_mask(request.type_id, registry, denoiser, codec, schedule,
                               seed=request.seed, guidance_scale=request.guidance_scale,
                               allow_untrained=allow_untrained)
        mask_source = "synthesized"
    else:
        mask = AnomalyMask.from_any(mask)

    y = np.asarray(request.normal, dtype=np.float32)
    if mask.shape != y.shape[:2]:
        raise ContractViolation("mask and normal sample resolutions differ")

    if mask.area == 0:
        warnings.warn("empty mask: returning the normal sample unchanged", EmptyMaskWarning)
        return AnomalyPair(y.copy(), mask, request.type_id, request.seed,
                           {"mask_source": mask_source, "reweight": request.reweight,
                            "status": "empty-mask"})

    tokens = registry.condition_for(request.type_id, mask).tokens
    y_batch = _to_batch(y)
    y_code = codec.encode(y_batch)
    code_hw = y_code.shape[-2:]
    m_code = torch.from_numpy(
        data_mod.resample_mask_nearest(mask.grid, (int(code_hw[0]), int(code_hw[1])))
    ).to(y_code.dtype).reshape(1, 1, *code_hw)
    mask_full = mask.to_tensor()

    g_main, g_bg = request_generators(request.seed)
    hook = AdaptiveReweightHook() if request.reweight else None
    if request.dump_weight_maps is not None:
        Path(request.dump_weight_maps).mkdir(parents=True, exist_ok=True)

    z = torch.randn(y_code.shape, generator=g_main, dtype=y_code.dtype)
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            if hook is not None:
                eps_plain = denoiser(z, t, tokens=tokens)
                x0_code = predict_x0(z, eps_plain, t, schedule)
                x0_img = codec.decode(x0_code)[0]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", DegenerateWeightMapWarning)
                    wm = compute_weight_map(x0_img, y_batch[0], mask_full,
                                            epsilon=reweight_epsilon)
                hook.map = wm if wm.status == "ok" else None
                if request.dump_weight_maps is not None and hook.map is not None:
                    save_weight_map_image(wm, Path(request.dump_weight_maps) /
                                          f"step_{t:04d}.png")
            z_prev = reverse_step(denoiser, z, t, schedule, rng=g_main, tokens=tokens,
                                  hook=hook, allow_untrained=allow_untrained)
            if t > 1:
                bg_noise = torch.randn(y_code.shape, generator=g_bg, dtype=y_code.dtype)
                y_noised = forward_diffuse(y_code, t - 1, bg_noise, schedule)
            else:
                y_noised = y_code
            z = z_prev * m_code + y_noised * (1.0 - m_code)

    gen = codec.decode(z)[0].numpy().transpose(1, 2, 0)
    gen = np.clip(gen, 0.0, 1.0)
    keep = mask.grid[..., None] > 0
    composite = np.where(keep, gen, y).astype(np.float32)
    return AnomalyPair(composite, mask, request.type_id, request.seed,
                       {"mask_source": mask_source, "reweight": request.reweight,
                        "status": "ok"})


# ---------------------------------------------------------------------------
# mask synthesis

def sample_mask_image(mask_tokens: torch.Tensor | None, denoiser, codec, schedule, *,
                      seed: int, guidance_scale: float = 5.0,
                      allow_untrained: bool = False) -> np.ndarray:
    """Guided unconditional/conditional sample rendered to grayscale [0,1].

    eps = eps(x_t) + s * (eps(x_t, e_m) - eps(x_t)); s=0 reduces to the
    plain unconditional sample regardless of the tokens passed.
    """
    res = denoiser.config.resolution
    code_shape = (1, denoiser.config.in_channels, res, res)
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(code_shape, generator=g)
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            eps_u = denoiser(z, t, tokens=None)
            if guidance_scale == 0.0 or mask_tokens is None:
                eps = eps_u
            else:
                eps_c = denoiser(z, t, tokens=mask_tokens)
                eps = eps_u + guidance_scale * (eps_c - eps_u)
            z = reverse_step(denoiser, z, t, schedule, rng=g, eps_hat=eps,
                             allow_untrained=allow_untrained)
    img = codec.decode(z)[0].numpy().mean(axis=0)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-8:
        return np.zeros_like(img)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def postprocess_mask(gray: np.ndarray, threshold: float = 0.5,
                     min_area_frac: float = 0.001) -> AnomalyMask:
    """Binarize and drop connected components below the area floor."""
    grid = (gray >= threshold).astype(np.uint8)
    min_area = max(1, int(round(min_area_frac * grid.size)))
    n, labels = cv2.connectedComponents(grid, connectivity=8)
    out = np.zeros_like(grid)
    for comp in range(1, n):
        member = labels == comp
        if int(member.sum()) >= min_area:
            out[member] = 1
    return AnomalyMask(out)


def synthesize_mask(type_id: str, registry: AnomalyTypeRegistry, denoiser, codec,
                    schedule, *, seed: int, guidance_scale: float = 5.0,
                    threshold: float = 0.5, min_area_frac: float = 0.001,
                    max_retries: int = 4, allow_untrained: bool = False) -> AnomalyMask:
    """Sample a new plausible mask for a type via guided diffusion."""
    e_m = registry.mask_embedding(type_id).tokens
    for attempt in range(max_retries + 1):
        sub = int(np.random.SeedSequence([int(seed), attempt]).generate_state(1, np.uint64)[0]
                  & 0x7FFFFFFFFFFFFFFF)
        gray = sample_mask_image(e_m, denoiser, codec, schedule, seed=sub,
                                 guidance_scale=guidance_scale,
                                 allow_untrained=allow_untrained)
        mask = postprocess_mask(gray, threshold, min_area_frac)
        if mask.area > 0:
            return mask
    raise MaskSynthesisError(
        f"{type_id}: {max_retries + 1} guided samples all post-processed to empty masks")


# ---------------------------------------------------------------------------
# dataset emission

MANIFEST_COLUMNS = ("index", "category", "defect", "seed", "mask-source", "checkpoint-digest")


@dataclass
class GenerationSummary:
    out_root: Path
    rows: list
    failures: int

    @property
    def ok(self) -> bool:
        return self.failures == 0


def _pair_seed(master: int, type_index: int, pair_index: int) -> int:
    state = np.random.SeedSequence([int(master), type_index, pair_index]).generate_state(
        1, np.uint64)[0]
    return int(state & 0x7FFFFFFFFFFFFFFF)


def generate_dataset(index, registry: AnomalyTypeRegistry, denoiser, codec, schedule, *,
                     type_ids, count: int, out_root, seed: int, reweight: bool = True,
                     mask_mode: str = "synthesize", guidance_scale: float = 5.0,
                     allow_untrained: bool = False, checkpoint_digest: str | None = None,
                     progress=None) -> GenerationSummary:
    """Emit `count` pairs per type under out_root plus a manifest.

    mask_mode "synthesize" draws masks from each type's mask tokens;
    "pool" draws (and geometrically augments) the type's real training
    masks. Failures are recorded in the manifest instead of aborting.
    """
    if count < 0:
        raise ContractViolation("count must be >= 0")
    if mask_mode not in ("synthesize", "pool"):
        raise ContractViolation("mask_mode must be 'synthesize' or 'pool'")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    digest = checkpoint_digest or weights_digest(denoiser, registry)

    rows = []
    failures = 0
    for ti, type_id in enumerate(sorted(type_ids)):
        registry.entry(type_id)
        category, _, defect = type_id.partition("/")
        if not defect:
            raise ContractViolation(f"type id {type_id!r} must look like 'category/defect'")
        cat_index = index.category(category)
        normals = cat_index.normal_train
        if not normals:
            raise ContractViolation(f"category {category!r} has no normal training samples")
        pool = None
        if mask_mode == "pool":
            pool = [data_mod.read_mask(s.mask_path) for s in cat_index.train_pairs(defect)]
            if not pool:
                raise ContractViolation(f"{type_id}: no training masks available for pooling")
        dest = out_root / category / defect
        for i in range(count):
            pair_seed = _pair_seed(seed, ti, i)
            rng = np.random.default_rng(pair_seed)
            y = data_mod.read_image(normals[int(rng.integers(0, len(normals)))])
            mask = None
            mask_source = "synthesized"
            if pool is not None:
                base = pool[int(rng.integers(0, len(pool)))]
                aug = data_mod.augment(render_mask_image(base), base, rng)
                mask = AnomalyMask(aug.mask)
                mask_source = "pool"
            try:
                pair = generate_anomaly(
                    GenerationRequest(y, mask, type_id, pair_seed, reweight=reweight,
                                      guidance_scale=guidance_scale),
                    registry, denoiser, codec, schedule, allow_untrained=allow_untrained)
            except MaskSynthesisError as err:
                failures += 1
                rows.append((i, category, defect, pair_seed, f"failed:{err}", digest))
                continue
            data_mod.write_image(dest / f"image_{i:05d}.png", pair.image)
            data_mod.write_mask(dest / f"mask_{i:05d}.png", pair.mask.grid)
            rows.append((i, category, defect, pair_seed, mask_source, digest))
            if progress is not None:
                progress(type_id, i)

    lines = [f"# reweight={'on' if reweight else 'off'}",
             "\t".join(MANIFEST_COLUMNS)]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    (out_root / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return GenerationSummary(out_root, rows, failures)


def read_manifest(path):
    """Manifest rows as dicts; returns (reweight_flag, rows)."""
    reweight = None
    rows = []
    header = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            if "reweight=" in line:
                reweight = line.split("reweight=")[1].strip() == "on"
            continue
        if not line:
            continue
        if header is None:
            header = line.split("\t")
            continue
        rows.append(dict(zip(header, line.split("\t"))))
    return reweight, rows


# ---------------------------------------------------------------------------
# ablation measurement

def in_mask_coverage(generated: np.ndarray, normal: np.ndarray, mask) -> float:
    """Fraction of mask pixels whose 8-bit change exceeds the out-of-mask
    99th percentile of changes (0 under the identity codec's composite)."""
    grid = AnomalyMask.from_any(mask).grid
    a = (np.clip(generated, 0, 1) * 255.0).round().astype(np.int16)
    b = (np.clip(normal, 0, 1) * 255.0).round().astype(np.int16)
    d = np.abs(a - b).max(axis=-1)
    outside = d[grid == 0]
    thr = float(np.percentile(outside, 99)) if outside.size else 0.0
    inside = d[grid == 1]
    if inside.size == 0:
        return 0.0
    return float((inside > thr).mean())
