"""Dataset plumbing: MVTec-style loading, augmentation, synthetic corpus.

Layout convention: `<category>/train/good`, `<category>/test/good`,
`<category>/test/<defect>` with masks in `<category>/ground_truth/<defect>`.
Anomalous samples are split 1/3 train (embedding learning) / 2/3 test per
defect, floor on the train side with a minimum of one; the assignment is
persisted to `splits/<category>.tsv` so reruns agree.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .diffusion import ContractViolation

cv2.setNumThreads(1)


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image IO

def read_image(path) -> np.ndarray:
    """PNG -> float32 HxWx3 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    """Mask PNG -> uint8 HxW in {0, 1}."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr > 127).astype(np.uint8)


def write_mask(path, grid: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(grid) > 0).astype(np.uint8) * 255).save(path)


def resample_mask_nearest(grid: np.ndarray, target_hw) -> np.ndarray:
    th, tw = target_hw
    if grid.shape == (th, tw):
        return grid
    return cv2.resize(grid.astype(np.uint8), (tw, th), interpolation=cv2.INTER_NEAREST)


# ---------------------------------------------------------------------------
# index

@dataclass(frozen=True)
class AnomalySample:
    image_path: Path
    mask_path: Path
    defect: str
    split: str          # "train" or "test"


@dataclass
class CategoryIndex:
    name: str
    normal_train: list
    normal_test: list
    anomalies: dict     # defect -> [AnomalySample], path-ordered

    @property
    def defects(self):
        return sorted(self.anomalies)

    def train_pairs(self, defect: str):
        return [s for s in self.anomalies[defect] if s.split == "train"]

    def test_pairs(self, defect: str):
        return [s for s in self.anomalies[defect] if s.split == "test"]


@dataclass
class DatasetIndex:
    root: Path
    categories: dict    # name -> CategoryIndex

    def category(self, name: str) -> CategoryIndex:
        if name not in self.categories:
            raise DatasetError(f"unknown category {name!r}; have {sorted(self.categories)}")
        return self.categories[name]


def _mask_path_for(root: Path, category: str, defect: str, image_path: Path) -> Path:
    gt = root / category / "ground_truth" / defect
    for candidate in (gt / f"{image_path.stem}_mask.png", gt / image_path.name):
        if candidate.exists():
            return candidate
    raise DatasetError(f"anomaly image {image_path} has no ground-truth mask under {gt}")


def _split_assignment(paths, seed: int, category: str, defect: str) -> dict:
    """Pure function of (paths, seed): 1/3 train (floor, >=1), rest test."""
    names = sorted(p.name for p in paths)
    ss = np.random.SeedSequence([seed, abs(hash_str(category)), abs(hash_str(defect))])
    order = np.random.default_rng(ss).permutation(len(names))
    n_train = max(1, len(names) // 3)
    train = {names[i] for i in order[:n_train]}
    return {n: ("train" if n in train else "test") for n in names}


def hash_str(s: str) -> int:
    """Stable small hash (python's hash() is salted per process)."""
    h = 2166136261
    for ch in s.encode("utf-8"):
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def load_dataset(root, categories=None, seed: int = 0) -> DatasetIndex:
    """Index an MVTec-style tree; splits are seeded and persisted."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    found = sorted(p.name for p in root.iterdir()
                   if p.is_dir() and p.name != "splits" and (p / "train").exists())
    if categories:
        missing = set(categories) - set(found)
        if missing:
            raise DatasetError(f"categories not found under {root}: {sorted(missing)}")
        found = [c for c in found if c in categories]
    if not found:
        raise DatasetError(f"no categories found under {root}")

    split_dir = root / "splits"
    index = {}
    for cat in found:
        normal_train = sorted((root / cat / "train" / "good").glob("*.png"))
        if not normal_train:
            raise DatasetError(f"category {cat!r} has no normal training images")
        normal_test = sorted((root / cat / "test" / "good").glob("*.png"))

        split_file = split_dir / f"{cat}.tsv"
        persisted = {}
        if split_file.exists():
            for line in split_file.read_text().splitlines():
                if not line or line.startswith("#"):
                    continue
                name, defect, split = line.split("\t")
                persisted[(defect, name)] = split

        anomalies = {}
        lines = []
        for defect_dir in sorted((root / cat / "test").iterdir()):
            defect = defect_dir.name
            if defect == "good" or not defect_dir.is_dir():
                continue
            images = sorted(defect_dir.glob("*.png"))
            if not images:
                raise DatasetError(f"defect directory {defect_dir} is empty")
            fresh = _split_assignment(images, seed, cat, defect)
            samples = []
            for img in images:
                split = persisted.get((defect, img.name), fresh[img.name])
                samples.append(AnomalySample(img, _mask_path_for(root, cat, defect, img),
                                             defect, split))
                lines.append(f"{img.name}\t{defect}\t{split}")
            anomalies[defect] = samples
        if not persisted and anomalies:
            split_dir.mkdir(exist_ok=True)
            split_file.write_text("\n".join(lines) + "\n")
        index[cat] = CategoryIndex(cat, normal_train, normal_test, anomalies)
    return DatasetIndex(root, index)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.8, 1.0)
    translate_frac: float = 0.2
    rotate_deg: float = 30.0
    max_tries: int = 20


@dataclass(frozen=True)
class TransformRecord:
    angle_deg: float
    scale: float
    translate: tuple
    accepted: bool
    tries: int


@dataclass
class AugmentedPair:
    image: np.ndarray
    mask: np.ndarray
    record: TransformRecord


def _affine_matrix(shape, angle_deg: float, scale: float, translate) -> np.ndarray:
    h, w = shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    m = cv2.getRotationMatrix2D(center, angle_deg, 1.0 / scale)
    m[0, 2] += translate[0]
    m[1, 2] += translate[1]
    return m


def apply_affine(image: np.ndarray, mask: np.ndarray, angle_deg: float, scale: float,
                 translate) -> tuple:
    """Shared geometric transform: linear for the image, nearest + re-binarize
    for the mask (hard masks stay hard)."""
    h, w = mask.shape
    m = _affine_matrix(mask.shape, angle_deg, scale, translate)
    img_out = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_REFLECT_101)
    mask_out = cv2.warpAffine(mask.astype(np.uint8), m, (w, h),
                              flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT,
                              borderValue=0)
    return img_out, (mask_out > 0).astype(np.uint8)


def _transformed_extents_inside(mask: np.ndarray, m: np.ndarray) -> bool:
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=0).astype(np.float64)
    moved = m @ pts
    h, w = mask.shape
    return bool(moved[0].min() >= 0 and moved[0].max() <= w - 1
                and moved[1].min() >= 0 and moved[1].max() <= h - 1)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    """Random crop/translate/rotate keeping the anomaly inside the frame.

    Transforms are rejection-sampled until the anomaly's extents stay inside
    the frame (bounded tries, then the identity transform).
    """
    if mask.sum() == 0:
        raise ContractViolation("augment requires a nonempty mask")
    h, w = mask.shape
    for attempt in range(1, config.max_tries + 1):
        angle = float(rng.uniform(-config.rotate_deg, config.rotate_deg))
        scale = float(rng.uniform(*config.crop_scale))
        tx = float(rng.uniform(-config.translate_frac, config.translate_frac) * w)
        ty = float(rng.uniform(-config.translate_frac, config.translate_frac) * h)
        if angle == 0.0 and scale == 1.0 and tx == 0.0 and ty == 0.0:
            return AugmentedPair(image.copy(), mask.copy(),
                                 TransformRecord(0.0, 1.0, (0.0, 0.0), True, attempt))
        m = _affine_matrix(mask.shape, angle, scale, (tx, ty))
        if not _transformed_extents_inside(mask, m):
            continue
        img_out, mask_out = apply_affine(image, mask, angle, scale, (tx, ty))
        if mask_out.sum() == 0:
            continue
        return AugmentedPair(img_out, mask_out,
                             TransformRecord(angle, scale, (tx, ty), True, attempt))
    return AugmentedPair(image.copy(), mask.copy(),
                         TransformRecord(0.0, 1.0, (0.0, 0.0), False, config.max_tries))


# ---------------------------------------------------------------------------
# synthetic corpus

TEXTURE_FAMILIES = ("stripes", "checker", "speckle")
DEFECT_KINDS = ("stain", "scratch", "patch")


@dataclass(frozen=True)
class CorpusConfig:
    resolution: int = 64
    families: tuple = ("stripes", "checker")
    defects: tuple = ("stain", "scratch")
    normal_train: int = 30
    normal_test: int = 12
    anomalies_per_defect: int = 9

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(self.families))
        object.__setattr__(self, "defects", tuple(self.defects))
        for f in self.families:
            if f not in TEXTURE_FAMILIES:
                raise ContractViolation(f"unknown texture family {f!r}; have {TEXTURE_FAMILIES}")
        for d in self.defects:
            if d not in DEFECT_KINDS:
                raise ContractViolation(f"unknown defect kind {d!r}; have {DEFECT_KINDS}")


_FAMILY_TINT = {
    "stripes": np.array([1.00, 0.92, 0.80], dtype=np.float32),
    "checker": np.array([0.82, 0.95, 1.00], dtype=np.float32),
    "speckle": np.array([0.88, 1.00, 0.88], dtype=np.float32),
}


def render_texture(family: str, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """One normal sample of a texture family, float32 HxWx3 in [0.1, 0.9]."""
    n = resolution
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float32)
    if family == "stripes":
        angle = rng.uniform(0.5, 1.1)
        freq = rng.uniform(0.55, 0.75)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        base = 0.5 + 0.22 * wave
    elif family == "checker":
        cell = rng.integers(6, 9)
        ox, oy = rng.integers(0, cell, size=2)
        grid = (((xx + ox) // cell + (yy + oy) // cell) % 2).astype(np.float32)
        base = 0.32 + 0.36 * grid
    elif family == "speckle":
        noise = rng.standard_normal((n, n)).astype(np.float32)
        blurred = cv2.GaussianBlur(noise, (0, 0), sigmaX=rng.uniform(1.4, 2.2))
        lo, hi = blurred.min(), blurred.max()
        base = 0.25 + 0.5 * (blurred - lo) / max(hi - lo, 1e-6)
    else:
        raise ContractViolation(f"unknown texture family {family!r}")
    base = base + rng.normal(0.0, 0.015, size=base.shape).astype(np.float32)
    img = base[..., None] * _FAMILY_TINT[family][None, None, :]
    return np.clip(img, 0.1, 0.9).astype(np.float32)


def _interior_point(rng, n, margin):
    return int(rng.integers(margin, n - margin)), int(rng.integers(margin, n - margin))


def render_defect(kind: str, image: np.ndarray, rng: np.random.Generator) -> tuple:
    """Apply one defect; returns (image, mask) where mask == changed pixels.

    Every in-mask pixel is forced to differ from the original after 8-bit
    quantization, so IoU(mask, changed-pixels) is exactly 1.
    """
    n = image.shape[0]
    mask = np.zeros((n, n), dtype=np.uint8)
    out = image.copy()
    if kind == "stain":
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = _interior_point(rng, n, n // 6)
            ax = int(rng.integers(n // 12, n // 5))
            ay = int(rng.integers(n // 12, n // 5))
            ang = float(rng.uniform(0, 180))
            cv2.ellipse(mask, (cx, cy), (ax, ay), ang, 0, 360, 1, thickness=-1)
        color = np.array([rng.uniform(0.05, 0.22), rng.uniform(0.02, 0.12),
                          rng.uniform(0.02, 0.10)], dtype=np.float32)
        blend = rng.uniform(0.65, 0.85)
        out[mask > 0] = (1 - blend) * out[mask > 0] + blend * color
    elif kind == "scratch":
        pts = []
        x, y = _interior_point(rng, n, n // 8)
        pts.append((x, y))
        for _ in range(int(rng.integers(2, 5))):
            x = int(np.clip(x + rng.integers(-n // 3, n // 3 + 1), n // 10, n - n // 10))
            y = int(np.clip(y + rng.integers(-n // 3, n // 3 + 1), n // 10, n - n // 10))
            pts.append((x, y))
        cv2.polylines(mask, [np.array(pts, dtype=np.int32)], False, 1,
                      thickness=int(rng.integers(1, 3)))
        shade = rng.choice([0.04, 0.96])
        out[mask > 0] = shade
    elif kind == "patch":
        cx, cy = _interior_point(rng, n, n // 5)
        hw = int(rng.integers(n // 10, n // 5))
        hh = int(rng.integers(n // 10, n // 5))
        mask[max(cy - hh, 0):cy + hh, max(cx - hw, 0):cx + hw] = 1
        fill = rng.uniform(0.0, 0.06)
        out[mask > 0] = fill + rng.normal(0, 0.01, size=(int(mask.sum()), 1)).astype(np.float32)
    else:
        raise ContractViolation(f"unknown defect kind {kind!r}")
    out = np.clip(out, 0.0, 1.0)

    # force a quantized difference on every masked pixel
    q_in = (image * 255.0).round()
    q_out = (out * 255.0).round()
    same = (np.abs(q_out - q_in).sum(axis=-1) == 0) & (mask > 0)
    if same.any():
        ch0 = q_out[..., 0]
        bump = np.where(ch0 >= 250, ch0 - 3, ch0 + 3)
        q_out[..., 0] = np.where(same, bump, ch0)
        out = (q_out / 255.0).astype(np.float32)
    return out.astype(np.float32), mask


def make_synthetic_corpus(config: CorpusConfig, out_root, seed: int,
                          overwrite: bool = False) -> Path:
    """Write a reproducible MVTec-style corpus of textures with exact masks."""
    out_root = Path(out_root)
    if out_root.exists() and any(out_root.iterdir()):
        if not overwrite:
            raise DatasetError(f"{out_root} exists and is not empty (pass overwrite to replace)")
    for ci, family in enumerate(config.families):
        cat = out_root / family
        for si, (sub, count) in enumerate([("train/good", config.normal_train),
                                           ("test/good", config.normal_test)]):
            for i in range(count):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, ci, si, i]))
                write_image(cat / sub / f"{i:03d}.png", render_texture(family, config.resolution, rng))
        for di, defect in enumerate(config.defects):
            for i in range(config.anomalies_per_defect):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, ci, 100 + di, i]))
                normal = render_texture(family, config.resolution, rng)
                img, mask = render_defect(defect, normal, rng)
                write_image(cat / "test" / defect / f"{i:03d}.png", img)
                write_mask(cat / "ground_truth" / defect / f"{i:03d}_mask.png", mask)
    return out_root


def tree_digest(root) -> str:
    """sha256 over every file under root (sorted relative paths + bytes)."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        h.update(rel.encode("utf-8"))
        h.update(b"\x00")
        h.update(path.read_bytes())
    return h.hexdigest()
