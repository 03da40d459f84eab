"""Downstream harnesses: localization, classification, and reporting.

The localizer is a small U-Net trained on (image -> mask) supervision from
generated pairs plus normal samples with all-zero targets. The classifier
doubles as the pluggable embedding behind the distribution metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import arrays_digest, config_digest, module_arrays
from .diffusion import ContractViolation, _norm_groups, seeded_init_
from . import metrics as metrics_mod
from .metrics import UndefinedMetricError


class InspectionError(ValueError):
    pass


@dataclass
class ScoreMap:
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise InspectionError("score map must be 2-d")
        if not np.isfinite(self.scores).all():
            raise InspectionError("score map must be finite")

    @property
    def image_score(self) -> float:
        """Average pooling over the map."""
        return float(self.scores.mean())


# ---------------------------------------------------------------------------
# localizer

@dataclass(frozen=True)
class LocalizerConfig:
    resolution: int = 64
    in_channels: int = 3
    widths: tuple = (16, 32, 64)
    groups: int = 8

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractViolation("localizer needs at least two widths")

    def digest(self) -> str:
        return config_digest(self)


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out, groups):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.GroupNorm(_norm_groups(groups, c_out), c_out), nn.SiLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.GroupNorm(_norm_groups(groups, c_out), c_out), nn.SiLU())

    def forward(self, x):
        return self.block(x)


class Localizer(nn.Module):
    """U-Net segmenter emitting per-pixel anomaly logits."""

    def __init__(self, config: LocalizerConfig = LocalizerConfig(),
                 init_seed: int | None = None):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = _DoubleConv(config.in_channels, w[0], config.groups)
        self.downs = nn.ModuleList()
        self.enc = nn.ModuleList()
        for i in range(1, len(w)):
            self.downs.append(nn.Conv2d(w[i - 1], w[i], 3, stride=2, padding=1))
            self.enc.append(_DoubleConv(w[i], w[i], config.groups))
        self.ups = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(len(w) - 1, 0, -1):
            self.ups.append(nn.Conv2d(w[i], w[i - 1], 3, padding=1))
            self.dec.append(_DoubleConv(2 * w[i - 1], w[i - 1], config.groups))
        self.head = nn.Conv2d(w[0], 1, 1)
        self.trained = False
        if init_seed is not None:
            seeded_init_(self, init_seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractViolation("expected [B, C, H, W] input")
        h = self.stem(x)
        skips = [h]
        for down, enc in zip(self.downs, self.enc):
            h = enc(down(h))
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.ups, self.dec):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = dec(torch.cat([h, skips.pop()], dim=1))
        return self.head(h)

    def score_map(self, image: np.ndarray) -> ScoreMap:
        x = torch.from_numpy(np.ascontiguousarray(
            np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))[None]
        with torch.no_grad():
            probs = torch.sigmoid(self.forward(x))
        return ScoreMap(probs[0, 0].numpy().astype(np.float64))


@dataclass(frozen=True)
class LocalizerTrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    loss: str = "bce"
    focal_gamma: float = 2.0
    log_every: int = 0

    def __post_init__(self):
        if self.loss not in ("bce", "focal"):
            raise ContractViolation("loss must be 'bce' or 'focal'")


def _pixel_loss(logits, target, config: LocalizerTrainConfig):
    if config.loss == "bce":
        return F.binary_cross_entropy_with_logits(logits, target)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * target + (1.0 - p) * (1.0 - target)
    return ((1.0 - p_t) ** config.focal_gamma * bce).mean()


def train_localizer(pairs, normals, *, config: LocalizerConfig = LocalizerConfig(),
                    train: LocalizerTrainConfig = LocalizerTrainConfig(),
                    seed: int = 0):
    """Fit the segmenter on generated pairs plus zero-mask normal samples."""
    images = []
    targets = []
    for image, mask in pairs:
        images.append(np.asarray(image, dtype=np.float32))
        targets.append((np.asarray(mask) > 0).astype(np.float32))
    for image in normals:
        images.append(np.asarray(image, dtype=np.float32))
        targets.append(np.zeros(images[-1].shape[:2], dtype=np.float32))
    if not images:
        raise InspectionError("empty training set")

    x_all = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).copy())
    t_all = torch.from_numpy(np.stack(targets))[:, None]
    model = Localizer(config, init_seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(train.steps):
        idx = torch.from_numpy(rng.integers(0, x_all.shape[0],
                                            size=train.batch_size))
        logits = model(x_all[idx])
        loss = _pixel_loss(logits, t_all[idx], train)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if train.log_every and (step + 1) % train.log_every == 0:
            print(f"localizer step {step + 1}/{train.steps} loss {losses[-1]:.4f}")
    model.trained = True
    model.eval()
    return model, losses


def localizer_digest(model: Localizer) -> str:
    return arrays_digest(module_arrays(model))


# ---------------------------------------------------------------------------
# classifier (also the embedding behind IS / IC-LPIPS at desk scale)

@dataclass(frozen=True)
class ClassifierConfig:
    resolution: int = 64
    in_channels: int = 3
    widths: tuple = (12, 24, 48)
    feature_dim: int = 64

    def digest(self) -> str:
        return config_digest(self)


class SmallClassifier(nn.Module):
    def __init__(self, n_classes: int, config: ClassifierConfig = ClassifierConfig(),
                 init_seed: int | None = None):
        super().__init__()
        if n_classes < 2:
            raise ContractViolation("classifier needs at least 2 classes")
        self.config = config
        self.n_classes = n_classes
        layers = []
        c_prev = config.in_channels
        for c in config.widths:
            layers += [nn.Conv2d(c_prev, c, 3, padding=1), nn.SiLU(),
                       nn.AvgPool2d(2)]
            c_prev = c
        self.body = nn.Sequential(*layers)
        self.to_feature = nn.Linear(c_prev, config.feature_dim)
        self.head = nn.Linear(config.feature_dim, n_classes)
        if init_seed is not None:
            seeded_init_(self, init_seed)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(x).mean(dim=(2, 3))
        return F.silu(self.to_feature(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class ClassifierTrainConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    log_every: int = 0


def _image_batch(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


class TrainedClassifier:
    """Posterior + feature interfaces over a fitted SmallClassifier.

    Inference runs one image at a time: identical inputs then map to
    bit-identical outputs regardless of batch composition, which the
    distribution metrics rely on.
    """

    def __init__(self, model: SmallClassifier, classes):
        self.model = model
        self.classes = list(classes)

    def _forward(self, images):
        with torch.no_grad():
            return torch.cat([self.model(_image_batch([im])) for im in images])

    def posteriors(self, images) -> np.ndarray:
        return torch.softmax(self._forward(images), dim=1).numpy().astype(np.float64)

    def __call__(self, images) -> np.ndarray:
        return self.posteriors(images)

    def embed(self, images) -> np.ndarray:
        with torch.no_grad():
            feats = [self.model.features(_image_batch([im])) for im in images]
        return torch.cat(feats).numpy().astype(np.float64)

    def predict(self, images) -> list:
        idx = self._forward(images).argmax(dim=1).tolist()
        return [self.classes[i] for i in idx]

    def accuracy(self, images, labels) -> float:
        pred = self.predict(images)
        return float(np.mean([p == l for p, l in zip(pred, labels)]))


def train_texture_classifier(examples, classes, *,
                             config: ClassifierConfig = ClassifierConfig(),
                             train: ClassifierTrainConfig = ClassifierTrainConfig(),
                             seed: int = 0) -> TrainedClassifier:
    """Fit the small CNN on (image, class-name) examples."""
    classes = sorted(classes)
    if len(classes) < 2:
        raise InspectionError("need at least 2 classes")
    if not examples:
        raise InspectionError("empty training set")
    index = {c: i for i, c in enumerate(classes)}
    x_all = _image_batch([im for im, _ in examples])
    y_all = torch.tensor([index[label] for _, label in examples])
    model = SmallClassifier(len(classes), config, init_seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=train.lr)
    rng = np.random.default_rng(seed)
    for step in range(train.steps):
        idx = torch.from_numpy(rng.integers(0, x_all.shape[0],
                                            size=train.batch_size))
        loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if train.log_every and (step + 1) % train.log_every == 0:
            print(f"classifier step {step + 1}/{train.steps} "
                  f"loss {float(loss.detach()):.4f}")
    model.eval()
    return TrainedClassifier(model, classes)


def train_defect_classifier(train_by_type: dict, test_by_type: dict, *,
                            config: ClassifierConfig = ClassifierConfig(),
                            train: ClassifierTrainConfig = ClassifierTrainConfig(),
                            seed: int = 0):
    """Fit on generated per-type sets, score on held-out real anomalies."""
    if len(train_by_type) < 2:
        raise InspectionError("classification needs at least 2 anomaly types")
    examples = [(im, tid) for tid, ims in sorted(train_by_type.items())
                for im in ims]
    clf = train_texture_classifier(examples, sorted(train_by_type), config=config,
                                   train=train, seed=seed)
    held_out = [(im, tid) for tid, ims in sorted(test_by_type.items())
                for im in ims]
    if not held_out:
        raise InspectionError("empty held-out set")
    accuracy = clf.accuracy([im for im, _ in held_out],
                            [tid for _, tid in held_out])
    return clf, accuracy


# ---------------------------------------------------------------------------
# evaluation + reporting

def smooth_scores(scores: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur of a score map; the usual post-processing before
    pixel-level metrics. sigma <= 0 returns the input unchanged."""
    if sigma <= 0:
        return scores
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(np.asarray(scores, dtype=np.float64), sigma,
                           mode="reflect")


def evaluate_localizer(localizer: Localizer, samples, *,
                       smooth_sigma: float = 0.0) -> dict:
    """Pixel- and image-level metrics over (image, mask-or-None) samples.

    Score maps are Gaussian-smoothed with smooth_sigma first (0 disables);
    the image score is the smoothed map's mean. Metrics whose preconditions
    fail on this split are reported as None.
    """
    if not samples:
        raise InspectionError("no evaluation samples")
    maps = []
    masks = []
    image_scores = []
    image_labels = []
    for image, mask in samples:
        sm = localizer.score_map(image)
        scores = smooth_scores(sm.scores, smooth_sigma)
        grid = (np.zeros(scores.shape, dtype=np.uint8) if mask is None
                else (np.asarray(mask) > 0).astype(np.uint8))
        if grid.shape != scores.shape:
            raise InspectionError("mask and score map shapes differ")
        maps.append(scores)
        masks.append(grid)
        image_scores.append(float(scores.mean()))
        image_labels.append(int(grid.any()))

    flat_scores = np.concatenate([m.ravel() for m in maps])
    flat_labels = np.concatenate([m.ravel() for m in masks])
    row = {}

    def attempt(key, fn, *args):
        try:
            row[key] = float(fn(*args))
        except UndefinedMetricError:
            row[key] = None

    attempt("pixel-auroc", metrics_mod.auroc, flat_scores, flat_labels)
    attempt("pixel-ap", metrics_mod.average_precision, flat_scores, flat_labels)
    attempt("pixel-f1max", metrics_mod.f1_max, flat_scores, flat_labels)
    attempt("pixel-pro", metrics_mod.pro, np.stack(maps), np.stack(masks))
    attempt("image-auroc", metrics_mod.auroc, image_scores, image_labels)
    attempt("image-ap", metrics_mod.average_precision, image_scores, image_labels)
    attempt("image-f1max", metrics_mod.f1_max, image_scores, image_labels)
    return row


REPORT_COLUMNS = ("pixel-auroc", "pixel-ap", "pixel-f1max", "pixel-pro",
                  "image-auroc", "image-ap", "image-f1max", "is", "ic-lpips",
                  "accuracy")


@dataclass
class MetricReport:
    rows: dict = field(default_factory=dict)    # category -> column -> value

    def add(self, category: str, values: dict) -> None:
        unknown = set(values) - set(REPORT_COLUMNS)
        if unknown:
            raise InspectionError(f"unknown report columns: {sorted(unknown)}")
        self.rows[category] = {c: values.get(c) for c in REPORT_COLUMNS}

    def average(self) -> dict:
        """Unweighted mean per column over categories where it is defined."""
        out = {}
        for col in REPORT_COLUMNS:
            vals = [row[col] for row in self.rows.values()
                    if row.get(col) is not None]
            out[col] = float(np.mean(vals)) if vals else None
        return out

    def _line(self, name, row):
        cells = [name]
        for col in REPORT_COLUMNS:
            v = row.get(col)
            cells.append("-" if v is None else f"{v:.6f}")
        return "\t".join(cells)

    def to_tsv(self) -> str:
        lines = ["\t".join(("category",) + REPORT_COLUMNS)]
        for cat in sorted(self.rows):
            lines.append(self._line(cat, self.rows[cat]))
        lines.append(self._line("Average", self.average()))
        return "\n".join(lines) + "\n"

    def save(self, tsv_path, json_path=None) -> None:
        Path(tsv_path).parent.mkdir(parents=True, exist_ok=True)
        Path(tsv_path).write_text(self.to_tsv(), encoding="utf-8")
        if json_path is not None:
            payload = {"rows": self.rows, "average": self.average(),
                       "columns": list(REPORT_COLUMNS)}
            Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True),
                                       encoding="utf-8")

    @classmethod
    def load(cls, json_path) -> "MetricReport":
        payload = json.loads(Path(json_path).read_text(encoding="utf-8"))
        report = cls()
        for cat, row in payload["rows"].items():
            report.add(cat, {k: v for k, v in row.items() if v is not None})
        return report


# ---------------------------------------------------------------------------
# plots

def save_pr_curve(scores, labels, path, title: str = "precision-recall") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    recall, precision = metrics_mod.pr_curve(scores, labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.step(np.concatenate([[0.0], recall]),
            np.concatenate([[1.0], precision]), where="post")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_score_histogram(scores, labels, path, title: str = "score distribution",
                         bins: int = 40) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(s[l == 0], bins=bins, alpha=0.6, label="normal", density=True)
    if (l == 1).any():
        ax.hist(s[l == 1], bins=bins, alpha=0.6, label="anomalous", density=True)
    ax.set_xlabel("score")
    ax.legend()
    ax.set_title(title)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
