"""Run configuration: flat key=value text with scale presets.

Each key has a desk default and a full default. The full column records the
reference protocol (token counts k=8 / n=4 / k'=4, batch 4, lr 0.005,
300k/30k optimization steps, guidance 5, 1000 pairs per type, 1000 noise
steps); desk values are the reduced protocol this package runs end to end
on a CPU. Overrides apply after the preset expands, unknown keys are
rejected.
"""

from __future__ import annotations

from pathlib import Path

from .checkpoint import config_digest


class ConfigError(ValueError):
    pass


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _str(s):
    return s.strip()


def _ints(s):
    parts = [p for p in (x.strip() for x in s.split(",")) if p]
    return tuple(int(p) for p in parts)


def _strs(s):
    return tuple(p for p in (x.strip() for x in s.split(",")) if p)


PRESETS = ("desk", "full")

# key -> (parser, desk default, full default)
KEYS = {
    "dataset_root": (_str, "corpus", "data/mvtec"),
    "output_root": (_str, "out", "runs/full"),
    "categories": (_strs, (), ()),
    "defects": (_strs, (), ()),
    "seed": (_int, 0, 0),
    "resume": (_bool, False, False),
    "log_every": (_int, 0, 0),

    "corpus.resolution": (_int, 64, 256),
    "corpus.families": (_strs, ("stripes", "checker"),
                        ("stripes", "checker", "speckle")),
    "corpus.defects": (_strs, ("stain", "scratch"),
                       ("stain", "scratch", "patch")),
    "corpus.normal_train": (_int, 30, 200),
    "corpus.normal_test": (_int, 12, 50),
    "corpus.anomalies_per_defect": (_int, 9, 30),
    "corpus.overwrite": (_bool, False, False),

    "model.resolution": (_int, 64, 64),
    "model.widths": (_ints, (16, 32, 48), (64, 128, 256)),
    "model.attn_levels": (_ints, (1, 2), (1, 2)),
    "model.token_dim": (_int, 64, 256),
    "model.attn_dim": (_int, 64, 256),
    "model.time_dim": (_int, 64, 256),
    "model.pos_channels": (_int, 16, 32),
    "model.groups": (_int, 8, 16),
    "schedule.steps": (_int, 200, 1000),
    "codec": (_str, "identity", "identity"),

    "backbone.steps": (_int, 4000, 0),
    "backbone.batch_size": (_int, 8, 16),
    "backbone.lr": (_float, 2e-3, 1e-4),
    "backbone.condition_dropout": (_float, 0.1, 0.1),
    "backbone.mask_image_fraction": (_float, 0.25, 0.25),
    "backbone.hint_tokens": (_int, 4, 4),
    "backbone.hint_seed": (_int, 0, 0),

    "embed.steps": (_int, 1200, 300000),
    "embed.batch_size": (_int, 4, 4),
    "embed.lr": (_float, 5e-3, 5e-3),
    "embed.k_tokens": (_int, 8, 8),
    "embed.n_tokens": (_int, 4, 4),
    "embed.init_sigma": (_float, 0.02, 0.02),
    "encoder.stages": (_ints, (8, 16, 32, 64), (64, 128, 256, 512)),
    "encoder.fpn_width": (_int, 32, 256),

    "mask.steps": (_int, 800, 30000),
    "mask.batch_size": (_int, 4, 4),
    "mask.lr": (_float, 5e-3, 5e-3),
    "mask.k_tokens": (_int, 4, 4),
    "mask.init_sigma": (_float, 0.02, 0.02),

    "generate.count": (_int, 50, 1000),
    "generate.reweight": (_bool, True, True),
    "generate.guidance_scale": (_float, 5.0, 5.0),
    "generate.mask_mode": (_str, "synthesize", "synthesize"),

    "eval.localizer_steps": (_int, 400, 20000),
    "eval.localizer_batch": (_int, 8, 16),
    "eval.localizer_lr": (_float, 1e-3, 1e-3),
    "eval.localizer_loss": (_str, "bce", "bce"),
    "eval.localizer_widths": (_ints, (16, 32, 64), (32, 64, 128, 256)),
    "eval.classifier_steps": (_int, 400, 10000),
    "eval.classifier_batch": (_int, 16, 32),
    "eval.classifier_lr": (_float, 2e-3, 1e-3),
    "eval.smooth_sigma": (_float, 2.0, 4.0),
    "eval.is_splits": (_int, 2, 10),
    "eval.plots": (_bool, True, True),
}


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; # starts a comment; later duplicates rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


class RunConfig:
    """Typed view over preset defaults plus file and command-line overrides."""

    def __init__(self, preset: str, values: dict):
        self.preset = preset
        self._values = values

    def __getitem__(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def items(self):
        return sorted(self._values.items())

    def digest(self) -> str:
        return config_digest({"preset": self.preset,
                              **{k: list(v) if isinstance(v, tuple) else v
                                 for k, v in self._values.items()}})

    @classmethod
    def from_text(cls, text: str = "", overrides=()) -> "RunConfig":
        raw = parse_config_text(text)
        for item in overrides:
            key, _, value = item.partition("=")
            if not _:
                raise ConfigError(f"override must look like key=value: {item!r}")
            raw[key.strip()] = value.strip()
        preset = raw.pop("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        column = 1 if preset == "desk" else 2
        values = {}
        for key, spec in KEYS.items():
            parser = spec[0]
            if key in raw:
                try:
                    values[key] = parser(raw[key])
                except ConfigError:
                    raise
                except ValueError as err:
                    raise ConfigError(f"bad value for {key!r}: {err}") from err
            else:
                values[key] = spec[column]
        return cls(preset, values)

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_text(text, overrides)

    # ------------------------------------------------------------------
    # builders for the library dataclasses

    def image_resolution(self) -> int:
        return self["model.resolution"] * self.codec().scale_factor

    def codec(self):
        from .diffusion import HaarCodec, IdentityCodec
        name = self["codec"]
        if name == "identity":
            return IdentityCodec()
        if name == "haar":
            return HaarCodec()
        raise ConfigError(f"codec must be identity or haar, got {name!r}")

    def schedule(self):
        from .diffusion import NoiseSchedule
        return NoiseSchedule.linear(self["schedule.steps"])

    def denoiser_config(self):
        from .diffusion import DenoiserConfig
        in_channels = 3 * self.codec().scale_factor ** 2
        return DenoiserConfig(
            resolution=self["model.resolution"], in_channels=in_channels,
            widths=self["model.widths"], attn_levels=self["model.attn_levels"],
            token_dim=self["model.token_dim"], attn_dim=self["model.attn_dim"],
            time_dim=self["model.time_dim"],
            pos_channels=self["model.pos_channels"], groups=self["model.groups"])

    def corpus_config(self):
        from .data import CorpusConfig
        return CorpusConfig(
            resolution=self["corpus.resolution"],
            families=self["corpus.families"], defects=self["corpus.defects"],
            normal_train=self["corpus.normal_train"],
            normal_test=self["corpus.normal_test"],
            anomalies_per_defect=self["corpus.anomalies_per_defect"])

    def backbone_train_config(self):
        from .backbone import BackboneTrainConfig
        return BackboneTrainConfig(
            steps=self["backbone.steps"], batch_size=self["backbone.batch_size"],
            lr=self["backbone.lr"],
            condition_dropout=self["backbone.condition_dropout"],
            mask_image_fraction=self["backbone.mask_image_fraction"],
            hint_tokens=self["backbone.hint_tokens"],
            hint_seed=self["backbone.hint_seed"],
            log_every=self["log_every"])

    def embed_train_config(self):
        from .embeddings import EmbeddingTrainConfig
        return EmbeddingTrainConfig(
            steps=self["embed.steps"], batch_size=self["embed.batch_size"],
            lr=self["embed.lr"], k_tokens=self["embed.k_tokens"],
            n_tokens=self["embed.n_tokens"], init_sigma=self["embed.init_sigma"],
            log_every=self["log_every"])

    def encoder_config(self):
        from .embeddings import SpatialEncoderConfig
        return SpatialEncoderConfig(
            resolution=self.image_resolution(), stages=self["encoder.stages"],
            fpn_width=self["encoder.fpn_width"], n_tokens=self["embed.n_tokens"],
            token_dim=self["model.token_dim"])

    def mask_train_config(self):
        from .embeddings import MaskTrainConfig
        return MaskTrainConfig(
            steps=self["mask.steps"], batch_size=self["mask.batch_size"],
            lr=self["mask.lr"], k_tokens=self["mask.k_tokens"],
            init_sigma=self["mask.init_sigma"], log_every=self["log_every"])

    def localizer_config(self):
        from .inspection import LocalizerConfig
        return LocalizerConfig(resolution=self.image_resolution(),
                               widths=self["eval.localizer_widths"])

    def localizer_train_config(self):
        from .inspection import LocalizerTrainConfig
        return LocalizerTrainConfig(
            steps=self["eval.localizer_steps"],
            batch_size=self["eval.localizer_batch"],
            lr=self["eval.localizer_lr"], loss=self["eval.localizer_loss"],
            log_every=self["log_every"])

    def classifier_train_config(self):
        from .inspection import ClassifierTrainConfig
        return ClassifierTrainConfig(
            steps=self["eval.classifier_steps"],
            batch_size=self["eval.classifier_batch"],
            lr=self["eval.classifier_lr"], log_every=self["log_every"])
