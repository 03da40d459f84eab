"""Command-line workflows: corpus synthesis, training, generation, evaluation.

Every run is driven by one flat key=value config (see config.py) plus
repeatable --set overrides. Outputs land under output_root:

    checkpoints/backbone.ckpt   denoiser + class conditioner
    checkpoints/registry.ckpt   per-type embeddings + mask encoder
    curves/*.tsv                loss curves (step, loss)
    generated/                  image/mask pairs + manifest.tsv
    report/                     metric table, json, plots

Exit status is 0 only when the run recorded zero failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import backbone as backbone_mod
from . import data as data_mod
from . import generation as gen_mod
from . import inspection as insp_mod
from . import metrics as metrics_mod
from .checkpoint import CheckpointError, file_digest
from .config import ConfigError, RunConfig
from .diffusion import ContractViolation
from .embeddings import AnomalyTypeRegistry, train_mask_embedding, \
    train_spatial_anomaly_embeddings
from .inspection import InspectionError


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _write_curve(path: Path, losses, start_step: int = 1) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step\tloss"]
    lines += [f"{start_step + i}\t{loss:.6f}" for i, loss in enumerate(losses)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _append_curve(path: Path, losses, start_step: int) -> None:
    if not path.exists():
        _write_curve(path, losses, start_step)
        return
    with open(path, "a", encoding="utf-8") as f:
        for i, loss in enumerate(losses):
            f.write(f"{start_step + i}\t{loss:.6f}\n")


def _paths(cfg: RunConfig) -> dict:
    out = Path(cfg["output_root"])
    return {"out": out,
            "backbone": out / "checkpoints" / "backbone.ckpt",
            "registry": out / "checkpoints" / "registry.ckpt",
            "curves": out / "curves",
            "generated": out / "generated",
            "report": out / "report"}


def _load_index(cfg: RunConfig) -> data_mod.DatasetIndex:
    cats = cfg["categories"] or None
    return data_mod.load_dataset(cfg["dataset_root"], categories=cats,
                                 seed=cfg["seed"])


def _check_resolution(index: data_mod.DatasetIndex, cfg: RunConfig) -> None:
    expect = cfg.image_resolution()
    cat = index.categories[sorted(index.categories)[0]]
    shape = data_mod.read_image(cat.normal_train[0]).shape
    if shape[0] != expect or shape[1] != expect:
        raise ContractViolation(
            f"dataset images are {shape[1]}x{shape[0]} but the model expects "
            f"{expect}x{expect} (model.resolution x codec scale)")


def _train_pairs_by_type(index: data_mod.DatasetIndex, cfg: RunConfig) -> dict:
    """type id -> [(image, mask)] from the anomaly train split."""
    wanted = set(cfg["defects"])
    pairs = {}
    for cat_name in sorted(index.categories):
        cat = index.categories[cat_name]
        for defect in cat.defects:
            if wanted and defect not in wanted:
                continue
            samples = cat.train_pairs(defect)
            if samples:
                pairs[f"{cat_name}/{defect}"] = [
                    (data_mod.read_image(s.image_path),
                     data_mod.read_mask(s.mask_path)) for s in samples]
    if not pairs:
        raise ContractViolation("no anomaly training pairs matched the filters")
    return pairs


def _load_or_train_backbone(cfg: RunConfig, index, paths):
    """Returns (denoiser, trained-this-run flag)."""
    want = cfg.denoiser_config()
    if paths["backbone"].exists():
        denoiser, _ = backbone_mod.load_backbone(paths["backbone"])
        if denoiser.config != want:
            raise ContractViolation(
                f"{paths['backbone']} was trained with a different architecture; "
                "delete it or adjust the model.* keys")
        print(f"backbone: loaded {paths['backbone']}")
        return denoiser, False
    train = cfg.backbone_train_config()
    if train.steps < 1:
        raise ContractViolation(
            f"no backbone checkpoint at {paths['backbone']} and backbone.steps "
            "is 0; train one first or point output_root at an existing run")
    print(f"backbone: training {train.steps} steps")
    denoiser, conditioner, losses = backbone_mod.train_backbone(
        index, denoiser_config=want, schedule=cfg.schedule(), codec=cfg.codec(),
        train=train, seed=cfg["seed"])
    paths["backbone"].parent.mkdir(parents=True, exist_ok=True)
    backbone_mod.save_backbone(paths["backbone"], denoiser, conditioner)
    _write_curve(paths["curves"] / "backbone.tsv", losses)
    print(f"backbone: saved {paths['backbone']}")
    return denoiser, True


def _mask_stage(registry, pairs_by_type, denoiser, cfg: RunConfig, paths) -> None:
    mask_cfg = cfg.mask_train_config()
    schedule = cfg.schedule()
    codec = cfg.codec()
    done = registry.counters.setdefault("mask_steps", {})
    for tid in sorted(pairs_by_type):
        prior = int(done.get(tid, 0))
        seed = cfg["seed"] + data_mod.hash_str(tid) % 100003 + prior
        masks = [mask for _, mask in pairs_by_type[tid]]
        e_m, losses = train_mask_embedding(masks, denoiser, codec, schedule,
                                           config=mask_cfg, seed=seed)
        registry.entries[tid].mask_tokens = e_m
        done[tid] = prior + mask_cfg.steps
        _append_curve(paths["curves"] / f"mask_{tid.replace('/', '_')}.tsv",
                      losses, prior + 1)
        print(f"mask tokens: {tid} ({mask_cfg.steps} steps, total {done[tid]})")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(cfg: RunConfig) -> int:
    corpus = cfg.corpus_config()
    root = data_mod.make_synthetic_corpus(corpus, cfg["dataset_root"],
                                          cfg["seed"],
                                          overwrite=cfg["corpus.overwrite"])
    per_cat = (corpus.normal_train + corpus.normal_test +
               corpus.anomalies_per_defect * len(corpus.defects))
    print(f"corpus: {root}")
    print(f"categories: {', '.join(corpus.families)}")
    print(f"defects: {', '.join(corpus.defects)}")
    print(f"images per category: {per_cat} at {corpus.resolution}x{corpus.resolution}")
    print(f"digest: {data_mod.tree_digest(root)}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    index = _load_index(cfg)
    _check_resolution(index, cfg)
    denoiser, _ = _load_or_train_backbone(cfg, index, paths)
    pairs_by_type = _train_pairs_by_type(index, cfg)

    registry = None
    prior = 0
    if cfg["resume"] and paths["registry"].exists():
        registry = AnomalyTypeRegistry.load(paths["registry"])
        prior = int(registry.counters.get("embed_steps", 0))
        print(f"registry: resuming from {paths['registry']} "
              f"({prior} embedding steps so far)")
    embed_cfg = cfg.embed_train_config()
    registry, losses = train_spatial_anomaly_embeddings(
        pairs_by_type, denoiser, cfg.codec(), cfg.schedule(),
        config=embed_cfg, seed=cfg["seed"] + prior, registry=registry,
        encoder_config=cfg.encoder_config())
    _append_curve(paths["curves"] / "embed.tsv", losses, prior + 1)
    print(f"embeddings: {len(pairs_by_type)} types, {embed_cfg.steps} steps "
          f"(total {registry.counters['embed_steps']})")

    _mask_stage(registry, pairs_by_type, denoiser, cfg, paths)
    paths["registry"].parent.mkdir(parents=True, exist_ok=True)
    registry.save(paths["registry"])
    print(f"registry: saved {paths['registry']}")
    return 0


def cmd_train_mask(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    if not paths["registry"].exists():
        return _fail(f"no registry checkpoint at {paths['registry']}; "
                     "run the train command first")
    index = _load_index(cfg)
    _check_resolution(index, cfg)
    denoiser, _ = _load_or_train_backbone(cfg, index, paths)
    registry = AnomalyTypeRegistry.load(paths["registry"])
    pairs_by_type = _train_pairs_by_type(index, cfg)
    unknown = sorted(set(pairs_by_type) - set(registry.entries))
    if unknown:
        return _fail(f"types without trained anomaly tokens: {unknown}; "
                     "run the train command for them first")
    _mask_stage(registry, pairs_by_type, denoiser, cfg, paths)
    registry.save(paths["registry"])
    print(f"registry: saved {paths['registry']}")
    return 0


def cmd_generate(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    for key in ("backbone", "registry"):
        if not paths[key].exists():
            return _fail(f"missing checkpoint {paths[key]}; "
                         "run the train command first")
    denoiser, _ = backbone_mod.load_backbone(paths["backbone"])
    registry = AnomalyTypeRegistry.load(paths["registry"])
    index = _load_index(cfg)

    cats = set(cfg["categories"])
    defects = set(cfg["defects"])
    type_ids = []
    for tid in registry.type_ids():
        category, _, defect = tid.partition("/")
        if cats and category not in cats:
            continue
        if defects and defect not in defects:
            continue
        type_ids.append(tid)
    if not type_ids:
        return _fail(f"no trained types match the filters; "
                     f"registry has {registry.type_ids()}")

    digest = (f"{file_digest(paths['backbone'])[:12]}-"
              f"{file_digest(paths['registry'])[:12]}")
    count = cfg["generate.count"]
    last = {"tid": None}

    def progress(tid, i):
        if tid != last["tid"]:
            last["tid"] = tid
            print(f"generating {count} pairs for {tid}")

    summary = gen_mod.generate_dataset(
        index, registry, denoiser, cfg.codec(), cfg.schedule(),
        type_ids=type_ids, count=count, out_root=paths["generated"],
        seed=cfg["seed"], reweight=cfg["generate.reweight"],
        mask_mode=cfg["generate.mask_mode"],
        guidance_scale=cfg["generate.guidance_scale"],
        checkpoint_digest=digest, progress=progress)
    written = len(summary.rows) - summary.failures
    print(f"wrote {written} pairs under {summary.out_root} "
          f"({summary.failures} failures)")
    return 0 if summary.ok else 1


def _missing_masks(root: Path) -> list:
    """Test-split anomaly images whose ground-truth mask file is absent."""
    missing = []
    if not root.is_dir():
        return missing
    for cat in sorted(p for p in root.iterdir()
                      if p.is_dir() and (p / "train").exists()):
        test = cat / "test"
        if not test.is_dir():
            continue
        for defect_dir in sorted(p for p in test.iterdir() if p.is_dir()):
            if defect_dir.name == "good":
                continue
            gt = cat / "ground_truth" / defect_dir.name
            for img in sorted(defect_dir.glob("*.png")):
                if not any((gt / n).exists()
                           for n in (f"{img.stem}_mask.png", img.name)):
                    missing.append(gt / f"{img.stem}_mask.png")
    return missing


def _load_generated(paths) -> dict:
    """category -> defect -> [(image, mask)] from the generation manifest."""
    manifest = paths["generated"] / "manifest.tsv"
    if not manifest.exists():
        raise InspectionError(
            f"no generated set at {manifest}; run the generate command first")
    _, rows = gen_mod.read_manifest(manifest)
    by_cat = {}
    for row in rows:
        if row["mask-source"].startswith("failed:"):
            continue
        cat, defect, idx = row["category"], row["defect"], int(row["index"])
        stem = paths["generated"] / cat / defect
        pair = (data_mod.read_image(stem / f"image_{idx:05d}.png"),
                data_mod.read_mask(stem / f"mask_{idx:05d}.png"))
        by_cat.setdefault(cat, {}).setdefault(defect, []).append(pair)
    if not by_cat:
        raise InspectionError("generated set is empty (all rows failed)")
    return by_cat


def _category_metrics(cat_index, gen_by_defect, cfg: RunConfig, clf, plot_dir):
    """Train on generated pairs, evaluate on the real test split."""
    gen_pairs = [p for defect in sorted(gen_by_defect)
                 for p in gen_by_defect[defect]]
    normals = [data_mod.read_image(p) for p in cat_index.normal_train]
    localizer, _ = insp_mod.train_localizer(
        gen_pairs, normals, config=cfg.localizer_config(),
        train=cfg.localizer_train_config(), seed=cfg["seed"])

    samples = [(data_mod.read_image(p), None) for p in cat_index.normal_test]
    for defect in cat_index.defects:
        samples += [(data_mod.read_image(s.image_path),
                     data_mod.read_mask(s.mask_path))
                    for s in cat_index.test_pairs(defect)]
    sigma = cfg["eval.smooth_sigma"]
    row = insp_mod.evaluate_localizer(localizer, samples, smooth_sigma=sigma)

    gen_images = [img for img, _ in gen_pairs]
    row["is"] = None
    row["ic-lpips"] = None
    if clf is not None:
        try:
            row["is"] = metrics_mod.inception_score(gen_images, clf,
                                                    splits=cfg["eval.is_splits"])
        except metrics_mod.UndefinedMetricError:
            pass
        train_anomalies = [data_mod.read_image(s.image_path)
                           for defect in cat_index.defects
                           for s in cat_index.train_pairs(defect)]
        try:
            row["ic-lpips"] = metrics_mod.ic_lpips(
                gen_images, train_anomalies,
                metrics_mod.FeatureSpaceDistance(clf.embed))
        except metrics_mod.UndefinedMetricError:
            pass

    row["accuracy"] = None
    test_by_type = {defect: [data_mod.read_image(s.image_path)
                             for s in cat_index.test_pairs(defect)]
                    for defect in cat_index.defects}
    train_by_type = {defect: [img for img, _ in pairs]
                     for defect, pairs in gen_by_defect.items()}
    try:
        _, row["accuracy"] = insp_mod.train_defect_classifier(
            train_by_type, test_by_type, train=cfg.classifier_train_config(),
            seed=cfg["seed"])
    except InspectionError:
        pass

    if plot_dir is not None:
        maps = [insp_mod.smooth_scores(localizer.score_map(img).scores, sigma)
                for img, _ in samples]
        flat = np.concatenate([m.ravel() for m in maps])
        labels = np.concatenate(
            [(np.zeros(m.shape, np.uint8) if mask is None
              else (np.asarray(mask) > 0).astype(np.uint8)).ravel()
             for m, (_, mask) in zip(maps, samples)])
        name = cat_index.name
        insp_mod.save_pr_curve(flat, labels, plot_dir / f"{name}_pixel_pr.png",
                               title=f"{name} pixel precision-recall")
        insp_mod.save_score_histogram(
            [float(m.mean()) for m in maps],
            [0 if mask is None else 1 for _, mask in samples],
            plot_dir / f"{name}_image_scores.png",
            title=f"{name} image scores")
    return row


def cmd_eval(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    missing = _missing_masks(Path(cfg["dataset_root"]))
    if missing:
        print("error: anomaly images without ground-truth masks:",
              file=sys.stderr)
        for path in missing:
            print(f"  {path}", file=sys.stderr)
        return 1
    index = _load_index(cfg)
    by_cat = _load_generated(paths)

    clf = None
    if len(index.categories) >= 2:
        examples = [(data_mod.read_image(p), name)
                    for name in sorted(index.categories)
                    for p in index.categories[name].normal_train]
        clf = insp_mod.train_texture_classifier(
            examples, sorted(index.categories),
            train=cfg.classifier_train_config(), seed=cfg["seed"])
    else:
        print("note: fewer than 2 categories, skipping the texture "
              "classifier (is / ic-lpips will be blank)")

    report = insp_mod.MetricReport()
    plot_dir = paths["report"] / "plots" if cfg["eval.plots"] else None
    failures = 0
    for cat_name in sorted(by_cat):
        if cat_name not in index.categories:
            print(f"error: generated category {cat_name!r} is not in the "
                  f"dataset", file=sys.stderr)
            failures += 1
            continue
        try:
            row = _category_metrics(index.categories[cat_name],
                                    by_cat[cat_name], cfg, clf, plot_dir)
        except (InspectionError, data_mod.DatasetError) as err:
            print(f"error: {cat_name}: {err}", file=sys.stderr)
            failures += 1
            continue
        report.add(cat_name, row)
        print(f"evaluated {cat_name}")

    if not report.rows:
        return _fail("no category produced a metric row")
    paths["report"].mkdir(parents=True, exist_ok=True)
    report.save(paths["report"] / "report.tsv", paths["report"] / "report.json")
    print(report.to_tsv(), end="")
    print(f"report: {paths['report'] / 'report.tsv'}")
    return 0 if failures == 0 else 1


def cmd_report(cfg: RunConfig) -> int:
    path = _paths(cfg)["report"] / "report.json"
    if not path.exists():
        return _fail(f"no saved report at {path}; run the eval command first")
    print(insp_mod.MetricReport.load(path).to_tsv(), end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anogen",
        description="few-shot anomaly generation workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH",
                       help="flat key=value config file (UTF-8, # comments)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       dest="overrides", help="override one config key")
        p.set_defaults(handler=handler)
        return p

    p = add("synth-data", cmd_synth_data,
            "write a reproducible synthetic texture corpus")
    p.add_argument("--overwrite", action="store_true",
                   help="replace an existing non-empty corpus directory")
    add("train", cmd_train,
        "train anomaly tokens and mask tokens, writing the registry")
    add("train-mask", cmd_train_mask,
        "retrain only the mask tokens of an existing registry")
    p = add("generate", cmd_generate,
            "sample anomaly image/mask pairs from trained embeddings")
    p.add_argument("--no-reweight", action="store_true",
                   help="disable adaptive attention re-weighting")
    add("eval", cmd_eval,
        "train a localizer on generated pairs and score the real test split")
    add("report", cmd_report, "re-render the saved metric report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "overwrite", False):
        overrides.append("corpus.overwrite=true")
    if getattr(args, "no_reweight", False):
        overrides.append("generate.reweight=false")
    try:
        if args.config:
            cfg = RunConfig.from_file(args.config, overrides)
        else:
            cfg = RunConfig.from_text("", overrides)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    try:
        return args.handler(cfg)
    except (ConfigError, ContractViolation, CheckpointError, InspectionError,
            data_mod.DatasetError, gen_mod.MaskSynthesisError, OSError) as err:
        return _fail(str(err))


if __name__ == "__main__":
    raise SystemExit(main())
