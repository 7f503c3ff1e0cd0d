"""``geomae`` command-line entry point.

Subcommands: ``synth``, ``pretrain``, ``sample-dataset``, ``finetune``,
``eval``, ``benchmark`` and ``embed``. Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numeric failure.

The master seed fans out to named sub-seeds (see :func:`geomae.seeding.sub_seed`):
``init`` (model weights), ``data`` (batch order and augmentation), ``train``
(per-step masking and metadata drop), ``search`` (hyperparameter proposals),
``finetune/...`` (head initialisation and batch order), ``chips`` (rendered
sampler chips).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import bench
from .chips import ChipDataset, read_manifest, write_chip
from .config import ExperimentConfig, dump_config, load_config
from .errors import ConfigError, DataError, InvalidArgumentError, NumericError
from .finetune import (
    PRIMARY_METRIC,
    FinetuneSettings,
    encode_all,
    load_backbone,
    load_labelled,
    run_finetune,
    split_indices,
    task_metrics,
)
from .mae import PRESETS, MaskedAutoencoder
from .sampler import io as sampler_io
from .sampler.pipeline import SamplerConfig, lulc_distribution, run_sampler, verify_dataset
from .sampler.tiles import TileSelectionConfig
from .seeding import numpy_rng, sub_seed
from .trainer import BatchLoader, default_step_fn, train
from .synthetic import make_labelled_set, make_pretraining_set, synthetic_chip

log = logging.getLogger("geomae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# helpers -----------------------------------------------------------------------
def _dtype(cfg: ExperimentConfig) -> torch.dtype:
    return torch.float64 if cfg.model.dtype == "float64" else torch.float32


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"data.{what} is required for this command")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _json_clean(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_clean(obj.item())
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    # the output dir itself is left out so reruns into fresh dirs match byte for byte
    (out / "config.yaml").write_text(dump_config(dataclasses.replace(cfg, out=".")), encoding="utf-8")
    return out


def _settings(cfg: ExperimentConfig, **kw) -> FinetuneSettings:
    f = cfg.finetune
    base = dict(
        task=cfg.task,
        head=f.head,
        n_classes=f.n_classes,
        class_weights=f.class_weights,
        freeze_backbone=f.freeze_backbone,
        head_depth=f.head_depth,
        lr=f.lr,
        weight_decay=f.weight_decay,
        epochs=f.epochs,
        batch_size=f.batch_size,
        patience=f.patience,
    )
    base.update(kw)
    return FinetuneSettings(**base)


def _labelled(cfg: ExperimentConfig):
    if cfg.task == "pretrain":
        raise ConfigError("task must be classify, segment or regress for this command")
    manifest = _require(cfg.data.manifest, "manifest")
    backbone, mean, std = load_backbone(
        cfg.data.checkpoint and _require(cfg.data.checkpoint, "checkpoint"),
        cfg.model.encoder(),
        cfg.model.decoder(),
        sub_seed(cfg.seed, "init"),
        cfg.model.init_scheme,
        _dtype(cfg),
    )
    if mean is None and cfg.data.normalize:
        mean, std = ChipDataset(manifest, split="train").channel_stats()
    data = load_labelled(manifest, cfg.task, mean, std, _dtype(cfg))
    if data.x.shape[2] != backbone.encoder_cfg.channels:
        raise ConfigError(f"chips have {data.x.shape[2]} channels, model expects {backbone.encoder_cfg.channels}")
    return backbone, data


def _scalar_metrics(task: str, metrics: dict | None) -> dict:
    keys = ["rmse", "r2"] if task == "regress" else ["overall_acc", "miou", "macro_f1", "weighted_f1", "precision", "recall"]
    return {k: (float(metrics[k]) if metrics else float("nan")) for k in keys}


# commands -----------------------------------------------------------------------
def cmd_synth(args) -> int:
    out = Path(args.out or "data/synthetic")
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "pretrain":
        path = make_pretraining_set(out, n=args.n or 1000, seed=args.seed or 0, size=args.size)
    elif args.kind == "sampler":
        from .sampler.synthetic import make_catalog, make_scenes

        catalog = make_catalog(n_tiles=args.n or 2000, seed=args.seed or 0)
        sampler_io.write_catalog(out / "catalog.csv", catalog)
        path = out / "scenes.csv"
        sampler_io.write_scene_index(path, make_scenes(catalog, n_scenes=24, seed=args.seed or 0))
    else:
        path = make_labelled_set(out, args.kind, n=args.n or 96, seed=args.seed or 0, size=args.size)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    manifest = _require(cfg.data.manifest, "manifest")
    dataset = ChipDataset(manifest, split="train")
    if not len(dataset):
        raise DataError(f"{manifest}: no training chips")
    enc, dec = cfg.model.encoder(), cfg.model.decoder()
    if dataset.chip(0).shape[1] != enc.channels:
        raise ConfigError(f"chips have {dataset.chip(0).shape[1]} channels, model expects {enc.channels}")
    mean = std = None
    if cfg.data.normalize:
        mean, std = dataset.channel_stats()
    out = _prepare_out(cfg)
    model = MaskedAutoencoder(enc, dec, init_seed=sub_seed(cfg.seed, "init"), init_scheme=cfg.model.init_scheme).to(_dtype(cfg))
    loader = BatchLoader(dataset, cfg.train.batch_size, sub_seed(cfg.seed, "data"), mean, std, cfg.data.crop, dtype=_dtype(cfg))
    schedule = cfg.schedule
    if cfg.train.schedule_unit == "steps":
        spe = loader.steps_per_epoch
        schedule = dataclasses.replace(schedule, warmup_epochs=schedule.warmup_epochs / spe, total_epochs=schedule.total_epochs / spe)
    result = train(
        model,
        loader,
        schedule,
        seed=sub_seed(cfg.seed, "train"),
        max_steps=cfg.train.steps,
        epochs=cfg.train.epochs if cfg.train.steps is None else None,
        step_fn=default_step_fn(cfg.train.mask_ratio, cfg.train.drop_prob, cfg.train.norm_pix),
        out_dir=out,
        checkpoint_every=cfg.train.checkpoint_every,
        extra_meta={"encoder": dataclasses.asdict(enc), "decoder": dataclasses.asdict(dec)},
    )
    first, last = result.trace[0][3], result.trace[-1][3]
    print(f"pretrained {result.steps} steps: loss {first:.4f} -> {last:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_sample_dataset(cfg: ExperimentConfig) -> int:
    catalog_path = _require(cfg.data.catalog, "catalog")
    scenes_path = _require(cfg.data.scenes, "scenes")
    catalog = sampler_io.read_catalog(catalog_path)
    scenes = sampler_io.read_scene_index(scenes_path)
    s = cfg.sampler
    scfg = SamplerConfig(
        tiles=TileSelectionConfig(
            per_class=s.per_class, pool_size=s.pool_size, n_urban=s.n_urban, n_entropy=s.n_entropy, train_fraction=s.train_fraction
        )
    )
    out = _prepare_out(cfg)
    if not scenes or not catalog:
        log.warning("scene index or catalog is empty: writing an empty manifest")
        sampler_io.write_patch_manifest(out / "patch_manifest.csv", [])
        (out / "stats.md").write_text("# Sampling report\n\nNo scenes: 0 samples.\n", encoding="utf-8")
        return EXIT_OK
    result = run_sampler(catalog, scenes, seed=cfg.seed, cfg=scfg)
    records = result.records
    if s.write_chips:
        rendered = []
        for k, rec in enumerate(records):
            rel = f"chips/patch_{k:06d}.chip"
            chip = synthetic_chip(numpy_rng(cfg.seed, f"chips/{k}"), [d for _, d in rec.dates], size=s.chip_size)
            write_chip(out / rel, chip)
            rendered.append(dataclasses.replace(rec, chip_path=rel))
        records = rendered
    sampler_io.write_patch_manifest(out / "patch_manifest.csv", records)
    if not records:
        log.warning("no sample passed the filters: the manifest is empty")
    checks = verify_dataset(result, scfg)
    with open(out / "verification.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["check", "passed", "detail"])
        for c in checks:
            w.writerow([c.name, c.passed, c.detail])
    with open(out / "lulc_distribution.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["class", "all_tiles", "training_samples"], lineterminator="\n")
        w.writeheader()
        w.writerows(lulc_distribution(catalog, records))
    n_train = sum(r.split == "train" for r in records)
    lines = [
        "# Sampling report",
        "",
        f"- tiles: {len(result.selection.train)} train, {len(result.selection.val)} val",
        f"- samples: {n_train} train, {len(records) - n_train} val",
        *(f"- {k}: {v}" for k, v in sorted(result.stats.items())),
        "",
        "| check | passed | detail |",
        "|---|---|---|",
        *(f"| {c.name} | {'yes' if c.passed else 'NO'} | {c.detail} |" for c in checks),
    ]
    (out / "stats.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    failed = [c.name for c in checks if not c.passed]
    print(f"sampled {len(records)} records; verifier: {'all checks pass' if not failed else 'FAILED ' + ', '.join(failed)}")
    if failed:
        raise DataError(f"dataset constraints violated: {', '.join(failed)}")
    return EXIT_OK


def _write_predictions(path: Path, pred, true) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pred", "true"])
        for p, t in zip(np.asarray(pred).reshape(-1).tolist(), np.asarray(true).reshape(-1).tolist()):
            w.writerow([repr(p), repr(t)])


def cmd_finetune(cfg: ExperimentConfig) -> int:
    backbone, data = _labelled(cfg)
    out = _prepare_out(cfg)
    latents = encode_all(backbone, data) if cfg.finetune.freeze_backbone else None
    settings = _settings(cfg)
    seed = sub_seed(cfg.seed, "finetune")
    if cfg.task == "regress" and cfg.finetune.loyo:
        if data.years is None:
            raise DataError("leave-one-year-out needs a 'year' column")
        folds = []
        for split in bench.loyo_splits(data.years):
            tr = np.asarray(split.train)
            res = run_finetune(backbone, data, settings, seed, tr, [], split.test, latents)
            folds.append({"test_year": split.test_year, "train_years": list(split.train_years), **res.test_metrics})
        summary = {
            "folds": folds,
            "mean_r2": float(np.mean([f["r2"] for f in folds])),
            "mean_rmse": float(np.mean([f["rmse"] for f in folds])),
        }
        _write_json(out / "metrics.json", summary)
        print(f"leave-one-year-out over {len(folds)} folds: mean R2 {summary['mean_r2']:.4f}")
        return EXIT_OK
    tr, va, te = split_indices(data)
    res = run_finetune(backbone, data, settings, seed, tr, va, te, latents)
    _write_json(out / "metrics.json", {"val": res.val_metrics, "test": res.test_metrics})
    _write_predictions(out / "predictions.csv", res.test_pred, res.test_true)
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        w.writerows([e, repr(a), repr(b)] for e, a, b in res.history)
    primary = PRIMARY_METRIC[cfg.task]
    print(f"fine-tuned {cfg.task}: test {primary} = {res.test_metrics[primary]:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    """Score a ``pred,true`` CSV (e.g. ``predictions.csv`` written by finetune)."""
    if cfg.task == "pretrain":
        raise ConfigError("task must be classify, segment or regress for eval")
    path = _require(cfg.data.predictions, "predictions")
    try:
        rows = read_manifest(path, required=("pred", "true"))
        pred = np.array([float(r["pred"]) for r in rows])
        true = np.array([float(r["true"]) for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if cfg.task != "regress":
        if not (np.all(pred == np.round(pred)) and np.all(true == np.round(true))):
            raise DataError(f"{path}: class labels must be integers")
        pred, true = pred.astype(np.int64), true.astype(np.int64)
    try:
        metrics = task_metrics(cfg.task, pred, true, cfg.finetune.n_classes)
    except InvalidArgumentError as exc:
        raise DataError(f"{path}: {exc}") from None
    out = _prepare_out(cfg)
    _write_json(out / "metrics.json", metrics)
    for k, v in metrics.items():
        if not isinstance(v, list):
            print(f"{k}: {v:.6f}")
    return EXIT_OK


def cmd_benchmark(cfg: ExperimentConfig) -> int:
    """Budgeted search on the validation split, then seeded repeats of the best
    config scored on the test split. Every trial and repeat is one registry row.
    """
    backbone, data = _labelled(cfg)
    out = _prepare_out(cfg)
    b = cfg.benchmark
    for name, rng in (("lr_range", b.lr_range), ("weight_decay_range", b.weight_decay_range)):
        if len(rng) != 2 or not 0 < rng[0] <= rng[1]:
            raise ConfigError(f"benchmark.{name} must be [low, high] with 0 < low <= high")
    if not b.decoder_depths or min(b.decoder_depths) < 1:
        raise ConfigError("benchmark.decoder_depths must list positive integers")
    latents = encode_all(backbone, data) if cfg.finetune.freeze_backbone else None
    tr, va, te = split_indices(data)
    if len(va) == 0:
        raise DataError("benchmark search needs a validation split")
    primary = PRIMARY_METRIC[cfg.task]
    space = {
        "lr": bench.LogUniform(*b.lr_range),
        "weight_decay": bench.LogUniform(*b.weight_decay_range),
        "decoder_depth": bench.Choice(tuple(b.decoder_depths)),
    }

    def settings_for(c: dict) -> FinetuneSettings:
        return _settings(cfg, lr=c["lr"], weight_decay=c["weight_decay"], head_depth=c["decoder_depth"])

    trial_metrics: list[dict | None] = []

    def objective(c: dict) -> float:
        tid = len(trial_metrics)
        trial_metrics.append(None)
        res = run_finetune(backbone, data, settings_for(c), sub_seed(cfg.seed, f"search/trial={tid}"), tr, va, va, latents)
        trial_metrics[tid] = res.val_metrics
        return res.val_metrics[primary]

    search = bench.hparam_search(objective, space, budget=b.budget, seed=sub_seed(cfg.seed, "search"))
    registry = bench.Registry(out / "registry.csv", experiment=f"{cfg.task}-benchmark")
    for t in search.trials:
        registry.append(
            "search", t.trial_id, sub_seed(cfg.seed, f"search/trial={t.trial_id}"), t.config,
            _scalar_metrics(cfg.task, trial_metrics[t.trial_id]), t.error or "", t.wall_time,
        )
    if search.best_config is None:
        raise DataError(f"all {b.budget} search trials failed; see {registry.path}")

    def repeat(c: dict, seed: int) -> dict:
        t0 = time.perf_counter()
        try:
            res = run_finetune(backbone, data, settings_for(c), sub_seed(seed, "finetune"), tr, va, te, latents)
        except Exception as exc:
            registry.append("repeat", "best", seed, c, _scalar_metrics(cfg.task, None), f"{type(exc).__name__}: {exc}",
                            time.perf_counter() - t0)
            raise
        registry.append("repeat", "best", seed, c, _scalar_metrics(cfg.task, res.test_metrics), "", time.perf_counter() - t0)
        return res.test_metrics

    agg = bench.repeat_eval(repeat, search.best_config, n_seeds=b.n_seeds, seed0=cfg.seed, primary=primary)
    (out / "report.md").write_text(bench.markdown_report(f"{cfg.task} benchmark", search, agg, primary), encoding="utf-8")
    _write_json(
        out / "summary.json",
        {
            "metric": primary,
            "best_config": search.best_config,
            "best_val_score": search.best_score,
            "trials": len(search.trials),
            "repeats": len(agg.seeds),
            "scores": agg.scores,
            "mean": agg.mean,
            "std": agg.std,
            "std_defined": agg.std_defined,
            "partial": agg.partial,
            "failures": {str(k): v for k, v in agg.failures.items()},
        },
    )
    std = f"{agg.std:.4f}" if agg.std_defined else "n/a"
    print(f"benchmark: {len(search.trials)} trials, {len(agg.seeds)} repeats; test {primary} {agg.mean:.4f} +/- {std}")
    return EXIT_OK


def cmd_embed(cfg: ExperimentConfig) -> int:
    """Frozen-encoder latents ``[L, dim]`` per chip, plus a manifest."""
    manifest = _require(cfg.data.manifest, "manifest")
    model, mean, std = load_backbone(
        cfg.data.checkpoint and _require(cfg.data.checkpoint, "checkpoint"),
        cfg.model.encoder(),
        cfg.model.decoder(),
        sub_seed(cfg.seed, "init"),
        cfg.model.init_scheme,
        _dtype(cfg),
    )
    dataset = ChipDataset(manifest)
    if mean is None and cfg.data.normalize and len(dataset):
        mean, std = dataset.channel_stats()
    out = _prepare_out(cfg)
    (out / "embeddings").mkdir(exist_ok=True)
    model.eval()
    rows = []
    with torch.no_grad():
        for i in range(len(dataset)):
            x = dataset.chip(i).astype(np.float64)
            if x.shape[1] != model.encoder_cfg.channels:
                raise ConfigError(f"chip {i} has {x.shape[1]} channels, model expects {model.encoder_cfg.channels}")
            if mean is not None:
                x = (x - mean[None, :, None, None]) / std[None, :, None, None]
            meta = dataset.meta(i)
            grid = model.forward_features(torch.as_tensor(x[None], dtype=_dtype(cfg)), None if meta is None else [meta])
            latent = grid.data[0].numpy()
            rel = f"embeddings/emb_{i:06d}.chip"
            write_chip(out / rel, latent)
            T, gh, gw = grid.dims
            rows.append(
                {
                    "source": dataset.rows[i]["chip_path"],
                    "embedding_path": rel,
                    "tokens": latent.shape[0],
                    "dim": latent.shape[1],
                    "grid_t": T,
                    "grid_h": gh,
                    "grid_w": gw,
                }
            )
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["source", "embedding_path", "tokens", "dim", "grid_t", "grid_h", "grid_w"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"embedded {len(rows)} chips into {out / 'embeddings'}")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "sample-dataset": cmd_sample_dataset,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "embed": cmd_embed,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomae", description="Multi-temporal masked autoencoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="model preset (overrides the config)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set a dotted config key, e.g. train.steps=50 (repeatable)")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or name).strip().splitlines()[0])
    synth = sub.add_parser("synth", help="write a synthetic dataset")
    synth.add_argument("kind", choices=["pretrain", "classify", "segment", "regress", "sampler"])
    synth.add_argument("--out", help="output directory")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n", type=int, help="number of chips (tiles for 'sampler')")
    synth.add_argument("--size", type=int, default=32, help="chip height and width")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(str(Path(args.out).resolve()))}")
    if args.preset is not None:
        overrides.append(f"model.preset={args.preset}")
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = _config_from_args(args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvalidArgumentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
