"""Command-line surface: reproducible batch workflows over the library.

Every command validates its configuration (unknown keys are rejected with
JSON-pointer paths), echoes the fully resolved config into the output
directory, stamps emitted artifacts with the config hash, and exits with a
per-error-class status code. Progress is logged as one JSON object per line.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .cohort import (
    DEFAULT_SPLIT_VARS,
    STRATEGIES,
    SubjectRecord,
    load_split,
    read_manifest,
    save_split,
    strategy_pool,
    stratified_split,
)
from .errors import ConfigError, HipporateError, MissingInputError
from .models import ModelSpec, build, load_model, predict, saliency, save_model, threshold_top_k
from .nifti import load_volume, save_volume
from .phantom import emit_dataset
from .ridge import GramRidge, RidgeConfig, rate_with_ridge
from .scoring import (
    CRITERIA,
    HEMISPHERES,
    HemisphereScores,
    PredictionRow,
    read_predictions,
    round_criterion,
    write_predictions,
)
from .stats import evaluate_predictions
from .training import TrainConfig, VolumeDataset, train
from .volumes import ROI_PRESETS, crop_roi, embed_full_grid

# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "seed": 0,
    "roi": "hipp",
    "strategy": "ALL",
    "paths": {
        "manifest": "",
        "volumes": "",
        "split": "",
        "models": "",
        "out": "",
    },
    "train": {
        "max_epochs": 50,
        "batch_size": 16,
        "learning_rate": 1e-4,
        "weight_decay": 1e-4,
        "tolerance": 0.0,
        "augmentation": [],
        "architecture": "conv5_fc3",
        "channel_widths": [8, 16, 32, 64, 128],
        "fc_widths": [1300, 50],
        "dropout_p": 0.0,
        "hemispheres": ["L", "R"],
        "criteria": ["C1", "C2", "C3", "C5"],
    },
    "ridge": {
        "alpha_grid": list(np.logspace(-2, 6, 9)),
        "outer_folds": 5,
        "inner_folds": 6,
    },
    "stats": {
        "bootstrap_b": 100,
    },
    "split_search": {
        "candidates": 200,
        "test_frac": 0.25,
        "vars": DEFAULT_SPLIT_VARS,
    },
}


def _check_keys(config, template, pointer=""):
    if isinstance(template, dict):
        if not isinstance(config, dict):
            raise ConfigError(f"{pointer or '/'}: expected an object")
        for key, value in config.items():
            if key not in template:
                raise ConfigError(f"{pointer}/{key}: unknown configuration key")
            _check_keys(value, template[key], f"{pointer}/{key}")


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- CLI overrides <- env path overrides."""
    config = DEFAULT_CONFIG
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise MissingInputError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
        _check_keys(user, DEFAULT_CONFIG)
        config = _merge(config, user)
    if overrides:
        _check_keys(overrides, DEFAULT_CONFIG)
        config = _merge(config, overrides)
    for key in config["paths"]:
        env = os.environ.get(f"HIPPORATE_PATH_{key.upper()}")
        if env:
            config["paths"][key] = env
    return config


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def echo_config(config: dict, out_dir: Path) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    (out_dir / "config.json").write_text(
        json.dumps({"config_hash": digest, **config}, indent=2, sort_keys=True) + "\n")
    return digest


def log_event(**fields) -> None:
    click.echo(json.dumps(fields, sort_keys=True))


def _require(path: str, kind: str) -> Path:
    if not path:
        raise ConfigError(f"missing required path: {kind}")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{kind} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# command group
# ---------------------------------------------------------------------------

@click.group()
@click.version_option(__version__)
def main():
    """Automatic rating of incomplete hippocampal inversion."""


def _run(fn):
    try:
        fn()
    except FileNotFoundError as exc:
        log_event(event="error", error="MissingInputError", message=str(exc))
        sys.exit(MissingInputError.exit_code)
    except HipporateError as exc:
        log_event(event="error", error=type(exc).__name__, message=str(exc))
        sys.exit(exc.exit_code)


@main.command("phantom-gen")
@click.option("--n", type=int, required=True, help="number of phantom subjects")
@click.option("--seed", type=int, default=0)
@click.option("--noise-sd", type=float, default=0.1)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def phantom_gen(n, seed, noise_sd, out_dir):
    """Emit a synthetic phantom dataset (volumes + manifest)."""
    def go():
        digest = config_hash({"command": "phantom-gen", "n": n, "seed": seed,
                              "noise_sd": noise_sd})
        records = emit_dataset(out_dir, n=n, seed=seed, noise_sd=noise_sd,
                               config_hash=digest)
        log_event(event="phantom-gen", n=len(records), out=str(out_dir), seed=seed)
    _run(go)


@main.command("crop")
@click.option("--preset", type=click.Choice(sorted(ROI_PRESETS)), default="hipp")
@click.option("--input", "in_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def crop_cmd(preset, in_path, out_path):
    """Crop full-grid volumes (file or directory) to an ROI preset."""
    def go():
        roi = ROI_PRESETS[preset]
        in_p, out_p = Path(in_path), Path(out_path)
        if in_p.is_dir():
            out_p.mkdir(parents=True, exist_ok=True)
            names = sorted(p.name for p in in_p.iterdir()
                           if p.name.endswith((".nii", ".nii.gz")))
            for name in names:
                save_volume(crop_roi(load_volume(in_p / name), roi), out_p / name)
            log_event(event="crop", preset=preset, n=len(names), out=str(out_p))
        else:
            save_volume(crop_roi(load_volume(in_p), roi), out_p)
            log_event(event="crop", preset=preset, n=1, out=str(out_p))
    _run(go)


@main.command("split")
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--candidates", type=int, default=200)
@click.option("--seed", type=int, default=0)
@click.option("--test-frac", type=float, default=0.25)
@click.option("--vars", "vars_csv", default=None,
              help="comma-separated stratification variables")
def split_cmd(manifest, out_path, candidates, seed, test_frac, vars_csv):
    """Stratified split search over the manifest."""
    def go():
        records = read_manifest(manifest)
        vars_list = vars_csv.split(",") if vars_csv else None
        assignment = stratified_split(records, test_frac=test_frac,
                                      candidates=candidates, vars=vars_list, seed=seed)
        save_split(assignment, out_path)
        log_event(event="split", out=str(out_path), score=assignment.score,
                  candidates=candidates, seed=seed)
    _run(go)


def _load_pool_volumes(records: list[SubjectRecord], volumes_dir: Path) -> np.ndarray:
    vols = None
    for i, record in enumerate(records):
        v = load_volume(volumes_dir / record.image_path)
        if vols is None:
            vols = np.empty((len(records), 1) + v.shape, dtype=np.float32)
        vols[i, 0] = v.data
    return vols


def _targets(records: list[SubjectRecord], hemisphere: str, criterion: str) -> np.ndarray:
    out = np.empty(len(records), dtype=np.float32)
    for i, r in enumerate(records):
        if r.scores is None:
            raise ConfigError(f"subject {r.subject_id} has no scores; cannot train")
        out[i] = r.scores.hemisphere(hemisphere).get(criterion)
    return out


def _opposite(hemisphere: str) -> str:
    return "R" if hemisphere == "L" else "L"


def _train_one_job(config: dict, hemisphere: str, criterion: str) -> dict:
    paths = config["paths"]
    records = read_manifest(_require(paths["manifest"], "manifest"))
    assignment = load_split(_require(paths["split"], "split"))
    train_records, val_records = strategy_pool(config["strategy"], records, assignment)
    volumes_dir = _require(paths["volumes"], "volumes")
    tcfg = config["train"]
    spec = ModelSpec(
        architecture=tcfg["architecture"],
        input_shape=ROI_PRESETS[config["roi"]].shape,
        channel_widths=tuple(tcfg["channel_widths"]),
        fc_widths=tuple(tcfg["fc_widths"]),
        dropout_p=tcfg["dropout_p"],
    )
    model_id = f"{tcfg['architecture']}_{config['strategy']}_{hemisphere}_{criterion}"
    model = build(spec, seed=config["seed"], provenance={
        "strategy": config["strategy"], "hemisphere": hemisphere,
        "criterion": criterion, "seed": config["seed"], "model_id": model_id,
    })
    datasets = []
    for recs, part in ((train_records, "train"), (val_records, "val")):
        datasets.append(VolumeDataset(
            volumes=_load_pool_volumes(recs, volumes_dir),
            targets=_targets(recs, hemisphere, criterion),
            flip_targets=_targets(recs, _opposite(hemisphere), criterion),
            partitions=[part] * len(recs),
            subject_ids=[r.subject_id for r in recs],
        ))
    cfg = TrainConfig(
        max_epochs=tcfg["max_epochs"], batch_size=tcfg["batch_size"],
        learning_rate=tcfg["learning_rate"], weight_decay=tcfg["weight_decay"],
        tolerance=tcfg["tolerance"], seed=config["seed"],
        augmentation=frozenset(tcfg["augmentation"]),
    )
    model, log = train(model, datasets[0], datasets[1], cfg)
    out_dir = Path(paths["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / f"{model_id}.weights")
    digest = config_hash(config)
    log_rows = "\n".join(
        f"{r['epoch']},{r['train_loss']:.6f},{r['val_loss']:.6f},{r['seconds']:.3f}"
        for r in log.to_rows())
    (out_dir / f"{model_id}_trainlog.csv").write_text(
        f"# config_hash: {digest}\nepoch,train_loss,val_loss,seconds\n" + log_rows + "\n")
    summary = {
        "config_hash": digest, "model_id": model_id,
        "best_epoch": log.best_epoch, "best_val_loss": log.best_val_loss,
        "param_hash": log.param_hash, "weight_decay_mode": log.weight_decay_mode,
    }
    (out_dir / f"{model_id}_trainlog.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--manifest", default=None, type=click.Path())
@click.option("--volumes", default=None, type=click.Path())
@click.option("--split", "split_path", default=None, type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--strategy", default=None, type=click.Choice(sorted(STRATEGIES)))
@click.option("--jobs", type=int, default=1, help="parallel (hemisphere, criterion) jobs")
def train_cmd(config_path, manifest, volumes, split_path, out_dir, strategy, jobs):
    """Train one model per (hemisphere, criterion) pair."""
    def go():
        overrides = {"paths": {}}
        if manifest:
            overrides["paths"]["manifest"] = manifest
        if volumes:
            overrides["paths"]["volumes"] = volumes
        if split_path:
            overrides["paths"]["split"] = split_path
        if out_dir:
            overrides["paths"]["out"] = out_dir
        if strategy:
            overrides["strategy"] = strategy
        config = load_config(config_path, overrides)
        out = Path(_required_out(config))
        echo_config(config, out)
        pairs = [(h, c) for h in config["train"]["hemispheres"]
                 for c in config["train"]["criteria"]]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_train_one_job, config, h, c): (h, c)
                           for h, c in pairs}
                for fut in futures:
                    summary = fut.result()
                    log_event(event="trained", **summary)
        else:
            for h, c in pairs:
                summary = _train_one_job(config, h, c)
                log_event(event="trained", **summary)
    _run(go)


def _required_out(config: dict) -> str:
    if not config["paths"]["out"]:
        raise ConfigError("missing required path: /paths/out")
    return config["paths"]["out"]


@main.command("rate")
@click.option("--models", "models_dir", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--volumes", "volumes_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--subjects", default=None,
              help="comma-separated subject ids (default: whole manifest)")
def rate_cmd(models_dir, manifest, volumes_dir, out_path, subjects):
    """Apply trained models to volumes and emit the predictions CSV."""
    def go():
        records = read_manifest(manifest)
        if subjects:
            wanted = set(subjects.split(","))
            records = [r for r in records if r.subject_id in wanted]
        model_files = sorted(Path(models_dir).glob("*.weights"))
        if not model_files:
            raise MissingInputError(f"no .weights files in {models_dir}")
        loaded = [load_model(p) for p in model_files]
        rows = _rate_records(loaded, records, Path(volumes_dir))
        digest = config_hash({"command": "rate", "models": sorted(p.name for p in model_files),
                              "manifest": str(manifest), "subjects": subjects})
        write_predictions(rows, out_path, config_hash=digest)
        log_event(event="rate", n_subjects=len(records), n_models=len(loaded),
                  out=str(out_path))
    _run(go)


def _rate_records(models_list, records, volumes_dir: Path) -> list[PredictionRow]:
    by_pair = {}
    for m in models_list:
        key = (m.provenance.get("hemisphere"), m.provenance.get("criterion"))
        by_pair[key] = m
    batch = _load_pool_volumes(records, volumes_dir)
    rows = []
    raw_by_pair = {}
    for key, model in sorted(by_pair.items()):
        raw_by_pair[key] = predict(model, batch)
    for hemisphere in HEMISPHERES:
        if not all((hemisphere, c) in by_pair for c in CRITERIA):
            continue
        any_model = by_pair[(hemisphere, CRITERIA[0])]
        model_id = any_model.provenance.get("model_id", "cnn").rsplit("_", 2)[0]
        strategy = any_model.provenance.get("strategy", "")
        for i, record in enumerate(records):
            scores = HemisphereScores(*(
                round_criterion(float(raw_by_pair[(hemisphere, c)][i]), c)
                for c in CRITERIA))
            rows.append(PredictionRow(
                subject_id=record.subject_id, hemisphere=hemisphere,
                scores=scores, model_id=model_id, strategy=strategy))
    return rows


@main.command("ridge")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--manifest", default=None, type=click.Path())
@click.option("--volumes", default=None, type=click.Path())
@click.option("--split", "split_path", default=None, type=click.Path())
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--strategy", default=None, type=click.Choice(sorted(STRATEGIES)))
def ridge_cmd(config_path, manifest, volumes, split_path, out_dir, strategy):
    """Nested-CV ridge baseline: fit on train+val, predict the test set."""
    def go():
        overrides = {"paths": {}}
        if manifest:
            overrides["paths"]["manifest"] = manifest
        if volumes:
            overrides["paths"]["volumes"] = volumes
        if split_path:
            overrides["paths"]["split"] = split_path
        if out_dir:
            overrides["paths"]["out"] = out_dir
        if strategy:
            overrides["strategy"] = strategy
        config = load_config(config_path, overrides)
        out = Path(_required_out(config))
        digest = echo_config(config, out)
        paths = config["paths"]
        records = read_manifest(_require(paths["manifest"], "manifest"))
        assignment = load_split(_require(paths["split"], "split"))
        volumes_dir = _require(paths["volumes"], "volumes")
        train_records, val_records = strategy_pool(config["strategy"], records, assignment)
        pool_records = train_records + val_records  # nested CV over train+val union
        test_records = [r for r in records
                        if assignment.partition(r.subject_id) == "test"]
        pool_X = _load_pool_volumes(pool_records, volumes_dir).reshape(len(pool_records), -1)
        test_X = _load_pool_volumes(test_records, volumes_dir).reshape(len(test_records), -1)
        rcfg = RidgeConfig(alpha_grid=tuple(config["ridge"]["alpha_grid"]),
                           outer_folds=config["ridge"]["outer_folds"],
                           inner_folds=config["ridge"]["inner_folds"],
                           seed=config["seed"])
        raw = {}
        cross = test_X @ pool_X.T
        gram = GramRidge(pool_X)
        for hemisphere in HEMISPHERES:
            for criterion in CRITERIA:
                y = _targets(pool_records, hemisphere, criterion)
                preds, alpha, _ = rate_with_ridge(pool_X, y, test_X, rcfg,
                                                  gram=gram, cross=cross)
                raw[(hemisphere, criterion)] = preds
                log_event(event="ridge-fit", hemisphere=hemisphere,
                          criterion=criterion, alpha=alpha)
        rows = []
        for hemisphere in HEMISPHERES:
            for i, record in enumerate(test_records):
                scores = HemisphereScores(*(
                    round_criterion(float(raw[(hemisphere, c)][i]), c) for c in CRITERIA))
                rows.append(PredictionRow(
                    subject_id=record.subject_id, hemisphere=hemisphere,
                    scores=scores, model_id="ridge", strategy=config["strategy"]))
        out_csv = out / "ridge_predictions.csv"
        write_predictions(rows, out_csv, config_hash=digest)
        log_event(event="ridge", out=str(out_csv), n_test=len(test_records))
    _run(go)


@main.command("evaluate")
@click.option("--truth", type=click.Path(exists=True), required=True,
              help="manifest CSV with ground-truth scores")
@click.option("--pred", "pred_paths", type=click.Path(exists=True), multiple=True,
              required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--b", type=int, default=100, help="bootstrap iterations")
@click.option("--seed", type=int, default=0)
def evaluate_cmd(truth, pred_paths, out_dir, b, seed):
    """Agreement report (ICC/kappa + bootstrap CIs + pairwise tests)."""
    def go():
        records = {r.subject_id: r for r in read_manifest(truth) if r.scores is not None}
        # model -> hemisphere -> subject_id -> predicted scores
        by_model: dict = {}
        strategies = {}
        for path in pred_paths:
            for row in read_predictions(path):
                if row.subject_id not in records:
                    continue
                strategies[row.model_id] = row.strategy
                by_model.setdefault(row.model_id, {}).setdefault(
                    row.hemisphere, {})[row.subject_id] = row.scores
        # methods are compared on identical subjects: intersect per hemisphere
        aligned = {model_id: {} for model_id in by_model}
        for hemisphere in HEMISPHERES:
            having = [m for m in by_model if hemisphere in by_model[m]]
            if not having:
                continue
            common = set(records)
            for m in having:
                common &= set(by_model[m][hemisphere])
            subjects = sorted(common)
            if not subjects:
                continue
            truth_scores = [records[s].scores.hemisphere(hemisphere) for s in subjects]
            for m in having:
                preds = [by_model[m][hemisphere][s] for s in subjects]
                for criterion in CRITERIA:
                    aligned[m][(hemisphere, criterion)] = (
                        np.array([t.get(criterion) for t in truth_scores]),
                        np.array([p.get(criterion) for p in preds]))
                aligned[m][(hemisphere, "composite")] = (
                    np.array([t.composite for t in truth_scores]),
                    np.array([p.composite for p in preds]))
        report = evaluate_predictions(aligned, b=b, seed=seed, strategies=strategies)
        report.meta["truth"] = str(truth)
        report.meta["config_hash"] = config_hash({
            "command": "evaluate", "truth": str(truth),
            "pred": [str(p) for p in pred_paths], "b": b, "seed": seed})
        report.save(out_dir)
        log_event(event="evaluate", out=str(out_dir), models=sorted(aligned),
                  rows=len(report.rows), comparisons=len(report.comparisons))
    _run(go)


@main.command("saliency")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--volumes", "volumes_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--top-k", type=int, default=0,
              help="also write a binary mask of the k highest values")
@click.option("--full-grid/--roi-grid", default=False,
              help="embed the map back into the full MNI grid")
def saliency_cmd(model_path, manifest, volumes_dir, out_path, top_k, full_grid):
    """Group saliency map of a trained model over a set of volumes."""
    def go():
        model = load_model(model_path)
        records = read_manifest(manifest)
        vols = [load_volume(Path(volumes_dir) / r.image_path) for r in records]
        smap = saliency(model, vols)
        emitted = embed_full_grid(smap) if full_grid else smap
        save_volume(emitted, out_path)
        log_event(event="saliency", out=str(out_path), n=len(vols))
        if top_k:
            mask = threshold_top_k(smap, top_k)
            mask_path = Path(out_path)
            suffixes = "".join(mask_path.suffixes)
            stem = mask_path.name[:-len(suffixes)] if suffixes else mask_path.name
            mask_out = mask_path.with_name(f"{stem}_top{top_k}{suffixes}")
            save_volume(embed_full_grid(mask) if full_grid else mask, mask_out)
            log_event(event="saliency-mask", out=str(mask_out), k=top_k)
    _run(go)


if __name__ == "__main__":
    main()
