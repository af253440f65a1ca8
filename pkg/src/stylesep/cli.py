"""Command-line interface.

Commands: generate-data, train, evaluate, sweep-alpha, report, visualize.
Outputs land under ``--out``, the ``STYLESEP_OUT`` environment variable, or
``./runs``.  Each training run gets its own ``{model}-{seed}-{timestamp}``
directory plus a ``latest`` pointer file; completed run directories are never
mutated, so evaluation and figures write sibling directories.

Exit codes: 0 success, 2 configuration error, 3 training aborted on a
non-finite loss, 4 missing or malformed artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
import torch
import yaml

from . import core, datagen, harmonizers, metrics, nets, viz
from .core import ArtifactError, ConfigError, StyleSepError, TrainingAbort

SCHEMA_VERSION = 1
ENV_OUT = "STYLESEP_OUT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_ARTIFACT = 4

TRAINERS = {
    "cae": harmonizers.train_cae,
    "ada": harmonizers.train_ada,
    "se-ada": harmonizers.train_se_ada,
    "pl-se-ada": harmonizers.train_pl_se_ada,
}

# Published reference row for the default mixing weight, measured on real
# multi-site brain MRI; kept in reports for orientation only, not reproduced
# by the synthetic pipeline.
REFERENCE_ROW = {
    "source": "published-adni-reference (not reproduced here)",
    "alpha": 0.2,
    "rmse": 0.0991,
    "ssim": 0.729,
    "disease_f1": 0.875,
    "domain_f1": 0.512,
}


@dataclass
class EvalSettings:
    """Evaluation knobs that are safe to vary.

    The probe protocol itself (architecture, epochs, sampling) is fixed by
    the metrics module so that probe scores stay comparable across runs.
    """

    ssim_data_range: float = 1.0
    noise_sigma: float = 0.1


@dataclass
class VizSettings:
    backend: str = "principal-components"
    alphas: tuple[float, ...] = viz.DEFAULT_ALPHAS
    n_grid_images: int = 4


@dataclass
class RunConfig:
    """Effective configuration of one invocation; sections mirror the modules."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: datagen.DataSpec = field(default_factory=datagen.DataSpec)
    model: nets.NetworkConfig = field(default_factory=nets.NetworkConfig)
    train: harmonizers.TrainConfig = field(default_factory=harmonizers.TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    viz: VizSettings = field(default_factory=VizSettings)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build_section(cls, raw: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    return raw


def load_run_config(path: Path | None, seed: int | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Build the effective config: defaults, then file, then flag overrides."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ArtifactError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        doc = loaded
    known = {"schema_version", "seed", "data", "model", "train", "eval", "viz"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}")

    def section(name: str) -> dict:
        raw = dict(doc.get(name, {}))
        if overrides and name in overrides:
            raw.update(overrides[name])
        return raw

    data_raw = _build_section(datagen.DataSpec, section("data"), "data")
    for key in ("image_shape", "domain_names"):
        if key in data_raw and data_raw[key] is not None:
            data_raw[key] = tuple(data_raw[key])
    model_raw = _build_section(nets.NetworkConfig, section("model"), "model")
    for key in ("image_shape", "encoder_channels", "encoder_strides", "decoder_channels"):
        if key in model_raw and model_raw[key] is not None:
            model_raw[key] = tuple(model_raw[key])
    train_raw = _build_section(harmonizers.TrainConfig, section("train"), "train")
    if "schedule" in train_raw and isinstance(train_raw["schedule"], dict):
        sched_raw = _build_section(harmonizers.StageSchedule, train_raw["schedule"], "train.schedule")
        train_raw["schedule"] = harmonizers.StageSchedule(**sched_raw)
    eval_raw = _build_section(EvalSettings, section("eval"), "eval")
    viz_raw = _build_section(VizSettings, section("viz"), "viz")
    if "alphas" in viz_raw:
        viz_raw["alphas"] = tuple(viz_raw["alphas"])

    cfg = RunConfig(
        schema_version=SCHEMA_VERSION,
        seed=int(doc.get("seed", 0)),
        data=datagen.DataSpec(**data_raw),
        model=nets.NetworkConfig(**model_raw),
        train=harmonizers.TrainConfig(**train_raw),
        eval=EvalSettings(**eval_raw),
        viz=VizSettings(**viz_raw),
    )
    if seed is not None:
        cfg = dataclasses.replace(
            cfg,
            seed=seed,
            data=dataclasses.replace(cfg.data, seed=seed),
            train=dataclasses.replace(cfg.train, seed=seed),
        )
    return cfg


FAST_TRAIN = {"epochs": 6, "schedule": harmonizers.StageSchedule(warmup_rounds=1)}


def _output_root(arg_out: str | None) -> Path:
    root = Path(arg_out or os.environ.get(ENV_OUT, "runs"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _new_run_dir(root: Path, model: str, seed: int) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run_dir = root / f"{model}-{seed}-{stamp}"
    run_dir.mkdir(parents=True)
    (root / "latest").write_text(run_dir.name + "\n")
    return run_dir


def _write_config_snapshot(cfg: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(cfg.to_dict(), indent=1, default=str) + "\n")


def cmd_generate_data(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    out_dir = Path(args.data) if args.data else _output_root(args.out) / "dataset"
    dataset = datagen.generate_dataset(cfg.data, out_dir)
    print(f"wrote {len(dataset.records)} records to {out_dir}")
    print(f"dataset hash {dataset.content_hash()}")
    return EXIT_OK


def _train_one(model: str, dataset, cfg: RunConfig, root: Path) -> Path:
    run_dir = _new_run_dir(root, model, cfg.train.seed)
    bundle, log = TRAINERS[model](dataset, cfg.model, cfg.train)
    nets.save_checkpoint(bundle, run_dir / "checkpoint.zip")
    log.save(run_dir / "trainlog.jsonl")
    _write_config_snapshot(cfg, run_dir / "config.json")
    return run_dir


def cmd_train(args) -> int:
    overrides: dict = {}
    if args.fast:
        overrides["train"] = dict(FAST_TRAIN)
    if args.alpha is not None:
        overrides.setdefault("train", {})["alpha"] = args.alpha
    if args.epochs is not None:
        overrides.setdefault("train", {})["epochs"] = args.epochs
    cfg = load_run_config(args.config, seed=args.seed, overrides=overrides)
    dataset = core.load_manifest(args.data)
    run_dir = _train_one(args.model, dataset, cfg, _output_root(args.out))
    print(f"trained {args.model} -> {run_dir}")
    return EXIT_OK


def _feature_fn_noise(bundle, dataset, sigma, seed):
    def fn(records):
        images = [dataset.load_image(r) for r in records]
        feats = nets.encode_images(bundle, images)
        # noise depends only on (seed, which records), not on call order
        digest = hashlib.sha256(",".join(r.subject_id for r in records).encode())
        salt = (seed + int(digest.hexdigest()[:8], 16)) %(2**32)
        return harmonizers.noise_augment(feats, sigma, seed=salt)

    return fn


def _feature_fn_combat(bundle, dataset):
    train_recs = dataset.split_records(core.Split.TRAIN)
    train_feats = nets.encode_images(bundle, [dataset.load_image(r) for r in train_recs])
    model = harmonizers.combat_fit(train_feats, np.array([r.domain for r in train_recs]))

    def fn(records):
        images = [dataset.load_image(r) for r in records]
        feats = nets.encode_images(bundle, images)
        return harmonizers.combat_apply(model, feats, np.array([r.domain for r in records]))

    return fn


def evaluate_run(run_dir: Path, dataset, cfg: RunConfig) -> list[metrics.MetricsReport]:
    """Reports for one run; a plain autoencoder also yields the feature-space baselines."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoint.zip"
    bundle = nets.load_checkpoint(ckpt)
    if bundle.variant not in TRAINERS:
        raise ArtifactError(f"checkpoint {ckpt} holds untrained bundle {bundle.variant!r}")
    seed = cfg.seed
    reports = [
        metrics.build_report(bundle.variant, dataset, seed, bundle=bundle,
                             data_range=cfg.eval.ssim_data_range)
    ]
    if bundle.variant == "cae":
        noise_fn = _feature_fn_noise(bundle, dataset, cfg.eval.noise_sigma, seed)
        reports.append(metrics.build_report("noise", dataset, seed, features=noise_fn))
        combat_fn = _feature_fn_combat(bundle, dataset)
        reports.append(metrics.build_report("combat", dataset, seed, features=combat_fn))
    return reports


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    dataset = core.load_manifest(args.data)
    run_dir = Path(args.run)
    reports = evaluate_run(run_dir, dataset, cfg)
    out_dir = Path(args.out) if args.out else run_dir.parent / f"eval-{run_dir.name}"
    out_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        report.save(out_dir / f"metrics-{report.model}.json")
    metrics.write_reports_csv(reports, out_dir / "metrics.csv")
    for report in reports:
        print(report.csv_row())
    print(f"wrote {out_dir}")
    return EXIT_OK


def cmd_sweep_alpha(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed,
                          overrides={"train": dict(FAST_TRAIN)} if args.fast else None)
    dataset = core.load_manifest(args.data)
    alphas = tuple(args.alphas) if args.alphas else viz.DEFAULT_ALPHAS
    root = _output_root(args.out)
    sweep_dir = _new_run_dir(root, "sweep-alpha", cfg.seed)
    rows, statuses = [], {}
    strip_bundle = None
    for alpha in alphas:
        run_cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, alpha=float(alpha))
        )
        try:
            run_dir = _train_one("pl-se-ada", dataset, run_cfg, sweep_dir)
            bundle = nets.load_checkpoint(run_dir / "checkpoint.zip")
            report = metrics.build_report("pl-se-ada", dataset, cfg.seed, bundle=bundle,
                                          data_range=cfg.eval.ssim_data_range)
            rows.append(report)
            statuses[f"{alpha:g}"] = "ok"
            if strip_bundle is None or abs(alpha - 0.2) < abs(strip_bundle.alpha - 0.2):
                strip_bundle = bundle
        except StyleSepError as exc:
            statuses[f"{alpha:g}"] = f"failed: {exc}"
    lines = ["alpha,rmse,ssim,disease_f1,domain_f1"]
    for r in rows:
        lines.append(f"{r.alpha:g},{r.rmse:.6f},{r.ssim:.6f},{r.disease_f1:.6f},{r.domain_f1:.6f}")
    (sweep_dir / "sweep.csv").write_text("\n".join(lines) + "\n")
    (sweep_dir / "sweep_summary.json").write_text(json.dumps(statuses, indent=1) + "\n")
    (sweep_dir / "reference_values.csv").write_text(
        "source,alpha,rmse,ssim,disease_f1,domain_f1\n"
        + ",".join(str(REFERENCE_ROW[k]) for k in
                   ("source", "alpha", "rmse", "ssim", "disease_f1", "domain_f1"))
        + "\n"
    )
    if strip_bundle is not None:
        sample = core.select_one_per_subject(dataset, core.Split.TEST, cfg.seed)[0]
        viz.emit_alpha_strip(strip_bundle, dataset.load_image(sample), alphas,
                             sweep_dir / "alpha_strip.png")
    failed = [a for a, s in statuses.items() if s != "ok"]
    print(f"sweep over {len(alphas)} weights, {len(rows)} succeeded -> {sweep_dir}")
    if failed:
        print(f"failed weights: {', '.join(failed)}")
    return EXIT_OK if not failed else EXIT_TRAINING


MODEL_ORDER = ("cae", "noise", "combat", "ada", "se-ada", "pl-se-ada")


def cmd_report(args) -> int:
    reports = []
    for item in args.inputs:
        p = Path(item)
        files = sorted(p.glob("metrics-*.json")) if p.is_dir() else [p]
        if not files:
            raise ArtifactError(f"no metrics files under {p}")
        reports.extend(metrics.MetricsReport.load(f) for f in files)
    reports.sort(key=lambda r: MODEL_ORDER.index(r.model))
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_reports_csv(reports, out_dir / "model_comparison.csv")

    def cell(v, width=10):
        s = "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
        return s.rjust(width)

    lines = ["".join(["model".ljust(12), cell("rmse"), cell("ssim"),
                      cell("disease_f1", 12), cell("domain_f1", 12)])]
    for r in reports:
        lines.append("".join([r.model.ljust(12), cell(r.rmse), cell(r.ssim),
                              cell(r.disease_f1, 12), cell(r.domain_f1, 12)]))
    lines.append("")
    lines.append(
        "reference (alpha=0.2, real multi-site MRI, not reproduced here): "
        f"rmse {REFERENCE_ROW['rmse']}, ssim {REFERENCE_ROW['ssim']}, "
        f"disease_f1 {REFERENCE_ROW['disease_f1']}, domain_f1 {REFERENCE_ROW['domain_f1']}"
    )
    text = "\n".join(lines) + "\n"
    (out_dir / "model_comparison.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    dataset = core.load_manifest(args.data)
    run_dir = Path(args.run)
    bundle = nets.load_checkpoint(run_dir / "checkpoint.zip")
    out_dir = Path(args.out) if args.out else run_dir.parent / f"figs-{run_dir.name}"
    out_dir.mkdir(parents=True, exist_ok=True)
    records = core.select_one_per_subject(dataset, core.Split.TEST, cfg.seed)
    images = [dataset.load_image(r) for r in records]

    feats_u = nets.encode_images(bundle, images)
    proj_u = viz.project_2d(feats_u, cfg.viz.backend, seed=cfg.seed, records=records)
    viz.emit_scatter(proj_u, "domain", out_dir / "z_u_domain.png")
    viz.emit_scatter(proj_u, "diagnosis", out_dir / "z_u_diagnosis.png")

    if bundle.variant in ("se-ada", "pl-se-ada"):
        z_dp = nets.style_encode_images(bundle, images)
        with torch.no_grad():
            z_d = bundle.expand(torch.from_numpy(z_dp)).numpy()
        proj_d = viz.project_2d(z_d, cfg.viz.backend, seed=cfg.seed, records=records)
        viz.emit_scatter(proj_d, "domain", out_dir / "z_d_domain.png")
    if bundle.variant == "pl-se-ada":
        sample = images[: cfg.viz.n_grid_images]
        viz.emit_reconstruction_grid(bundle, sample, bundle.alpha, out_dir / "reconstruction_grid.png")
        viz.emit_alpha_strip(bundle, images[0], cfg.viz.alphas, out_dir / "alpha_strip.png")
    print(f"wrote figures to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylesep",
        description="Adversarial style/anatomy disentanglement benchmark on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_required=True):
        p.add_argument("--config", type=Path, default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--out", type=str, default=None,
                       help=f"output root (default ${ENV_OUT} or ./runs)")
        if data_required:
            p.add_argument("--data", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("generate-data", help="render the synthetic dataset")
    common(p, data_required=False)
    p.add_argument("--data", type=Path, default=None, help="dataset output directory")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--model", choices=sorted(TRAINERS), required=True)
    p.add_argument("--alpha", type=float, default=None, help="mixing weight override")
    p.add_argument("--epochs", type=int, default=None, help="alternation rounds override")
    p.add_argument("--fast", action="store_true", help="reduced-epoch profile")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a training run")
    common(p)
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="train and evaluate across mixing weights")
    common(p)
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p.add_argument("--fast", action="store_true", help="reduced-epoch profile")
    p.set_defaults(fn=cmd_sweep_alpha)

    p = sub.add_parser("report", help="combine metrics files into one table")
    p.add_argument("inputs", nargs="+", help="metrics JSON files or eval directories")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("visualize", help="figures with sidecars for a run")
    common(p)
    p.add_argument("--run", type=Path, required=True, help="run directory")
    p.set_defaults(fn=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ArtifactError, FileNotFoundError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
