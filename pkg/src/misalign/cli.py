"""Command-line entry point.

Subcommands: gen, features, train, eval, ablate, mapsim. Options resolve
as hard default < config file (plain `key = value` lines) < explicit flag,
and every run writes the fully resolved configuration to a `config_echo.txt`
next to its outputs, sufficient to reproduce the run. Exit codes: 0 ok,
2 usage error, 3 missing input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .features import ScaleConfig, extract_pair_features, write_feature_csv
from .mapping import DEFAULT_THRESHOLD, TrajectorySpec, run_mapsim
from .model import load_checkpoint, save_checkpoint
from .synthdata import (
    MILD_PERTURB,
    PerturbSpec,
    SceneSpec,
    build_dataset,
    load_manifest,
    load_pair,
    write_json_atomic,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    ablate_radius,
    ablate_temperature,
    evaluate,
    train,
    write_csv,
)


class UsageError(ValueError):
    """Bad arguments or config values; maps to exit code 2."""


def _parse_scalar(text: str):
    """Config values: int, float, bool, or plain string."""
    body = text.strip()
    lowered = body.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(body)
        except ValueError:
            pass
    return body


def read_config_file(path) -> dict:
    """`key = value` per line; `#` comments and blank lines ignored."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line.rstrip()!r}")
            key, _, value = body.partition("=")
            values[key.strip()] = _parse_scalar(value)
    return values


def _floats(text) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(text).split(","))
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def parse_rate_grid(text: str) -> list[float]:
    """`start:stop:step`, inclusive of the endpoint within half a step."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"expected start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"expected numeric start:stop:step, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise UsageError("grid needs step > 0 and stop >= start")
    n = int(round((stop - start) / step))
    grid = [round(start + i * step, 10) for i in range(n + 1)]
    return [g for g in grid if g <= stop + 1e-9]


def write_config_echo(out_dir, subcommand: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(os.fspath(out_dir), "config_echo.txt")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(f"# subcommand: {subcommand}\n")
        for key in sorted(resolved):
            fh.write(f"{key} = {resolved[key]}\n")
    os.replace(tmp, path)


# (dest, flag, type caster or None for store_true, default, help)
_COMMON = [
    ("seed", "--seed", int, 0, "master seed for all derived randomness"),
    ("config", "--config", str, None, "key=value config file; flags override it"),
    ("jobs", "--jobs", int, 1, "max worker count; modules may use fewer"),
]

_OPTIONS = {
    "gen": [
        ("out", "--out", str, None, "dataset output directory"),
        ("pairs", "--pairs", int, None, "total pairs, split by --ratios"),
        ("splits", "--splits", str, "400,50,100", "train,val,test pair counts"),
        ("ratios", "--ratios", str, "0.7,0.1,0.2", "split ratios used with --pairs"),
        ("points", "--points", int, 2000, "points per cloud"),
        ("density", "--density", str, "uniform", "uniform or range-falloff"),
        ("overlap", "--overlap", float, 0.85, "target view overlap in [0.3, 1]"),
        ("noisy", "--noisy", None, False, "use the noisy perturbation sigmas (the default)"),
        ("mild", "--mild", None, False, "use the mild spread-magnitude perturbation regime"),
        ("no_icp", "--no-icp", None, False, "keep the raw perturbed transform as the estimate"),
        ("trans_sigma", "--trans-sigma", str, None, "translation sigmas x,y,z (m)"),
        ("rot_sigma", "--rot-sigma", str, None, "rotation sigmas yaw,roll,pitch (deg)"),
    ],
    "features": [
        ("pair", "--pair", str, None, "pair directory (source.xyz, reference.xyz, meta.json)"),
        ("out", "--out", str, None, "output CSV path"),
        ("anchors", "--anchors", int, 32, "anchors per cloud"),
        ("radii", "--radii", str, "7.5,4.0,2.5", "neighborhood radii, decreasing"),
        ("sinkhorn_lambda", "--sinkhorn-lambda", float, 0.2, "transport regularization"),
        ("cap", "--cap", int, 48, "max points per transport set"),
    ],
    "train": [
        ("data", "--data", str, None, "dataset root (from gen)"),
        ("out", "--out", str, None, "output directory for checkpoint and history"),
        ("epochs", "--epochs", int, 300, "training epochs"),
        ("batch_size", "--batch-size", int, 16, "minibatch size"),
        ("lr", "--lr", float, 1e-3, "learning rate"),
        ("anchors", "--anchors", int, 32, "anchors per cloud"),
        ("tau", "--tau", float, 0.6, "attention temperature"),
        ("attention_mode", "--attention-mode", str, "tempered", "tempered or uniform"),
        ("patience", "--patience", int, 50, "early-stopping patience"),
        ("radii", "--radii", str, "7.5,4.0,2.5", "neighborhood radii, decreasing"),
        ("sinkhorn_lambda", "--sinkhorn-lambda", float, 0.2, "transport regularization"),
        ("cap", "--cap", int, 48, "max points per transport set"),
    ],
    "eval": [
        ("data", "--data", str, None, "dataset root"),
        ("checkpoint", "--checkpoint", str, None, "checkpoint.json path"),
        ("split", "--split", str, "test", "dataset split to evaluate"),
        ("out", "--out", str, None, "output directory"),
    ],
    "ablate": [
        ("kind", "--kind", str, "radius", "radius or temperature"),
        ("data", "--data", str, None, "dataset root, or name=root;name=root"),
        ("out", "--out", str, None, "output directory"),
        ("epochs", "--epochs", int, 150, "training epochs per variant"),
        ("batch_size", "--batch-size", int, 16, "minibatch size"),
        ("lr", "--lr", float, 1e-3, "learning rate"),
        ("anchors", "--anchors", int, 32, "anchors per cloud"),
        ("tau", "--tau", float, 0.6, "attention temperature"),
        ("patience", "--patience", int, 50, "early-stopping patience"),
        ("seeds", "--seeds", str, "0,1,2", "training seeds to average"),
        ("taus", "--taus", str, "1.0,0.8,0.6,0.4", "temperatures for --kind temperature"),
        ("radii", "--radii", str, "7.5,4.0,2.5", "neighborhood radii, decreasing"),
    ],
    "mapsim": [
        ("out", "--out", str, None, "output directory"),
        ("detector", "--detector", str, "oracle", "oracle, random, or a checkpoint path"),
        ("frames", "--frames", int, 12, "frames per trajectory (>= 10)"),
        ("scene_points", "--scene-points", int, 1000, "points per frame"),
        ("rate", "--rate", float, None, "re-registration rate in [0, 1]"),
        ("threshold", "--threshold", float, None, "predicted-error threshold (m)"),
        ("sweep", "--sweep", str, None, "rate grid start:stop:step"),
        ("trajectories", "--trajectories", int, 1, "trajectories to average"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="misalign",
        description="Synthetic misalignment-regression pipeline: data, features, model, mapping.",
    )
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name, options in _OPTIONS.items():
        sub = subparsers.add_parser(name)
        for dest, flag, caster, _default, help_text in options + _COMMON:
            if caster is None:
                sub.add_argument(flag, dest=dest, action="store_true", default=None, help=help_text)
            else:
                # defaults resolve after the config file is merged
                sub.add_argument(flag, dest=dest, type=caster, default=None, help=help_text)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """default < config file < explicit flag, as one plain dict."""
    spec = _OPTIONS[args.subcommand] + _COMMON
    known = {dest for dest, *_ in spec}
    file_values = {}
    if getattr(args, "config", None):
        file_values = read_config_file(args.config)
        unknown = set(file_values) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for dest, _flag, _caster, default, _help in spec:
        cli_value = getattr(args, dest)
        if cli_value is not None and cli_value is not False:
            resolved[dest] = cli_value
        elif dest in file_values:
            resolved[dest] = file_values[dest]
        else:
            resolved[dest] = default
    return resolved


def _require(cfg: dict, key: str):
    if cfg.get(key) in (None, ""):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _scale_config(cfg: dict) -> ScaleConfig:
    kwargs = {"radii": _floats(cfg["radii"])}
    if "sinkhorn_lambda" in cfg:
        kwargs["sinkhorn_lambda"] = cfg["sinkhorn_lambda"]
    if "cap" in cfg:
        kwargs["max_neighborhood_points"] = cfg["cap"]
    return ScaleConfig(**kwargs)


def cmd_gen(cfg: dict) -> int:
    out = _require(cfg, "out")
    if cfg["pairs"] is not None:
        if cfg["pairs"] <= 0:
            raise UsageError("--pairs must be positive")
        n_pairs = cfg["pairs"]
        ratios = _floats(cfg["ratios"])
    else:
        counts = _ints(cfg["splits"])
        if len(counts) != 3 or min(counts) < 0 or sum(counts) <= 0:
            raise UsageError("--splits needs three nonnegative counts")
        n_pairs = sum(counts)
        ratios = tuple(c / n_pairs for c in counts)
    if cfg["noisy"] and cfg["mild"]:
        raise UsageError("--noisy and --mild are mutually exclusive")
    perturb = MILD_PERTURB if cfg["mild"] else PerturbSpec()
    if cfg["trans_sigma"] is not None or cfg["rot_sigma"] is not None:
        perturb = PerturbSpec(
            translation_sigma=_floats(cfg["trans_sigma"]) if cfg["trans_sigma"] else perturb.translation_sigma,
            rotation_sigma_deg=_floats(cfg["rot_sigma"]) if cfg["rot_sigma"] else perturb.rotation_sigma_deg,
            magnitude_range=perturb.magnitude_range,
        )
    scene = SceneSpec(
        n_points=cfg["points"],
        density_mode=cfg["density"],
        overlap_fraction=cfg["overlap"],
    )
    write_config_echo(out, "gen", cfg)
    manifest = build_dataset(
        out,
        n_pairs,
        split_ratios=ratios,
        scene_template=scene,
        perturb=perturb,
        register_with_icp=not cfg["no_icp"],
        master_seed=cfg["seed"],
    )
    labels = np.array([r.label for r in manifest.records])
    quantiles = np.percentile(labels, [0, 10, 50, 90, 100])
    print(f"wrote {len(manifest.records)} pairs under {out}")
    print(
        "label quantiles (m): "
        + " ".join(f"p{p}={q:.3f}" for p, q in zip((0, 10, 50, 90, 100), quantiles))
    )
    return 0


def cmd_features(cfg: dict) -> int:
    pair_dir = _require(cfg, "pair")
    out = _require(cfg, "out")
    if not os.path.isdir(pair_dir):
        raise FileNotFoundError(f"pair directory not found: {pair_dir}")
    root, name = os.path.split(os.path.abspath(pair_dir))
    from .synthdata import PairRecord

    with open(os.path.join(pair_dir, "meta.json")) as fh:
        meta = json.load(fh)
    record = PairRecord(
        pair_id=name, directory=name, scene_seed=meta.get("scene_seed", 0),
        pair_seed=meta.get("pair_seed", cfg["seed"]), split="n/a",
        label=meta["label"],
    )
    pair = load_pair(root, record)
    anchors = extract_pair_features(
        pair, cfg["anchors"], _scale_config(cfg), seed=record.pair_seed
    )
    out_dir = os.path.dirname(os.path.abspath(out)) or "."
    write_config_echo(out_dir, "features", cfg)
    write_feature_csv(out, anchors)
    print(f"wrote {len(anchors)} anchors ({cfg['anchors']} per cloud) to {out}")
    return 0


def _train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg.get("lr", 1e-3),
        seed=cfg["seed"] if seed is None else seed,
        n_anchors=cfg["anchors"],
        scale_config=_scale_config(cfg),
        tau=cfg["tau"],
        attention_mode=cfg.get("attention_mode", "tempered"),
        patience=cfg["patience"],
    )


def cmd_train(cfg: dict) -> int:
    data = _require(cfg, "data")
    out = _require(cfg, "out")
    manifest = load_manifest(data)  # FileNotFoundError -> exit 3
    try:
        train_cfg = _train_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_config_echo(out, "train", cfg)
    result = train(data, train_cfg)
    checkpoint_path = os.path.join(out, "checkpoint.json")
    save_checkpoint(
        checkpoint_path,
        result.params,
        train_cfg.scale_config,
        result.feature_mean,
        result.feature_std,
        train_cfg.n_anchors,
        metadata={
            "train_config": train_cfg.to_dict(),
            "best_epoch": result.best_epoch,
            "best_val_rmse": result.best_val_rmse,
            "dataset_config": manifest.config,
        },
    )
    write_csv(
        os.path.join(out, "history.csv"),
        ["epoch", "train_loss", "val_rmse"],
        [[h["epoch"], float(h["train_loss"]), float(h["val_rmse"])] for h in result.history],
    )
    print(
        f"trained {result.params.n_parameters} parameters; "
        f"best val RMSE {result.best_val_rmse:.6f} at epoch {result.best_epoch}; "
        f"checkpoint at {checkpoint_path}"
    )
    return 0


def cmd_eval(cfg: dict) -> int:
    data = _require(cfg, "data")
    ckpt_path = _require(cfg, "checkpoint")
    out = _require(cfg, "out")
    if not os.path.exists(ckpt_path):
        raise FileNotFoundError(f"checkpoint not found: {ckpt_path}")
    load_manifest(data)
    checkpoint = load_checkpoint(ckpt_path)
    write_config_echo(out, "eval", cfg)
    report = evaluate(data, checkpoint, split=cfg["split"])
    write_json_atomic(os.path.join(out, "eval.json"), report.to_dict())
    write_csv(
        os.path.join(out, "predictions.csv"),
        ["label", "prediction"],
        [[float(l), float(p)] for l, p in report.rows],
    )
    r2_text = "undefined" if report.to_dict()["r_squared"] is None else f"{report.r_squared:.6f}"
    print(
        f"{cfg['split']}: n={report.n_samples} rmse={report.rmse:.6f} "
        f"mae={report.mae:.6f} r2={r2_text}"
    )
    return 0


def _parse_datasets(text: str) -> dict:
    datasets = {}
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" in chunk:
            name, _, root = chunk.partition("=")
            datasets[name.strip()] = root.strip()
        else:
            datasets[os.path.basename(os.path.normpath(chunk)) or chunk] = chunk
    if not datasets:
        raise UsageError("--data must name at least one dataset")
    return datasets


def cmd_ablate(cfg: dict) -> int:
    out = _require(cfg, "out")
    datasets = _parse_datasets(_require(cfg, "data"))
    for root in datasets.values():
        load_manifest(root)
    try:
        base = _train_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_config_echo(out, "ablate", cfg)
    if cfg["kind"] == "radius":
        seeds = _ints(cfg["seeds"])
        rows = ablate_radius(datasets, base, seeds=seeds)
        header = ["dataset", "variant", "n_params", "rmse_mean"] + [
            f"rmse_seed{s}" for s in seeds
        ]
        csv_rows = [
            [r["dataset"], r["variant"], r["n_params"], float(r["rmse_mean"])]
            + [float(v) for v in r["rmse_per_seed"]]
            for r in rows
        ]
        write_csv(os.path.join(out, "ablation_radius.csv"), header, csv_rows)
        for r in rows:
            print(f"{r['dataset']:>12s} {r['variant']:>12s} rmse={r['rmse_mean']:.6f}")
    elif cfg["kind"] == "temperature":
        if len(datasets) != 1:
            raise UsageError("temperature ablation takes exactly one dataset")
        (root,) = datasets.values()
        rows = ablate_temperature(root, base, taus=_floats(cfg["taus"]))
        write_csv(
            os.path.join(out, "ablation_temperature.csv"),
            ["tau", "rmse", "best_val_rmse"],
            [[float(r["tau"]), float(r["rmse"]), float(r["best_val_rmse"])] for r in rows],
        )
        for r in rows:
            print(f"tau={r['tau']:.2f} rmse={r['rmse']:.6f}")
    else:
        raise UsageError(f"unknown ablation kind {cfg['kind']!r}")
    return 0


def cmd_mapsim(cfg: dict) -> int:
    out = _require(cfg, "out")
    detector = cfg["detector"]
    if detector not in ("oracle", "random"):
        if not os.path.exists(detector):
            raise FileNotFoundError(f"detector checkpoint not found: {detector}")
        detector = load_checkpoint(detector)
    rate = cfg["rate"]
    threshold = cfg["threshold"]
    if rate is not None and threshold is not None:
        raise UsageError("pass at most one of --rate and --threshold")
    if rate is None and threshold is None:
        threshold = DEFAULT_THRESHOLD
    sweep = parse_rate_grid(cfg["sweep"]) if cfg["sweep"] else None
    write_config_echo(out, "mapsim", cfg)
    n_traj = cfg["trajectories"]
    if n_traj <= 0:
        raise UsageError("--trajectories must be positive")
    reports = []
    for t in range(n_traj):
        spec = TrajectorySpec(
            seed=cfg["seed"] + t,
            n_frames=cfg["frames"],
            scene=SceneSpec(n_points=cfg["scene_points"]),
        )
        reports.append(
            run_mapsim(
                spec, detector=detector, rate=rate, threshold=threshold,
                sweep=sweep, detector_seed=cfg["seed"] + t,
            )
        )
    final_errors = [r.final_error for r in reports]
    payload = {
        "mean_final_error": float(np.mean(final_errors)),
        "runs": [r.to_dict() for r in reports],
    }
    write_json_atomic(os.path.join(out, "mapsim.json"), payload)
    if sweep is not None:
        curves = np.array([[e for _, e in r.sweep] for r in reports])
        mean_curve = curves.mean(axis=0)
        write_csv(
            os.path.join(out, "sweep.csv"),
            ["rate", "final_error"],
            [[float(rate_), float(err)] for rate_, err in zip(sweep, mean_curve)],
        )
    mode = f"rate={rate}" if rate is not None else f"threshold={threshold}"
    print(
        f"mapsim {mode} over {n_traj} trajectories: "
        f"mean final error {float(np.mean(final_errors)):.4f} m"
    )
    return 0


_HANDLERS = {
    "gen": cmd_gen,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "mapsim": cmd_mapsim,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = resolve_options(args)
        if cfg["jobs"] < 1:
            raise UsageError("--jobs must be at least 1")
        return _HANDLERS[args.subcommand](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
