"""Command-line entry point: ``dgnn {inspect,run,estimate,report}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .correction import Source, estimate_exact
from .errors import ConfigError, DGNNError, FormatError, IngestError, SingularMatrixError
from .experiment import (
    ExperimentConfig,
    ExperimentResult,
    Variant,
    estimate_correction,
    kfold_split,
    noisy_labels_for,
    run_experiment,
    write_results,
)
from .gin import GinConfig
from .graph import (
    FeatureScheme,
    build_features,
    dataset_checksum,
    dataset_summary,
    load_dataset,
    parse_tu_dataset,
)
from .noise import build_noise_matrix, write_noise_csv

logger = logging.getLogger("dgnn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flag dest -> (ExperimentConfig key, GinConfig key or None)
_GIN_FLAGS = {
    "num_layers": "num_layers",
    "num_mlp_layers": "num_mlp_layers",
    "hidden_dim": "hidden_dim",
    "learn_eps": "learn_eps",
    "readout": "readout",
    "batch_norm": "batch_norm",
    "dropout": "dropout",
}
_CONFIG_FLAGS = {
    "dataset": "dataset",
    "variant": "variant",
    "noise": "noise",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "folds": "k_folds",
    "seeds": "seeds",
    "lr": "learning_rate",
    "noise_scope": "noise_scope",
    "split_seed": "split_seed",
    "blend": "blend",
    "feature_scheme": "feature_scheme",
    "degree_cap": "degree_cap",
    "anchor_ids": "anchor_ids",
    "iters_per_epoch": "iters_per_epoch",
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data-root", default=None,
                   help="directory holding TU datasets (default: $DGNN_DATA_ROOT or .)")
    p.add_argument("--dataset", default=None, help="dataset name, e.g. MUTAG or PROTEINS")
    p.add_argument("--feature-scheme", default=None,
                   choices=["auto", "node-labels", "degree", "constant"])
    p.add_argument("--degree-cap", type=int, default=None)


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--noise", type=float, default=None, help="symmetric noise rate n")
    p.add_argument("--seeds", type=_int_list, default=None, help="e.g. 0,1,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--iters-per-epoch", type=int, default=None,
                   help="random mini-batches per epoch; 0 walks full passes over the data")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--num-layers", type=int, default=None)
    p.add_argument("--num-mlp-layers", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--learn-eps", action="store_true", default=None)
    p.add_argument("--readout", choices=["sum-concat", "sum-last"], default=None)
    p.add_argument("--batch-norm", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--noise-scope", choices=["per-fold", "global"], default=None)
    p.add_argument("--blend", type=float, default=None,
                   help="mix estimated C toward the identity: (1-b)C + bI")
    p.add_argument("--anchor-ids", type=_int_list, default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dgnn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="print dataset summary")
    _add_data_flags(p)

    p = sub.add_parser("run", help="cross-validated training run")
    _add_data_flags(p)
    _add_training_flags(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    p.add_argument("--out", type=Path, default=None, help="run directory")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--from-manifest", type=Path, default=None,
                   help="replay the configuration stored in a run manifest")

    p = sub.add_parser("estimate", help="estimate the correction matrix for one fold")
    _add_data_flags(p)
    _add_training_flags(p)
    p.add_argument("--method", choices=[s.value for s in Source], required=True)
    p.add_argument("--num-classes", type=int, default=None,
                   help="class count for --method exact without a dataset")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="write the estimator JSON here")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="aggregate run directories into a comparison table")
    p.add_argument("--runs", type=Path, nargs="*", default=[])
    p.add_argument("--out", type=Path, default=None, help="directory for report.md / report.csv")
    p.add_argument("--force", action="store_true")
    return parser


# --- configuration -------------------------------------------------------------------


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def resolve_config(args: argparse.Namespace, base: dict | None = None) -> ExperimentConfig:
    """Merge defaults < ``base`` (config file / manifest) < explicit CLI flags."""
    merged = ExperimentConfig().to_dict()
    layers = [base or {}]
    if getattr(args, "config", None) is not None:
        layers.append(_read_json(args.config))
    flags: dict = {"gin": {}}
    for dest, key in _CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flags[key] = value
    for dest, key in _GIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            flags["gin"][key] = value
    layers.append(flags)
    for layer in layers:
        for key, value in layer.items():
            if key == "gin":
                merged["gin"].update(value or {})
            else:
                merged[key] = value
    merged["data_root"] = _data_root(args, merged.get("data_root"))
    try:
        merged["gin"] = GinConfig.from_dict(merged["gin"])
        return ExperimentConfig.from_dict(merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _data_root(args, fallback: str | None = None) -> str:
    if getattr(args, "data_root", None):
        return str(args.data_root)
    return fallback or os.environ.get("DGNN_DATA_ROOT", ".")


def _prepare_out(out: Path | None, force: bool) -> None:
    if out is not None and out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _canonical(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# --- commands -------------------------------------------------------------------


def cmd_inspect(args) -> int:
    raw = parse_tu_dataset(_data_root(args), args.dataset or "MUTAG")
    summary = dataset_summary(raw)
    if args.feature_scheme not in (None, "auto"):
        ds = build_features(raw, FeatureScheme.parse(args.feature_scheme, args.degree_cap))
        print(f"{raw.name}: {summary}, feature dim {ds.feature_dim}")
    else:
        print(f"{raw.name}: {summary}")
    return EXIT_OK


def cmd_run(args) -> int:
    base = None
    if args.from_manifest is not None:
        base = _read_json(args.from_manifest).get("config")
        if base is None:
            raise ConfigError(f"{args.from_manifest} has no config section")
    config = resolve_config(args, base)
    out = args.out or Path(f"runs/{config.dataset}-{config.variant.value}-n{config.noise}")
    _prepare_out(out, args.force)
    dataset = load_dataset(config.data_root, config.dataset, config.scheme())
    out.mkdir(parents=True, exist_ok=True)

    manifest = {
        "tool": "dgnn",
        "version": __version__,
        "config": config.to_dict(),
        "seeds": list(config.seeds),
        "dataset_checksum": dataset_checksum(config.data_root, config.dataset),
        "started_at": _now(),
        "status": "running",
    }
    (out / "manifest.json").write_text(_canonical(manifest))

    noise_dir = out / "noise"
    noise_dir.mkdir(exist_ok=True)
    for fold, (tr, _) in enumerate(kfold_split(dataset, config.k_folds, config.split_seed)):
        for seed in config.seeds:
            noisy = noisy_labels_for(dataset, config, tr, fold, seed)
            write_noise_csv(noise_dir / f"fold{fold}_seed{seed}.csv", tr, dataset.labels[tr], noisy)

    result = run_experiment(config, dataset, jobs=args.jobs)
    paths = write_results(result, out)
    estimators = [
        {"fold": r.fold, "seed": r.seed, **r.estimator} for r in result.records if r.estimator
    ]
    if estimators:
        paths["estimators"] = out / "estimators.json"
        paths["estimators"].write_text(_canonical(estimators))

    manifest.update(
        finished_at=_now(),
        status="partial" if result.partial else "ok",
        failures=[
            {"fold": r.fold, "seed": r.seed, "error_type": r.error_type, "error": r.error}
            for r in result.failures
        ],
        outputs={k: v.name for k, v in paths.items()},
        mean_test_accuracy=result.mean_test_accuracy,
        std_test_accuracy=result.std_test_accuracy,
    )
    if result.failures and not result.completed:
        manifest["status"] = "failed"
    (out / "manifest.json").write_text(_canonical(manifest))

    print(f"{config.dataset} {config.variant.display} n={config.noise}: "
          f"test accuracy {result.mean_test_accuracy:.4f} ± {result.std_test_accuracy:.4f} "
          f"({len(result.completed)} runs) -> {out}")
    for r in result.failures:
        print(f"fold {r.fold} seed {r.seed} failed: {r.error_type}: {r.error}", file=sys.stderr)
    return EXIT_RUNTIME if result.failures else EXIT_OK


def cmd_estimate(args) -> int:
    config = resolve_config(args)
    if args.out is not None and args.out.exists() and not args.force:
        raise ConfigError(f"{args.out} exists; pass --force to overwrite")
    if args.method == "exact" and args.num_classes is not None:
        noise = build_noise_matrix(args.num_classes, config.noise)
        payload = {"dataset": None, **estimate_exact(noise, config.blend).diagnostics(noise)}
    else:
        dataset = load_dataset(config.data_root, config.dataset, config.scheme())
        splits = kfold_split(dataset, config.k_folds, config.split_seed)
        if not 0 <= args.fold < len(splits):
            raise ConfigError(f"fold must be in [0, {len(splits)})")
        tr, te = splits[args.fold]
        seed = config.seeds[0]
        noisy = noisy_labels_for(dataset, config, tr, args.fold, seed)
        model_seed = int(np.random.SeedSequence([seed, args.fold]).generate_state(1)[0])
        correction, _ = estimate_correction(args.method, config, dataset, tr, te, noisy, model_seed)
        noise = build_noise_matrix(dataset.num_classes, config.noise)
        payload = {"dataset": config.dataset, "fold": args.fold, "seed": seed,
                   **correction.diagnostics(noise)}
    payload["noise"] = config.noise
    payload["N"] = noise.entries.tolist()
    text = _canonical(payload)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    print("C =")
    print(np.array2string(np.asarray(payload["C"]), precision=4, suppress_small=True))
    print(f"||C - N||_1 = {payload['l1_distance']:.4f}")
    print(text, end="")
    return EXIT_OK


def _load_run(path: Path) -> tuple[dict, ExperimentResult]:
    manifest = _read_json(path / "manifest.json")
    result = ExperimentResult.from_dict(_read_json(path / "results.json"))
    return manifest, result


def build_report(run_dirs: Sequence[Path]) -> tuple[str, str]:
    """Markdown and CSV comparison tables over run directories."""
    errors: list[str] = []
    notes: list[str] = []
    latest: dict[tuple[str, str, float], tuple[str, ExperimentResult, Path]] = {}
    for path in run_dirs:
        try:
            manifest, result = _load_run(path)
        except (DGNNError, KeyError, TypeError, ValueError, OSError) as exc:
            errors.append(f"{path}: {type(exc).__name__}: {exc}")
            continue
        cfg = result.config
        key = (cfg.dataset, cfg.variant.value, cfg.noise)
        stamp = manifest.get("finished_at") or manifest.get("started_at") or ""
        if key in latest:
            prev_stamp, _, prev_path = latest[key]
            keep_new = stamp >= prev_stamp
            dropped = prev_path if keep_new else path
            notes.append(f"duplicate run for {key[0]}/{key[1]}/n={key[2]}: ignored {dropped}")
            if not keep_new:
                continue
        latest[key] = (stamp, result, path)

    noises = sorted({k[2] for k in latest})
    order = {v.value: i for i, v in enumerate(Variant)}
    rows = sorted({(k[0], k[1]) for k in latest}, key=lambda r: (r[0], order.get(r[1], 99)))

    def cell(ds, var, n):
        hit = latest.get((ds, var, n))
        if hit is None:
            return None
        res = hit[1]
        return res.mean_test_accuracy, res.std_test_accuracy, len(res.completed)

    md = ["| Dataset | Variant | " + " | ".join(f"n={n}" for n in noises) + " |",
          "|---|---|" + "---|" * len(noises)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "variant", "noise", "mean", "std", "runs", "improved"])
    for ds, var in rows:
        cells = []
        for n in noises:
            c = cell(ds, var, n)
            if c is None:
                cells.append("-")
                continue
            mean, std, runs = c
            base = cell(ds, Variant.GIN.value, n)
            improved = var != Variant.GIN.value and base is not None and mean > base[0]
            text = f"{mean:.4f} ± {std:.4f}"
            cells.append(f"**{text}**" if improved else text)
            writer.writerow([ds, var, repr(n), repr(mean), repr(std), runs, int(improved)])
        md.append(f"| {ds} | {Variant(var).display} | " + " | ".join(cells) + " |")
    md.append("")
    md.append("Bold marks a mean test accuracy above the GIN row for the same dataset and noise rate.")
    if notes:
        md += ["", "## Notes", *[f"- {n}" for n in notes]]
    if errors:
        md += ["", "## Errors", *[f"- {e}" for e in errors]]
    return "\n".join(md) + "\n", buf.getvalue()


def cmd_report(args) -> int:
    _prepare_out(args.out, args.force)
    markdown, table = build_report(args.runs)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.md").write_text(markdown)
        (args.out / "report.csv").write_text(table)
    print(markdown, end="")
    return EXIT_OK


_COMMANDS = {"inspect": cmd_inspect, "run": cmd_run, "estimate": cmd_estimate, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SingularMatrixError, DGNNError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
