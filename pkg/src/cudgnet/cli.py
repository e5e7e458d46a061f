"""Command line entry point: ``cudgnet {train,eval,ablate,uncertainty}``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import yaml

from . import data as data_mod
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    ablation_ladder,
    ablation_table,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    train,
)
from .uncertainty import calibrate_sigma_S, severity_monotonicity, uncertainty_protocol, write_comparison

logger = logging.getLogger("cudgnet")

PROFILES = {
    "smoke": dict(subset_size=500, epochs=1, batch_size=64, depth=10, widen_factor=1, proj_dim=32),
    "desk": dict(subset_size=5000, epochs=20, batch_size=128, depth=16, widen_factor=4),
    "desk-cpu": dict(subset_size=5000, epochs=20, batch_size=128, depth=16, widen_factor=2),
}

# CLI flag -> config key
OVERRIDES = {
    "seed": "seed",
    "subset_size": "subset_size",
    "epochs": "epochs",
    "beta": "beta",
    "w1": "w1",
    "k_max": "k_max",
    "temperature": "temperature",
    "data_root": "data_root",
    "device": "device",
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config and run directories


def flatten_sections(d: dict, path: str = "") -> dict:
    """Merge nested sections into one flat mapping; duplicate keys are an error."""
    flat = {}
    for k, v in (d or {}).items():
        where = f"{path}.{k}" if path else str(k)
        if isinstance(v, dict):
            for kk, vv in flatten_sections(v, where).items():
                if kk in flat:
                    raise UsageError(f"config key {kk!r} set twice (again under {where})")
                flat[kk] = vv
        else:
            if k in flat:
                raise UsageError(f"config key {k!r} set twice")
            flat[k] = v
    return flat


def load_config(path=None, profile=None, overrides=None) -> TrainConfig:
    values = dict(PROFILES[profile]) if profile else {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError(f"config {path} must be a mapping of keys/sections")
        values.update(flatten_sections(raw))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return TrainConfig.from_dict(values)
    except KeyError as exc:
        raise UsageError(f"invalid config key: {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from exc


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=10, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def make_run_dir(run_dir, runs_root, tag, force) -> Path:
    if run_dir is None:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path(runs_root) / f"{stamp}-{tag}"
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise UsageError(f"output directory {run_dir} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(run_dir)
    for sub in ("checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, command: str, config: dict | None, seed, started, outputs, status) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "git_describe": git_describe(),
        "seed": seed,
        "start": started,
        "end": datetime.now(timezone.utc).isoformat(),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "status": status,
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# ---------------------------------------------------------------------------
# commands


def _overrides(args) -> dict:
    return {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}


def _run(args, command, tag, body):
    """Create the run directory, execute ``body(run_dir, outputs)`` and always write the manifest."""
    started = datetime.now(timezone.utc).isoformat()
    run_dir = make_run_dir(args.run_dir, args.runs_root, tag, args.force)
    outputs: dict = {}
    state = {"config": None, "seed": None}
    status = "failed"
    try:
        body(run_dir, outputs, state)
        missing = [k for k, p in outputs.items() if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"expected outputs were not written: {missing}")
        status = "ok"
    finally:
        write_manifest(run_dir, command, state["config"], state["seed"], started, outputs, status)
    print(run_dir)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))

    def body(run_dir, outputs, state):
        state["config"], state["seed"] = cfg.to_dict(), cfg.seed
        (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        trainer = train(cfg, run_dir=run_dir)
        if cfg.use_generator:
            # source reference for the uncertainty score, stored with the final weights
            source_val = data_mod.load_source(cfg.data_root, None, cfg.seed, train=False)
            trainer.sigma_S_ref = calibrate_sigma_S(trainer.model, source_val, cfg.eval_batch_size, cfg.device)
            trainer.save(run_dir / "checkpoints" / "last.pt")
        outputs.update(checkpoint=run_dir / "checkpoints" / "last.pt", log=trainer.log_path,
                       config=run_dir / "config.yaml")
        if args.evaluate:
            specs = data_mod.corruption_specs(severities=cfg.eval_severities)
            report = evaluate(trainer.model, specs, cfg.data_root, cfg.eval_batch_size, cfg.device)
            csv_path, json_path = report.write(run_dir / "reports")
            outputs.update(eval_csv=csv_path, eval_json=json_path)

    return _run(args, "train", args.tag or "train", body)


def _parse_corruptions(text):
    if not text or text == "all":
        return list(data_mod.CORRUPTIONS)
    names = [n.strip() for n in text.split(",") if n.strip()]
    unknown = [n for n in names if n not in data_mod.CORRUPTIONS]
    if unknown:
        raise UsageError(f"unknown corruption(s) {', '.join(unknown)}; valid names: "
                         f"{', '.join(sorted(data_mod.CORRUPTIONS))}")
    return names


def _parse_severities(text):
    try:
        sev = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --severities {text!r}") from exc
    if not sev or any(s not in data_mod.SEVERITIES for s in sev):
        raise UsageError("severities must be a comma list of integers in 1..5")
    return sev


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    names = _parse_corruptions(args.corruptions)
    severities = _parse_severities(args.severities)
    ckpt = _checkpoint(args.checkpoint)

    def body(run_dir, outputs, state):
        state["config"], state["seed"] = ckpt["config"], ckpt["config"].get("seed")
        model, _ = model_from_checkpoint(ckpt, args.device or "cpu")
        specs = data_mod.corruption_specs(names, severities)
        root = args.data_root or ckpt["config"].get("data_root")
        report = evaluate(model, specs, root, args.batch_size, args.device or "cpu")
        csv_path, json_path = report.write(run_dir / "reports")
        outputs.update(eval_csv=csv_path, eval_json=json_path)

    return _run(args, "eval", args.tag or "eval", body)


def cmd_uncertainty(args) -> int:
    names = _parse_corruptions(args.domains)
    severities = _parse_severities(args.severities)
    ckpt = _checkpoint(args.checkpoint)

    def body(run_dir, outputs, state):
        state["config"], state["seed"] = ckpt["config"], ckpt["config"].get("seed")
        device = args.device or "cpu"
        model, _ = model_from_checkpoint(ckpt, device)
        root = args.data_root or ckpt["config"].get("data_root")
        sigma_S = ckpt.get("sigma_S_ref")
        if sigma_S is None:
            source_val = data_mod.load_source(root, args.calib_size, ckpt["config"].get("seed", 0), train=False)
            sigma_S = calibrate_sigma_S(model, source_val, args.batch_size, device)
        rows = uncertainty_protocol(model, data_mod.corruption_specs(names, severities), sigma_S, root=root,
                                    n_samples=args.mc_samples, batch_size=args.batch_size,
                                    max_batches=args.max_batches, device=device)
        summary = write_comparison(rows, run_dir / "reports")
        summary["sigma_S_ref"] = sigma_S
        summary["severity_spearman"] = severity_monotonicity(rows)
        (run_dir / "reports" / "uncertainty_summary.json").write_text(json.dumps(summary, indent=2))
        outputs.update(csv=summary["csv"], figure=summary["figure"],
                       summary=run_dir / "reports" / "uncertainty_summary.json")

    return _run(args, "uncertainty", args.tag or "uncertainty", body)


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.profile, _overrides(args))

    def body(run_dir, outputs, state):
        state["config"], state["seed"] = cfg.to_dict(), cfg.seed
        (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
        results = ablation_ladder(cfg, run_dir=run_dir / "variants")
        table = ablation_table(results)
        csv_path = run_dir / "reports" / "ablation.csv"
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(table[0]))
            w.writeheader()
            w.writerows(table)
        json_path = run_dir / "reports" / "ablation.json"
        json_path.write_text(json.dumps({"rows": table, "reports": {r.name: r.report.to_dict() for r in results}},
                                        indent=2))
        for line in format_table(table):
            print(line)
        outputs.update(ablation_csv=csv_path, ablation_json=json_path)

    return _run(args, "ablate", args.tag or "ablate", body)


def format_table(rows):
    cols = list(rows[0])
    yield " | ".join(f"{c:>24}" if i == 0 else f"{c:>8}" for i, c in enumerate(cols))
    for r in rows:
        yield " | ".join(f"{r[c]:>24}" if i == 0 else f"{r[c]:8.2f}" for i, c in enumerate(cols))


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--run-dir", default=None, help="explicit output directory")
    p.add_argument("--runs-root", default="runs", help="parent of timestamped run directories")
    p.add_argument("--tag", default=None)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--data-root", default=None, help=f"dataset directory (default ${data_mod.DATA_ROOT_ENV})")
    p.add_argument("--device", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p):
    p.add_argument("--config", default=None, help="YAML config; nested sections are merged")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--w1", type=float)
    p.add_argument("--k-max", type=int)
    p.add_argument("--temperature", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cudgnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the CIFAR-10 source domain")
    _training_flags(p)
    _common(p)
    p.add_argument("--evaluate", action="store_true", help="evaluate on CIFAR-10-C after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on CIFAR-10-C")
    p.add_argument("checkpoint")
    p.add_argument("--corruptions", default="all", help="comma list of corruption names or 'all'")
    p.add_argument("--severities", default="1,2,3,4,5")
    p.add_argument("--batch-size", type=int, default=500)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uncertainty", help="single-pass uncertainty vs the sampling baseline")
    p.add_argument("checkpoint")
    p.add_argument("--domains", default="all", help="comma list of corruption names or 'all'")
    p.add_argument("--severities", default="1,2,3,4,5")
    p.add_argument("--mc-samples", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--max-batches", type=int, default=None, help="batches scored per domain (default: all)")
    p.add_argument("--calib-size", type=int, default=None, help="source validation images for sigma(S)")
    _common(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("ablate", help="train and evaluate the five cumulative ablation variants")
    _training_flags(p)
    _common(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, TrainingDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
