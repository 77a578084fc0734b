"""Command-line front end.

Output layout under ``--out``::

    config.json          resolved configuration
    data/                initial labeled data D0
    active/              optimize: surrogates, run logs, checkpoint, report.json
    baseline/            baseline: same, trained on ancestral data of equal budget
    comparison.csv       paired active/baseline objective, once both exist
    evaluate/            evaluate: evaluation.json and the property scatter
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .active import DataStore, _oracle, generate_ancestral, outer_loop, resolve_objective
from .config import ConfigError, RunConfig, derive_seed, load_config
from .evaluate import evaluate_objective, sample_properties
from .plotting import export_plots
from .surrogate import TrainingDiverged
from .vbem import NumericalError, ObjectiveSpec

logger = logging.getLogger("psinvert")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def generate_data(cfg: RunConfig, out: Path, threads: int = 1) -> DataStore:
    store = DataStore.create(out / "data", cfg.n_pixels, cfg.d_kappa, cfg.material, cfg.to_json())
    xs, ys = generate_ancestral(cfg, range(cfg.n0), _oracle(cfg.case, cfg.material, threads))
    store.add_shard(xs, ys, step=0, source="ancestral", seed=cfg.seed)
    return store


def _initial_store(cfg, out, threads) -> DataStore:
    path = out / "data"
    if (path / "manifest.json").exists():
        store = DataStore.open(path)
        if store.config != cfg.to_json():
            raise ConfigError(f"{path} was generated with a different configuration")
        return store
    logger.info("no initial data under %s; generating it", path)
    return generate_data(cfg, out, threads)


def _scatter_csv(path: Path, clouds: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["which", "kappa1", "kappa2"])
    for name, cloud in clouds.items():
        for k in cloud:
            w.writerow([name, repr(float(k[0])), repr(float(k[1]))])
    path.write_text(buf.getvalue())


def _finish(report: dict, run_dir: Path, cfg: RunConfig, threads: int) -> dict:
    """MC reference evaluation at the initial and optimized parameters."""
    objective = resolve_objective(report["objective"], np.zeros((1, cfg.d_kappa)))
    targets = None if report["targets"] is None else np.asarray(report["targets"])
    clouds, evaluation = {}, {}
    for name, key in (("phi0", "phi0"), ("phi_star", "phi_star")):
        kappa = sample_properties(report[key], cfg, cfg.eval_samples, threads)
        clouds[name] = kappa
        evaluation[name] = evaluate_objective(kappa, objective, targets)
    report["evaluation"] = evaluation
    _scatter_csv(run_dir / "kappa_scatter.csv", clouds)
    _dump(run_dir / "report.json", report)
    return report


def _comparison(out: Path, seed: int) -> None:
    paths = [out / "active" / "report.json", out / "baseline" / "report.json"]
    if not all(p.exists() for p in paths):
        return
    a, b = (json.loads(p.read_text()) for p in paths)
    ea, eb = a["evaluation"]["phi_star"], b["evaluation"]["phi_star"]
    header = ["seed", "active_objective", "active_se", "baseline_objective", "baseline_se", "difference",
              "active_labels", "baseline_labels"]
    row = [seed, ea["estimate"], ea["se"], eb["estimate"], eb["se"], ea["estimate"] - eb["estimate"],
           a["n_labels"], b["n_labels"]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    (out / "comparison.csv").write_text(buf.getvalue())


def optimize(cfg: RunConfig, out: Path, threads: int = 1, resume=None) -> dict:
    d0 = _initial_store(cfg, out, threads)
    run_dir = out / "active"
    if resume:
        store = DataStore.open(run_dir / "data")
    else:
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True)
        shutil.copytree(d0.root, run_dir / "data")
        store = DataStore.open(run_dir / "data")
    report = outer_loop(cfg, store, run_dir, threads=threads, resume=resume)
    report = _finish(report, run_dir, cfg, threads)
    _comparison(out, cfg.seed)
    return report


def baseline(cfg: RunConfig, out: Path, threads: int = 1, resume=None) -> dict:
    """Random-acquisition control: the full label budget drawn ancestrally, then no acquisition."""
    d0 = _initial_store(cfg, out, threads)
    budget = cfg.n0 + cfg.n_steps * cfg.n_add
    run_dir = out / "baseline"
    if resume:
        store = DataStore.open(run_dir / "data")
    else:
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True)
        shutil.copytree(d0.root, run_dir / "data")
        store = DataStore.open(run_dir / "data")
        if budget > cfg.n0:
            xs, ys = generate_ancestral(cfg, range(cfg.n0, budget), _oracle(cfg.case, cfg.material, threads),
                                        seen=store.hashes)
            store.add_shard(xs, ys, step=0, source="ancestral", seed=cfg.seed)
    flat = replace(cfg, n_steps=0, objective=resolve_objective(cfg.objective, d0.labels).to_json())
    report = outer_loop(flat, store, run_dir, threads=threads, resume=resume)
    report["config"] = cfg.to_json()
    report["budget"] = {"labels": len(store), "active_budget": budget, "equal": len(store) == budget}
    if len(store) != budget:
        raise RuntimeError(f"baseline holds {len(store)} labels, expected {budget}")
    report = _finish(report, run_dir, cfg, threads)
    _comparison(out, cfg.seed)
    return report


def evaluate(cfg: RunConfig, out: Path, phi, objective: ObjectiveSpec, targets=None, n_samples=None,
             threads: int = 1) -> dict:
    n = n_samples or cfg.eval_samples
    kappa = sample_properties(phi, cfg, n, threads)
    result = evaluate_objective(kappa, objective, targets)
    result["phi"] = np.asarray(phi).tolist()
    result["objective"] = objective.to_json()
    dest = out / "evaluate"
    dest.mkdir(parents=True, exist_ok=True)
    _dump(dest / "evaluation.json", result)
    _scatter_csv(dest / "kappa_scatter.csv", {"phi": kappa})
    return result


def _load_phi(args, cfg, out):
    """phi, objective and targets for evaluate: from a report, or a phi file plus an explicit objective."""
    src = Path(args.phi) if args.phi else out / "active" / "report.json"
    if not src.exists():
        raise ConfigError(f"no parameters to evaluate: {src} does not exist")
    obj = json.loads(src.read_text())
    if isinstance(obj, list):
        phi = obj
        spec = dict(cfg.objective)
        if spec["variant"] == "O2" and "target_mean" not in spec:
            raise ConfigError("evaluating a bare phi needs an explicit objective in the config")
        if spec["variant"] == "O1-box" and "lo" not in spec:
            raise ConfigError("evaluating a bare phi needs explicit box bounds in the config")
        objective = resolve_objective(spec, np.zeros((1, cfg.d_kappa)))
        targets = None
        if objective.variant == "O2":
            targets = objective.draw_targets(np.random.default_rng(derive_seed(cfg.seed, "targets")))
        return phi, objective, targets
    phi = obj["phi_star"]
    objective = resolve_objective(obj["objective"], np.zeros((1, cfg.d_kappa)))
    targets = obj.get("targets")
    return phi, objective, None if targets is None else np.asarray(targets)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psinvert", description="Stochastic process-structure-property inversion")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate-data", "label the initial ancestral dataset"),
                        ("optimize", "active-learning optimization"),
                        ("baseline", "random-acquisition control at equal budget"),
                        ("evaluate", "Monte Carlo reference objective at given parameters"),
                        ("export-plots", "write plot-ready series and figures for a run directory")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration (desk defaults if omitted)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for the FEM oracle")
        sp.add_argument("--resume", help="checkpoint to resume from (optimize/baseline)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "evaluate":
            sp.add_argument("--phi", help="JSON list of process parameters or a report.json")
            sp.add_argument("--samples", type=int, help="number of Monte Carlo samples")
        if name == "export-plots":
            sp.add_argument("--run", help="run directory holding report.json (default <out>/active)")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        cfg = replace(cfg, seed=args.seed)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(args.out)
    try:
        if args.command == "export-plots":
            for path in export_plots(Path(args.run) if args.run else out / "active"):
                print(path)
            return 0
        cfg = _config(args)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.dumps())
        if args.command == "generate-data":
            store = generate_data(cfg, out, args.threads)
            print(json.dumps({"data": str(store.root), "count": len(store)}))
        elif args.command == "optimize":
            report = optimize(cfg, out, args.threads, args.resume)
            print(json.dumps({"phi_star_dim": len(report["phi_star"]), "evaluation": report["evaluation"]}))
        elif args.command == "baseline":
            report = baseline(cfg, out, args.threads, args.resume)
            print(json.dumps({"budget": report["budget"], "evaluation": report["evaluation"]}))
        elif args.command == "evaluate":
            if args.samples is not None and args.samples < 2:
                raise ConfigError("--samples must be at least 2")
            phi, objective, targets = _load_phi(args, cfg, out)
            if len(phi) != cfg.sdf.n_rbf:
                raise ConfigError(f"phi has {len(phi)} entries, config expects {cfg.sdf.n_rbf}")
            res = evaluate(cfg, out, phi, objective, targets, args.samples, args.threads)
            print(json.dumps({k: res[k] for k in ("estimate", "se", "n")}))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
