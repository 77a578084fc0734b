"""Plot-ready series and figures from a finished run directory (no recomputation)."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["ELBO_COLUMNS", "BUDGET_COLUMNS", "SCATTER_COLUMNS", "export_plots"]

ELBO_COLUMNS = ["step", "iteration", "phase", "elbo", "elbo_se", "stage", "t", "phi_norm"]
BUDGET_COLUMNS = ["step", "n_labels", "surrogate_objective", "surrogate_objective_se"]
SCATTER_COLUMNS = ["which", "kappa1", "kappa2"]


def _fmt(v):
    return "" if v is None else (repr(float(v)) if isinstance(v, float) else str(v))


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _save(fig, path: Path):
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def export_plots(run_dir, out_dir=None) -> list:
    """Write CSV/JSON series and PNG figures for the run in ``run_dir``; returns written paths."""
    run = Path(run_dir)
    report_path = run / "report.json"
    needed = [report_path, run / "kappa_scatter.csv"]
    if report_path.exists():
        report = json.loads(report_path.read_text())
        needed += [run / f"runlog_{s['step']}.jsonl" for s in report["steps"]]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise FileNotFoundError("missing inputs: " + ", ".join(missing))
    out = Path(out_dir) if out_dir else run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    trace_rows = []
    for s in report["steps"]:
        for line in (run / f"runlog_{s['step']}.jsonl").read_text().splitlines():
            e = json.loads(line)
            trace_rows.append([s["step"]] + [e[k] for k in ELBO_COLUMNS[1:]])
    _write_csv(out / "elbo_trace.csv", ELBO_COLUMNS, trace_rows)
    budget_rows = [[s["step"], s["n_labels"], s["surrogate_objective"], s["surrogate_objective_se"]]
                   for s in report["steps"]]
    _write_csv(out / "objective_vs_budget.csv", BUDGET_COLUMNS, budget_rows)
    scatter = (run / "kappa_scatter.csv").read_text()
    (out / "kappa_scatter.csv").write_text(scatter)
    overlay = {"objective": report["objective"], "targets": report.get("targets"),
               "evaluation": report.get("evaluation")}
    (out / "target.json").write_text(json.dumps(overlay, indent=2, sort_keys=True))
    written += [out / n for n in ("elbo_trace.csv", "objective_vs_budget.csv", "kappa_scatter.csv", "target.json")]

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = sorted({r[0] for r in trace_rows})
    for st in steps:
        vals = np.array([r[3] for r in trace_rows if r[0] == st])
        ax.plot(np.arange(len(vals)), vals, lw=0.8, label=f"step {st}")
    ax.set_xlabel("inner iteration")
    ax.set_ylabel("ELBO estimate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out / "elbo_trace.png")

    fig, ax = plt.subplots(figsize=(5, 3.5))
    b = np.array([[r[1], r[2], r[3]] for r in budget_rows], dtype=float)
    ax.errorbar(b[:, 0], b[:, 1], yerr=b[:, 2], marker="o", capsize=3)
    ax.set_xlabel("labeled samples")
    ax.set_ylabel("surrogate objective")
    fig.tight_layout()
    _save(fig, out / "objective_vs_budget.png")

    fig, ax = plt.subplots(figsize=(5, 4.5))
    rows = list(csv.DictReader(io.StringIO(scatter)))
    for which in sorted({r["which"] for r in rows}):
        pts = np.array([[float(r["kappa1"]), float(r["kappa2"])] for r in rows if r["which"] == which])
        ax.scatter(pts[:, 0], pts[:, 1], s=6, alpha=0.6, label=which)
    obj = report["objective"]
    if obj["variant"] == "O1-box":
        lo, hi = obj["lo"], obj["hi"]
        ax.add_patch(plt.Rectangle(lo, hi[0] - lo[0], hi[1] - lo[1], fill=False, color="k", lw=1.2))
    elif report.get("targets"):
        t = np.array(report["targets"])
        ax.scatter(t[:, 0], t[:, 1], marker="x", color="k", s=20, label="target samples")
    ax.set_xlabel("kappa_1")
    ax.set_ylabel("kappa_2")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out / "kappa_scatter.png")
    written += [out / n for n in ("elbo_trace.png", "objective_vs_budget.png", "kappa_scatter.png")]
    return written
