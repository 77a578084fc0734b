"""Objective-aware data acquisition and the outer optimization loop.

Each outer step trains a fresh surrogate on all labels gathered so far, runs
VB-EM to convergence, draws candidate microstructures from the variational
density, scores them and sends the top-ranked ones to the FEM oracle.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np
from scipy import stats

from .config import RunConfig, derive_seed
from .homog import MaterialConfig, label_batch
from .randfield import SpectralGrid, cutoff_from_vf, hard_threshold, synthesize_field
from .surrogate import Architecture, Surrogate, prob_in_box, train
from .vbem import VBEM, FieldLikelihood, ObjectiveSpec, VariationalParams, draw_noise, q_sample

logger = logging.getLogger(__name__)

__all__ = [
    "grid_hash",
    "DataStore",
    "AcquisitionScore",
    "generate_ancestral",
    "propose_pool",
    "acquisition_o1",
    "acquisition_o2",
    "select_and_label",
    "resolve_objective",
    "outer_loop",
    "surrogate_objective",
]


def grid_hash(x) -> str:
    """64-bit hash (hex) of a binary grid's bytes."""
    b = np.ascontiguousarray(np.asarray(x) > 0.5, dtype=np.uint8).tobytes()
    return hashlib.blake2b(b, digest_size=8).hexdigest()


# -- data store -------------------------------------------------------------

class DataStore:
    """Labeled (microstructure, property) pairs on disk, one blob pair per shard."""

    def __init__(self, root, n_pixels: int, d_kappa: int, material: MaterialConfig | None = None,
                 config: dict | None = None):
        self.root = Path(root)
        self.n_pixels = n_pixels
        self.d_kappa = d_kappa
        self.material = material or MaterialConfig()
        self.config = config
        self.shards: list[dict] = []
        self._x: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        self.hashes: set[str] = set()

    @classmethod
    def create(cls, root, n_pixels, d_kappa, material=None, config=None) -> "DataStore":
        store = cls(root, n_pixels, d_kappa, material, config)
        store.root.mkdir(parents=True, exist_ok=True)
        for old in store.root.glob("shard_*"):
            old.unlink()
        store._write_manifest()
        return store

    @classmethod
    def open(cls, root) -> "DataStore":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no data store at {root} (missing manifest.json)")
        man = json.loads(path.read_text())
        store = cls(root, man["n_pixels"], man["d_kappa"], MaterialConfig(**man["material"]), man.get("config"))
        n = man["n_pixels"]
        for shard in man["shards"]:
            x = np.frombuffer((root / shard["inputs"]).read_bytes(), dtype="<f8").reshape(-1, n, n)
            y = np.frombuffer((root / shard["labels"]).read_bytes(), dtype="<f8").reshape(-1, man["d_kappa"])
            if len(x) != shard["count"] or len(y) != shard["count"]:
                raise ValueError(f"shard {shard['name']} is truncated")
            store._append(x.astype(np.float64), y.astype(np.float64), shard)
        return store

    def __len__(self) -> int:
        return sum(s["count"] for s in self.shards)

    @property
    def inputs(self) -> np.ndarray:
        if not self._x:
            return np.zeros((0, self.n_pixels, self.n_pixels))
        return np.concatenate(self._x)

    @property
    def labels(self) -> np.ndarray:
        if not self._y:
            return np.zeros((0, self.d_kappa))
        return np.concatenate(self._y)

    def _append(self, x, y, shard):
        hs = [grid_hash(g) for g in x]
        if len(set(hs)) != len(hs) or self.hashes.intersection(hs):
            raise ValueError(f"duplicate microstructures in shard {shard.get('name')}")
        self.hashes.update(hs)
        self._x.append(x)
        self._y.append(y)
        self.shards.append(shard)

    def add_shard(self, x, y, *, step: int, source: str, seed: int | None = None, phi=None) -> dict:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(len(x), -1)
        if x.shape[1:] != (self.n_pixels, self.n_pixels):
            raise ValueError(f"inputs must be ({self.n_pixels}, {self.n_pixels}) grids, got {x.shape[1:]}")
        if y.shape[1] != self.d_kappa:
            raise ValueError(f"label dimension {y.shape[1]} != {self.d_kappa}")
        name = f"shard_{len(self.shards):03d}"
        shard = {"name": name, "count": len(x), "step": step, "source": source,
                 "seed": None if seed is None else str(seed),
                 "phi": None if phi is None else np.asarray(phi).tolist(),
                 "inputs": f"{name}_inputs.bin", "labels": f"{name}_labels.bin"}
        self._append(x, y, shard)
        (self.root / shard["inputs"]).write_bytes(x.astype("<f8").tobytes())
        (self.root / shard["labels"]).write_bytes(y.astype("<f8").tobytes())
        self._write_manifest()
        return shard

    def truncate(self, n_shards: int) -> None:
        """Drop shards beyond the first ``n_shards`` (used when resuming)."""
        for shard in self.shards[n_shards:]:
            for key in ("inputs", "labels"):
                (self.root / shard[key]).unlink(missing_ok=True)
        self.shards, self._x, self._y = self.shards[:n_shards], self._x[:n_shards], self._y[:n_shards]
        self.hashes = {grid_hash(g) for x in self._x for g in x}
        self._write_manifest()

    def _write_manifest(self):
        y = self.labels
        stats_ = {"mean": y.mean(0).tolist(), "std": y.std(0).tolist()} if len(y) else None
        man = {
            "count": len(self), "n_pixels": self.n_pixels, "d_kappa": self.d_kappa,
            "material": asdict(self.material), "standardization": stats_, "shards": self.shards,
            "config": self.config,
        }
        tmp = self.root / "manifest.json.tmp"
        tmp.write_text(json.dumps(man, indent=2, sort_keys=True))
        tmp.replace(self.root / "manifest.json")


def _oracle(case: str, mat: MaterialConfig, threads: int):
    return partial(label_batch, case=case, mat=mat, threads=threads)


def generate_ancestral(cfg: RunConfig, indices, oracle, seen: set | None = None):
    """Per-index seeded draws phi ~ N(0, I), x ~ p(x | phi), labeled by ``oracle``.

    Each index owns its random stream, so index ``i`` yields the same sample
    in every dataset that contains it (given the same earlier indices).
    """
    grid = SpectralGrid(cfg.n_pixels, cfg.n_freq, cfg.sdf)
    x0 = cutoff_from_vf(cfg.vf)
    seen = set() if seen is None else set(seen)
    indices = list(indices)
    rngs = {i: np.random.default_rng(derive_seed(cfg.seed, "data", i)) for i in indices}
    phis = {i: rngs[i].standard_normal(grid.n_rbf) for i in indices}
    xs, ys = {}, {}
    todo = indices
    for _ in range(100):
        for i in todo:
            while True:
                psi = rngs[i].standard_normal(grid.dim_psi)
                x = hard_threshold(synthesize_field(phis[i], psi, grid), x0)
                h = grid_hash(x)
                if h not in seen:
                    seen.add(h)
                    xs[i] = x
                    break
        labels = oracle([xs[i] for i in todo])
        failed = []
        for i, lab in zip(todo, labels):
            if lab is None:
                failed.append(i)
            else:
                ys[i] = lab
        if not failed:
            break
        logger.warning("oracle failed on %d generated samples; redrawing", len(failed))
        todo = failed
    else:
        raise RuntimeError("oracle keeps failing on generated microstructures")
    return np.stack([xs[i] for i in indices]), np.stack([ys[i] for i in indices])


# -- pool, acquisition, selection ------------------------------------------------

def propose_pool(xis: list, phi, grid: SpectralGrid, vf: float, n_pool: int, rng: np.random.Generator,
                 exclude: set | None = None):
    """``n_pool`` unique binary candidates drawn through the phase marginal of q.

    With several factors (O2) each candidate picks one uniformly.  Returns
    (grids, hashes); fewer than ``n_pool`` if 10x oversampling cannot fill it.
    """
    x0 = cutoff_from_vf(vf)
    seen = set(exclude or ())
    out, hashes = [], []
    drawn = 0
    while len(out) < n_pool and drawn < 10 * n_pool:
        n = n_pool - len(out)
        which = rng.integers(len(xis), size=n) if len(xis) > 1 else np.zeros(n, dtype=int)
        psi = np.empty((n, grid.dim_psi))
        for s in np.unique(which):
            rows = np.flatnonzero(which == s)
            xi = xis[s]
            z, _ = q_sample(xi.arrays(), draw_noise(rng, len(rows), xi.dim, xi.rank))
            psi[rows] = z.value[:, xi.dim - grid.dim_psi:]  # phase block is last
        drawn += n
        xs = hard_threshold(synthesize_field(np.asarray(phi), psi, grid), x0)
        for x in xs:
            h = grid_hash(x)
            if h not in seen:
                seen.add(h)
                out.append(x)
                hashes.append(h)
    if len(out) < n_pool:
        logger.warning("pool holds only %d unique candidates after %d draws", len(out), drawn)
    return np.stack(out) if out else np.zeros((0, grid.n_pixels, grid.n_pixels)), hashes


@dataclass
class AcquisitionScore:
    values: np.ndarray
    variant: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("acquisition scores must be finite")
        if self.variant == "O1-variance" and np.any(self.values < 0):
            raise ValueError("variance scores must be non-negative")


def acquisition_o1(x, surrogate: Surrogate, objective: ObjectiveSpec, rng=None, n_draws: int = 256):
    """Predictive variance of the utility at each candidate."""
    m, v = surrogate.predict(x)
    if objective.variant == "O1-box":
        p = prob_in_box(m, v, objective.lo, objective.hi)
        return AcquisitionScore(p * (1.0 - p), "O1-variance")
    rng = rng or np.random.default_rng(0)
    k = m[:, None, :] + np.sqrt(v)[:, None, :] * rng.standard_normal((len(m), n_draws, m.shape[-1]))
    u = np.exp(-objective.tau * ((k - objective.target) ** 2).sum(-1))
    return AcquisitionScore(u.var(axis=1), "O1-variance")


def acquisition_o2(x, surrogate: Surrogate, targets):
    """Mean predictive log-density of the target samples at each candidate."""
    m, v = surrogate.predict(x)
    targets = np.asarray(targets)
    logp = stats.norm.logpdf(targets[:, None, :], m[None], np.sqrt(v)[None]).sum(-1)
    return AcquisitionScore(logp.mean(0), "O2-logscore")


def select_and_label(pool, hashes, scores, n_add: int, oracle):
    """Label the top-``n_add`` candidates; ties go to the smaller hash, failures are backfilled.

    Returns (indices, labels) of the labeled candidates in rank order.
    """
    scores = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    if n_add > len(pool):
        raise ValueError(f"n_add={n_add} exceeds pool size {len(pool)}")
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], hashes[i]))
    chosen, labels = [], []
    pos = 0
    while len(chosen) < n_add and pos < len(order):
        batch = order[pos:pos + n_add - len(chosen)]
        pos += len(batch)
        for i, lab in zip(batch, oracle([pool[i] for i in batch])):
            if lab is None:
                logger.warning("oracle failed on candidate %s; backfilling", hashes[i])
                continue
            chosen.append(i)
            labels.append(np.asarray(lab))
    return np.array(chosen, dtype=int), np.array(labels).reshape(len(chosen), -1)


# -- outer loop --------------------------------------------------------------

def resolve_objective(spec: dict, labels: np.ndarray) -> ObjectiveSpec:
    """Turn the configured objective into concrete targets, deriving them from labels if asked."""
    spec = dict(spec)
    variant = spec.pop("variant")
    y = np.asarray(labels)
    if variant == "O1-box":
        if "lo" in spec and "hi" in spec:
            return ObjectiveSpec(variant, lo=spec["lo"], hi=spec["hi"])
        lo_p, hi_p = spec.get("percentiles", [70.0, 90.0])
        return ObjectiveSpec(variant, lo=np.percentile(y, lo_p, axis=0), hi=np.percentile(y, hi_p, axis=0))
    if variant == "O1-gaussian-utility":
        return ObjectiveSpec(variant, target=spec["target"], tau=spec.get("tau", 1.0))
    n_samples = int(spec.get("n_samples", 20))
    if "target_mean" in spec:
        return ObjectiveSpec(variant, target_mean=spec["target_mean"], target_cov=spec["target_cov"],
                             n_samples=n_samples)
    shift = np.asarray(spec.get("shift", [1.0, -1.0]))
    mean = y.mean(0) + shift * y.std(0)
    cov = spec.get("cov_scale", 0.25) * np.cov(y, rowvar=False)
    return ObjectiveSpec(variant, target_mean=mean, target_cov=cov, n_samples=n_samples)


def surrogate_objective(surrogate: Surrogate, phi, grid, vf, objective: ObjectiveSpec, psi, targets=None):
    """Surrogate-predicted objective at ``phi`` over fixed phase draws, with its MC standard error."""
    xs = hard_threshold(synthesize_field(np.asarray(phi), psi, grid), cutoff_from_vf(vf))
    m, v = surrogate.predict(xs)
    n = len(xs)
    if objective.variant == "O1-box":
        p = prob_in_box(m, v, objective.lo, objective.hi)
    elif objective.variant == "O1-gaussian-utility":
        s = 1.0 + 2.0 * objective.tau * v
        p = np.prod(s ** -0.5 * np.exp(-objective.tau * (m - objective.target) ** 2 / s), axis=-1)
    else:
        dens = np.exp(stats.norm.logpdf(targets[:, None, :], m[None], np.sqrt(v)[None]).sum(-1))
        logp = np.log(np.maximum(dens.mean(1), 1e-300))
        infl = (dens / np.maximum(dens.mean(1, keepdims=True), 1e-300)).mean(0) - 1.0
        return float(logp.mean()), float(infl.std(ddof=1) / np.sqrt(n))
    return float(p.mean()), float(p.std(ddof=1) / np.sqrt(n))


def _save_checkpoint(path: Path, state: dict, xis: list):
    blob = np.concatenate([np.concatenate([xi.mu, xi.log_d, xi.L.ravel()]) for xi in xis])
    path.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())
    meta = {**state, "xi_shapes": [[xi.dim, xi.rank] for xi in xis]}
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True))
    tmp.replace(path.with_suffix(".json"))


def _load_checkpoint(path: Path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    xis, pos = [], 0
    for dim, rank in meta["xi_shapes"]:
        n = dim * (2 + rank)
        part = flat[pos:pos + n].copy()
        xis.append(VariationalParams(part[:dim], part[dim:2 * dim], part[2 * dim:].reshape(dim, rank)))
        pos += n
    return meta, xis


def outer_loop(cfg: RunConfig, store: DataStore, out_dir, *, threads: int = 1, resume=None,
               oracle=None) -> dict:
    """Train, optimize, acquire; ``cfg.n_steps`` acquisition steps. Returns the run report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    oracle = oracle or _oracle(cfg.case, cfg.material, threads)
    grid = SpectralGrid(cfg.n_pixels, cfg.n_freq, cfg.sdf)
    arch = Architecture(cfg.n_pixels, hidden=cfg.hidden, n_out=cfg.d_kappa)
    t_start = time.perf_counter()

    if resume:
        meta, xis = _load_checkpoint(resume)
        store.truncate(meta["n_shards"])
        objective = resolve_objective(meta["objective"], np.zeros((1, cfg.d_kappa)))
        phi = np.asarray(meta["phi"])
        targets = None if meta["targets"] is None else np.asarray(meta["targets"])
        steps, start = meta["steps"], meta["next_step"]
        phi0 = np.asarray(meta["phi0"])
    else:
        objective = resolve_objective(cfg.objective, store.labels)
        phi0 = np.random.default_rng(derive_seed(cfg.seed, "phi0")).standard_normal(grid.n_rbf)
        phi = phi0.copy()
        targets = None
        if objective.variant == "O2":
            targets = objective.draw_targets(np.random.default_rng(derive_seed(cfg.seed, "targets")))
        xis, steps, start = None, [], 0
    eval_psi = np.random.default_rng(derive_seed(cfg.seed, "surrogate-eval")).standard_normal(
        (cfg.eval_samples, grid.dim_psi))

    for step in range(start, cfg.n_steps + 1):
        t0 = time.perf_counter()
        tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "train", step) % 2 ** 32)
        fit = train(store.inputs, store.labels, arch, tcfg)
        fit.model.save(out / f"surrogate_{step}")
        model = FieldLikelihood(fit.model, grid, cfg.vf, cfg.eps)
        log_path = out / f"runlog_{step}.jsonl"
        log_path.unlink(missing_ok=True)
        opt = VBEM(model, objective, cfg.vbem, rng=np.random.default_rng(derive_seed(cfg.seed, "vbem", step)),
                   targets=targets, log_path=log_path)
        inner = opt.run(phi, xis)
        phi, xis = inner.phi, inner.xis
        est, se = surrogate_objective(fit.model, phi, grid, cfg.vf, objective, eval_psi, targets)
        record = {
            "step": step, "n_labels": len(store), "phi": phi.tolist(), "surrogate_objective": est,
            "surrogate_objective_se": se, "iterations": inner.iterations, "converged": inner.converged,
            "temper": inner.schedule, "heldout_nll": fit.heldout_nll, "baseline_nll": fit.baseline_nll,
            "final_elbo": inner.trace[-1]["elbo"] if inner.trace else None,
        }
        if inner.per_sample:
            np.savetxt(out / f"per_sample_elbo_{step}.csv", np.array(inner.per_sample), delimiter=",",
                       fmt="%.17g", header=",".join(f"s{i}" for i in range(len(inner.per_sample[0]))),
                       comments="")
        if step < cfg.n_steps:
            rng = np.random.default_rng(derive_seed(cfg.seed, "pool", step))
            pool, hashes = propose_pool(xis, phi, grid, cfg.vf, cfg.n_pool, rng, exclude=store.hashes)
            if objective.variant == "O2":
                scores = acquisition_o2(pool, fit.model, targets)
            else:
                scores = acquisition_o1(pool, fit.model, objective, np.random.default_rng(
                    derive_seed(cfg.seed, "acq", step)))
            idx, labels = select_and_label(pool, hashes, scores, min(cfg.n_add, len(pool)), oracle)
            store.add_shard(pool[idx], labels, step=step + 1, source="acquired", phi=phi)
            record["acquired"] = int(len(idx))
            record["acquisition_min_selected"] = float(scores.values[idx].min()) if len(idx) else None
        record["wall_time"] = time.perf_counter() - t0
        steps.append(record)
        logger.info("step %d: %d labels, surrogate objective %.4f +- %.4f", step, record["n_labels"], est, se)
        _save_checkpoint(out / "checkpoint", {
            "next_step": step + 1, "n_shards": len(store.shards), "phi": phi.tolist(), "phi0": phi0.tolist(),
            "steps": steps, "objective": objective.to_json(),
            "targets": None if targets is None else targets.tolist(),
        }, xis)

    return {
        "case": cfg.case,
        "config": cfg.to_json(),
        "objective": objective.to_json(),
        "targets": None if targets is None else targets.tolist(),
        "phi0": phi0.tolist(),
        "phi_star": phi.tolist(),
        "steps": steps,
        "n_labels": len(store),
        "wall_time": time.perf_counter() - t_start,
    }
