"""Variational Bayes EM over process parameters.

The variational family is a Gaussian with diagonal-plus-low-rank covariance
``diag(d) + L L^T`` over the latent vector ``z``.  For the expected-utility
objective (O1) ``z = [kappa_std, psi_t]``; for density matching (O2) there is
one factor per target sample over ``psi_t`` alone.  Property coordinates are
always in the surrogate's standardized units.

E-steps ascend the ELBO in the variational parameters, M-steps in ``phi``.
For the box objective the indicator utility is relaxed by log-sigmoids and the
box is shrunk from a broad initial domain to the target one by an
effective-sample-size controlled schedule.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorad as ad
from .randfield import SpectralGrid, cutoff_from_vf, smooth_threshold, synthesize_field
from .surrogate import LOG2PI, Adam, Surrogate, prob_in_box

logger = logging.getLogger(__name__)

__all__ = [
    "VariationalParams",
    "ObjectiveSpec",
    "TemperSchedule",
    "VBEMConfig",
    "FieldLikelihood",
    "NumericalError",
    "lowrank_logpdf",
    "q_sample",
    "draw_noise",
    "box_log_utility",
    "gaussian_log_utility",
    "elbo_o1",
    "elbo_o2",
    "ess",
    "temper_step",
    "initial_box",
    "VBEM",
]


class NumericalError(FloatingPointError):
    """A Monte Carlo term or gradient became non-finite."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message if index is None else f"{message} (draw {index})")


# -- variational family ---------------------------------------------------

@dataclass
class VariationalParams:
    mu: np.ndarray
    log_d: np.ndarray
    L: np.ndarray

    @classmethod
    def init(cls, dim: int, rank: int) -> "VariationalParams":
        if dim < 1 or rank < 0:
            raise ValueError("dim >= 1 and rank >= 0 required")
        return cls(np.zeros(dim), np.zeros(dim), np.zeros((dim, rank)))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    def covariance(self) -> np.ndarray:
        return np.diag(np.exp(self.log_d)) + self.L @ self.L.T

    def arrays(self) -> dict:
        return {"mu": self.mu, "log_d": self.log_d, "L": self.L}

    def update(self, arrays: dict) -> None:
        self.mu, self.log_d, self.L = arrays["mu"], arrays["log_d"], arrays["L"]

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.mu.copy(), self.log_d.copy(), self.L.copy())

    def to_json(self) -> dict:
        return {k: v.tolist() for k, v in self.arrays().items()}

    @classmethod
    def from_json(cls, obj: dict) -> "VariationalParams":
        L = np.asarray(obj["L"], dtype=np.float64)
        mu = np.asarray(obj["mu"], dtype=np.float64)
        return cls(mu, np.asarray(obj["log_d"], dtype=np.float64), L.reshape(mu.shape[0], -1))


def _woodbury(log_d: np.ndarray, L: np.ndarray):
    """Pieces of the inverse and log-determinant of diag(d) + L L^T."""
    dinv = np.exp(-log_d)
    A = L * dinv[:, None]
    K = np.eye(L.shape[1]) + L.T @ A
    chol = np.linalg.cholesky(K)
    kinv = np.linalg.inv(K)
    logdet = log_d.sum() + 2.0 * np.log(np.diag(chol)).sum()
    return dinv, A, kinv, logdet


def lowrank_logpdf(z, mu, log_d, L) -> ad.Tensor:
    """Per-row log N(z; mu, diag(exp(log_d)) + L L^T) at O(n d M + d M^2) cost."""
    z, mu, log_d, L = (ad.as_tensor(t) for t in (z, mu, log_d, L))
    dinv, A, kinv, logdet = _woodbury(log_d.value, L.value)
    r = np.atleast_2d(z.value - mu.value)
    alpha = r * dinv - (r @ A) @ kinv @ A.T
    quad = (r * alpha).sum(-1)
    dim = mu.shape[0]
    out = -0.5 * (dim * LOG2PI + logdet + quad)
    if z.ndim == 1:
        out = out[0]

    def vjp(g):
        g = np.atleast_1d(g)
        gz = -g[:, None] * alpha
        diag_inv = dinv - ((A @ kinv) * A).sum(-1)
        gsum = g.sum()
        gd = 0.5 * ((g[:, None] * alpha ** 2).sum(0) - gsum * diag_inv) * np.exp(log_d.value)
        gL = alpha.T @ (g[:, None] * (alpha @ L.value)) - gsum * (A @ kinv)
        return (gz.reshape(z.shape), -gz.sum(0), gd, gL)

    return ad.custom_op(out, (z, mu, log_d, L), vjp, "lowrank_logpdf")


def draw_noise(rng: np.random.Generator, n: int, dim: int, rank: int):
    """Standard-normal noise pair (eps_rank, eps_diag) for ``n`` reparametrized draws."""
    return rng.standard_normal((n, rank)), rng.standard_normal((n, dim))


def q_sample(xi, noise):
    """Reparametrized draws z = mu + L eps1 + sqrt(d) eps2 and their log q(z).

    ``xi`` maps ``mu``, ``log_d``, ``L`` to arrays or Tensors; ``noise`` comes
    from :func:`draw_noise` (fixed noise gives common random numbers).
    """
    mu, log_d, L = (ad.as_tensor(xi[k]) for k in ("mu", "log_d", "L"))
    eps1, eps2 = noise
    z = mu + ad.exp(log_d * 0.5) * eps2
    if L.shape[1]:
        z = z + ad.matmul(eps1, ad.transpose(L))
    return z, lowrank_logpdf(z, mu, log_d, L)


def _log_std_normal(x: ad.Tensor) -> ad.Tensor:
    return ad.tsum(x * x, axis=-1) * -0.5 - 0.5 * x.shape[-1] * LOG2PI


# -- objectives -----------------------------------------------------------

def box_log_utility(kappa, lo, hi, beta: float) -> ad.Tensor:
    """Smoothed log-indicator: sum of log-sigmoids on each face of the box."""
    kappa = ad.as_tensor(kappa)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    below = ad.softplus((kappa - lo) * -beta)
    above = ad.softplus((kappa - hi) * beta)
    return ad.tsum(below + above, axis=-1) * -1.0


def gaussian_log_utility(kappa, target, tau: float, scale=1.0) -> ad.Tensor:
    """log u = -tau |scale * (kappa - target)|^2; ``scale`` maps standardized back to property units."""
    r = (ad.as_tensor(kappa) - np.asarray(target, dtype=np.float64)) * scale
    return ad.tsum(r * r, axis=-1) * -tau


@dataclass
class ObjectiveSpec:
    """Exactly one of: target box (O1-box), target point (O1-gaussian-utility), target density (O2).

    Boxes, targets and target moments are in property units.
    """

    variant: str
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    target: np.ndarray | None = None
    tau: float = 1.0
    target_mean: np.ndarray | None = None
    target_cov: np.ndarray | None = None
    n_samples: int = 20

    VARIANTS = ("O1-box", "O1-gaussian-utility", "O2")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown objective variant {self.variant!r}")
        given = {
            "O1-box": self.lo is not None or self.hi is not None,
            "O1-gaussian-utility": self.target is not None,
            "O2": self.target_mean is not None or self.target_cov is not None,
        }
        extra = [k for k, v in given.items() if v and k != self.variant]
        if extra or not given[self.variant]:
            raise ValueError(f"objective {self.variant} needs its own fields and no others (found {extra})")
        if self.variant == "O1-box":
            self.lo, self.hi = np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)
            if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
                raise ValueError("box needs lo < hi componentwise")
        elif self.variant == "O1-gaussian-utility":
            self.target = np.asarray(self.target, dtype=np.float64)
            if self.tau <= 0:
                raise ValueError("tau must be positive")
        else:
            self.target_mean = np.asarray(self.target_mean, dtype=np.float64)
            self.target_cov = np.atleast_2d(np.asarray(self.target_cov, dtype=np.float64))
            try:
                np.linalg.cholesky(self.target_cov)
            except np.linalg.LinAlgError:
                raise ValueError("target covariance must be symmetric positive definite") from None
            if not np.allclose(self.target_cov, self.target_cov.T) or self.n_samples < 1:
                raise ValueError("target covariance must be symmetric and n_samples >= 1")

    @property
    def dim(self) -> int:
        ref = {"O1-box": self.lo, "O1-gaussian-utility": self.target, "O2": self.target_mean}[self.variant]
        return ref.shape[0]

    def draw_targets(self, rng: np.random.Generator) -> np.ndarray:
        """The S fixed target samples for O2."""
        return rng.multivariate_normal(self.target_mean, self.target_cov, size=self.n_samples)

    def to_json(self) -> dict:
        out = {"variant": self.variant}
        for k in ("lo", "hi", "target", "target_mean", "target_cov"):
            v = getattr(self, k)
            if v is not None:
                out[k] = np.asarray(v).tolist()
        if self.variant == "O1-gaussian-utility":
            out["tau"] = self.tau
        if self.variant == "O2":
            out["n_samples"] = self.n_samples
        return out


# -- likelihood through the field map ------------------------------------------

class FieldLikelihood:
    """log p_M(kappa | x(phi, psi_t)) with x the relaxed thresholded field."""

    def __init__(self, surrogate: Surrogate, grid: SpectralGrid, vf: float, eps: float = 25.0):
        if surrogate.arch.n_pixels != grid.n_pixels:
            raise ValueError("surrogate and spectral grid disagree on the pixel count")
        self.surrogate = surrogate
        self.grid = grid
        self.x0 = cutoff_from_vf(vf)
        self.eps = eps
        self.d_kappa = surrogate.arch.n_out
        self.d_psi = grid.dim_psi
        self.scaler = surrogate.scaler

    def log_lik(self, kappa_std, phi, psi) -> ad.Tensor:
        field_ = synthesize_field(ad.as_tensor(phi), ad.as_tensor(psi), self.grid)
        enc = ad.tanh((field_ - self.x0) * self.eps)  # 2 * smooth_threshold - 1
        m, lv = self.surrogate.apply(enc, encoded=True)
        r = (ad.as_tensor(kappa_std) - m) * ad.exp(lv * -0.5)
        return ad.tsum(r * r + lv + LOG2PI, axis=-1) * -0.5

    def log_jacobian(self) -> float:
        """Offset from standardized to property-unit log-densities."""
        return -float(np.log(self.scaler.std).sum())

    def predict(self, phi, psi):
        """Predictive (mean, var) in property units for relaxed inputs, numpy."""
        x = smooth_threshold(synthesize_field(np.asarray(phi), np.asarray(psi), self.grid), self.x0, self.eps)
        return self.surrogate.predict(x)


def _check_finite(terms: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(terms))
    if bad.size:
        raise NumericalError(f"non-finite {what}", int(bad[0]))


def elbo_o1(xi, phi, model, log_utility, noise):
    """Monte Carlo ELBO for the expected-utility objective.

    Returns the estimate (scalar Tensor) and the per-draw terms (numpy).
    ``log_utility`` maps a (n, d_kappa) Tensor to (n,).
    """
    z, logq = q_sample(xi, noise)
    dk = model.d_kappa
    kappa = ad.take(z, (slice(None), slice(0, dk)))
    psi = ad.take(z, (slice(None), slice(dk, None)))
    terms = log_utility(kappa) + model.log_lik(kappa, phi, psi) + _log_std_normal(psi) - logq
    _check_finite(terms.value, "ELBO term")
    return ad.mean(terms), terms.value


def elbo_o2(xis, phi, model, kappas_std, noises, subset=None):
    """Average over target samples of the per-sample ELBO on log p_M(kappa_s | phi).

    ``subset`` restricts the estimate to the listed factors, which keeps it
    unbiased for the full average when the subset is drawn uniformly.
    Returns the estimate and the per-sample ELBO values (numpy, NaN where skipped).
    """
    S = len(xis)
    idx = list(range(S)) if subset is None else list(subset)
    if not idx:
        raise ValueError("empty subset")
    zs, logqs, kap = [], [], []
    for s in idx:
        z, lq = q_sample(xis[s], noises[s])
        zs.append(z)
        logqs.append(lq)
        kap.append(np.broadcast_to(kappas_std[s], (z.shape[0], model.d_kappa)))
    counts = [z.shape[0] for z in zs]
    psi = ad.concat(zs, axis=0)
    terms = model.log_lik(np.concatenate(kap), phi, psi) + _log_std_normal(psi) - ad.concat(logqs, axis=0)
    _check_finite(terms.value, "ELBO term")
    weights = np.concatenate([np.full(c, 1.0 / (c * len(idx))) for c in counts])
    offset = model.log_jacobian() if hasattr(model, "log_jacobian") else 0.0
    per = np.full(S, np.nan)
    bounds = np.cumsum([0] + counts)
    for j, s in enumerate(idx):
        per[s] = terms.value[bounds[j]:bounds[j + 1]].mean() + offset
    return ad.tsum(terms * weights) + offset, per


# -- effective sample size and tempering -------------------------------------

def ess(weights) -> float:
    """Normalized effective sample size (sum w)^2 / (N sum w^2), in (0, 1]."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite, non-negative and non-empty")
    s2 = np.dot(w, w)
    if s2 == 0:
        raise ValueError("all weights are zero: tempered domain unreachable")
    return float(w.sum() ** 2 / (w.size * s2))


@dataclass
class TemperSchedule:
    """Box shrinking from ``lo0, hi0`` (t=0) to the target ``lo, hi`` (t=1)."""

    lo0: np.ndarray
    hi0: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    floor: float = 0.5
    beta_start: float = 2.0
    beta_end: float = 50.0
    max_stages: int = 20
    t: float = 0.0
    stage: int = 0
    stalls: int = 0
    stalled: bool = False
    tol: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.floor <= 1.0:
            raise ValueError("ESS floor must lie in (0, 1]")
        if self.beta_start <= 0 or self.beta_end <= 0 or self.max_stages < 1:
            raise ValueError("beta must be positive and max_stages >= 1")

    def box(self, t: float | None = None):
        t = self.t if t is None else t
        return (1 - t) * self.lo0 + t * self.lo, (1 - t) * self.hi0 + t * self.hi

    def beta(self, t: float | None = None) -> float:
        t = self.t if t is None else t
        return self.beta_start * (self.beta_end / self.beta_start) ** t

    @property
    def done(self) -> bool:
        return self.t >= 1.0

    def to_json(self) -> dict:
        return {"t": self.t, "stage": self.stage, "stalls": self.stalls, "stalled": self.stalled,
                "box": [b.tolist() for b in self.box()], "beta": self.beta()}


def initial_box(lo, hi, predicted_means, coverage: float = 0.9):
    """Hull of the target box and the central ``coverage`` range of predicted means."""
    tail = 50.0 * (1.0 - coverage)
    pl, ph = np.percentile(np.asarray(predicted_means), [tail, 100.0 - tail], axis=0)
    return np.minimum(lo, pl), np.maximum(hi, ph)


def temper_step(schedule: TemperSchedule, weights_at) -> TemperSchedule:
    """Advance ``schedule`` to the largest t whose weights keep ESS above the floor.

    ``weights_at(lo, hi)`` returns importance weights for a box.  Mutates and
    returns ``schedule``.
    """
    if schedule.done:
        return schedule

    def feasible(t):
        try:
            return ess(weights_at(*schedule.box(t))) >= schedule.floor * (1 - 1e-12)
        except ValueError:
            return False

    t0 = schedule.t
    if schedule.stage + 1 >= schedule.max_stages or feasible(1.0):
        t_new = 1.0
    else:
        lo, hi = t0, 1.0
        while hi - lo > schedule.tol:
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if feasible(mid) else (lo, mid)
        t_new = lo
    if t_new > t0:
        schedule.t = t_new
        schedule.stage += 1
        schedule.stalls = 0
    else:
        schedule.stalls += 1
        if schedule.stalls >= 3 and not schedule.stalled:
            schedule.stalled = True
            logger.warning("tempering stalled at t=%.3f (stage %d)", t0, schedule.stage)
    return schedule


# -- driver ---------------------------------------------------------------

@dataclass
class VBEMConfig:
    k_e: int = 50
    k_m: int = 10
    lr_xi: float = 1e-2
    lr_phi: float = 5e-3
    n_mc: int = 32
    n_mc_per_sample: int = 2
    rank: int = 50
    window: int = 20
    patience: int = 50
    rel_tol: float = 1e-3
    max_iter: int = 2000
    n_weights: int = 256
    ess_floor: float = 0.5
    beta_start: float = 2.0
    beta_end: float = 50.0
    max_stages: int = 20
    o2_subset: int | None = None

    def __post_init__(self):
        for k in ("k_e", "k_m", "n_mc", "n_mc_per_sample", "window", "patience", "max_iter", "n_weights"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.rank < 0 or self.lr_xi <= 0 or self.lr_phi <= 0:
            raise ValueError("rank >= 0 and positive learning rates required")


@dataclass
class InnerResult:
    phi: np.ndarray
    xis: list
    trace: list = field(default_factory=list)
    per_sample: list = field(default_factory=list)
    schedule: dict | None = None
    converged: bool = False
    iterations: int = 0


class VBEM:
    """Alternating stochastic E/M ascent for one surrogate (one inner loop)."""

    def __init__(self, model, objective: ObjectiveSpec, config: VBEMConfig | None = None, *,
                 rng: np.random.Generator, targets: np.ndarray | None = None, log_path=None):
        self.model = model
        self.objective = objective
        self.cfg = config or VBEMConfig()
        self.rng = rng
        self.log_path = Path(log_path) if log_path else None
        self.trace: list[dict] = []
        self.per_sample: list[list] = []
        self.schedule: TemperSchedule | None = None
        scaler = getattr(model, "scaler", None)
        self._mean = scaler.mean if scaler is not None else np.zeros(model.d_kappa)
        self._std = scaler.std if scaler is not None else np.ones(model.d_kappa)
        if objective.variant == "O2":
            if targets is None:
                raise ValueError("O2 needs the fixed target samples")
            self.targets_std = (np.asarray(targets) - self._mean) / self._std
        self._t0 = time.perf_counter()

    def _std_units(self, k):
        return (np.asarray(k) - self._mean) / self._std

    # -- objective pieces --------------------------------------------------
    def _log_utility(self):
        obj = self.objective
        if obj.variant == "O1-gaussian-utility":
            target = self._std_units(obj.target)
            return lambda k: gaussian_log_utility(k, target, obj.tau, self._std)
        lo, hi = self.schedule.box() if self.schedule else (obj.lo, obj.hi)
        beta = self.schedule.beta() if self.schedule else self.cfg.beta_end
        lo_s, hi_s = self._std_units(lo), self._std_units(hi)
        return lambda k: box_log_utility(k, lo_s, hi_s, beta)

    def _estimate(self, phi_t, xi_ts):
        if self.objective.variant == "O2":
            S = len(xi_ts)
            noises = [draw_noise(self.rng, self.cfg.n_mc_per_sample, self.model.d_psi, self.cfg.rank)
                      for _ in range(S)]
            subset = None
            if self.cfg.o2_subset and self.cfg.o2_subset < S:
                subset = np.sort(self.rng.choice(S, self.cfg.o2_subset, replace=False))
            est, per = elbo_o2(xi_ts, phi_t, self.model, self.targets_std, noises, subset)
            return est, per, None
        dim = self.model.d_kappa + self.model.d_psi
        noise = draw_noise(self.rng, self.cfg.n_mc, dim, self.cfg.rank)
        est, terms = elbo_o1(xi_ts[0], phi_t, self.model, self._log_utility(), noise)
        return est, None, float(terms.std(ddof=1) / math.sqrt(len(terms))) if len(terms) > 1 else 0.0

    def _leaves(self, arrays: dict, track: bool) -> dict:
        return {k: ad.Tensor(v, requires_grad=track) for k, v in arrays.items()}

    # -- steps -------------------------------------------------------------
    def e_step(self, phi: np.ndarray, xis: list, opts: list, k: int | None = None) -> list:
        """``k`` ascent steps on the variational parameters with ``phi`` fixed."""
        out = []
        for _ in range(self.cfg.k_e if k is None else k):
            leaves = [self._leaves(xi.arrays(), True) for xi in xis]
            est, per, se = self._estimate(phi, leaves)
            ad.backward(est)
            for xi, lv, opt in zip(xis, leaves, opts):
                if lv["mu"].grad is None:
                    continue
                grads = {n: t.grad for n, t in lv.items()}
                _check_grads(grads)
                arrays = xi.arrays()
                opt.step(arrays, grads, sign=1.0)
                xi.update(arrays)
            out.append(self._record("E", est.item(), se, per, phi))
        return out

    def m_step(self, phi: np.ndarray, xis: list, opt: Adam, k: int | None = None) -> tuple:
        """``k`` ascent steps on ``phi`` with the variational parameters fixed."""
        params = {"phi": phi}
        out = []
        for _ in range(self.cfg.k_m if k is None else k):
            leaf = ad.Tensor(params["phi"], requires_grad=True)
            est, per, se = self._estimate(leaf, [xi.arrays() for xi in xis])
            ad.backward(est)
            _check_grads({"phi": leaf.grad})
            opt.step(params, {"phi": leaf.grad}, sign=1.0)
            out.append(self._record("M", est.item(), se, per, params["phi"]))
        return params["phi"], out

    def _record(self, phase, value, se, per, phi) -> dict:
        entry = {
            "iteration": len(self.trace),
            "phase": phase,
            "elbo": value,
            "elbo_se": se,
            "stage": self.schedule.stage if self.schedule else 0,
            "t": self.schedule.t if self.schedule else 1.0,
            "phi_norm": float(np.linalg.norm(np.asarray(getattr(phi, "value", phi)))),
            "wall_time": time.perf_counter() - self._t0,
        }
        self.trace.append(entry)
        if per is not None:
            self.per_sample.append([float(v) for v in per])
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(entry) + "\n")
        return entry

    # -- tempering ---------------------------------------------------------
    def _draw_psi(self, xis: list, n: int) -> np.ndarray:
        xi = xis[0]
        z, _ = q_sample(xi.arrays(), draw_noise(self.rng, n, xi.dim, xi.rank))
        return z.value[:, self.model.d_kappa:]

    def _start_schedule(self, phi, xis):
        obj = self.objective
        if obj.variant != "O1-box":
            return None
        m, _ = self.model.predict(phi, self._draw_psi(xis, self.cfg.n_weights))
        lo0, hi0 = initial_box(obj.lo, obj.hi, m)
        return TemperSchedule(lo0, hi0, obj.lo.copy(), obj.hi.copy(), self.cfg.ess_floor, self.cfg.beta_start,
                              self.cfg.beta_end, self.cfg.max_stages)

    def _temper(self, phi, xis):
        m, v = self.model.predict(phi, self._draw_psi(xis, self.cfg.n_weights))
        temper_step(self.schedule, lambda lo, hi: prob_in_box(m, v, lo, hi))

    # -- inner loop -------------------------------------------------------
    def init_xis(self) -> list:
        if self.objective.variant == "O2":
            return [VariationalParams.init(self.model.d_psi, self.cfg.rank) for _ in range(len(self.targets_std))]
        return [VariationalParams.init(self.model.d_kappa + self.model.d_psi, self.cfg.rank)]

    def run(self, phi0: np.ndarray, xis: list | None = None) -> InnerResult:
        """Alternate E and M steps until the smoothed ELBO stalls on the final domain."""
        cfg = self.cfg
        phi = np.asarray(phi0, dtype=np.float64).copy()
        xis = [xi.copy() for xi in xis] if xis else self.init_xis()
        xi_opts = [Adam(xi.arrays(), cfg.lr_xi) for xi in xis]
        phi_opt = Adam({"phi": phi}, cfg.lr_phi)
        self.schedule = self._start_schedule(phi, xis)
        converged = False
        while len(self.trace) < cfg.max_iter:
            self.e_step(phi, xis, xi_opts, min(cfg.k_e, cfg.max_iter - len(self.trace)))
            if len(self.trace) < cfg.max_iter:
                phi, _ = self.m_step(phi, xis, phi_opt, min(cfg.k_m, cfg.max_iter - len(self.trace)))
            if self.schedule is not None and not self.schedule.done:
                self._temper(phi, xis)
                continue
            if self._converged():
                converged = True
                break
        return InnerResult(phi, xis, self.trace, self.per_sample,
                           self.schedule.to_json() if self.schedule else None, converged, len(self.trace))

    def _converged(self) -> bool:
        cfg = self.cfg
        start = 0
        if self.schedule is not None:
            start = next((i for i, e in enumerate(self.trace) if e["t"] >= 1.0), len(self.trace))
        vals = np.array([e["elbo"] for e in self.trace[start:]])
        if vals.size < cfg.window + cfg.patience:
            return False
        ma = np.convolve(vals, np.ones(cfg.window) / cfg.window, mode="valid")
        now, before = ma[-1], ma[-1 - cfg.patience]
        return (now - before) < cfg.rel_tol * abs(before)


def _check_grads(grads: dict):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")


def moving_average(values, window: int = 20) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return np.array([])
    return np.convolve(values, np.ones(window) / window, mode="valid")
