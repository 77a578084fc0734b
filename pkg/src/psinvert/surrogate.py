"""Heteroscedastic convolutional surrogate p_M(kappa | x) = N(m(x), diag S(x)).

Four conv blocks (3x3 same-padding conv, leaky ReLU, 2x2 average pooling)
extract features, a shared dense layer follows, and two linear heads emit the
mean and log-variance of the standardized properties.  Phases enter the
network encoded as +1 / -1 (smooth inputs in [0, 1] map through 2x - 1).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from . import tensorad as ad

logger = logging.getLogger(__name__)

__all__ = [
    "Architecture",
    "TrainConfig",
    "Standardizer",
    "Surrogate",
    "TrainingDiverged",
    "gaussian_nll",
    "nll",
    "train",
    "prob_in_box",
    "constant_baseline_nll",
]

LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Architecture:
    n_pixels: int = 32
    channels: tuple = (4, 8, 12, 16)
    hidden: int = 30
    n_out: int = 2
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.n_pixels % (2 ** len(self.channels)):
            raise ValueError(f"n_pixels={self.n_pixels} must be divisible by {2 ** len(self.channels)}")

    @property
    def n_features(self) -> int:
        side = self.n_pixels // 2 ** len(self.channels)
        return self.channels[-1] * side * side

    def param_shapes(self) -> dict:
        shapes, c_in = {}, 1
        for i, c in enumerate(self.channels):
            shapes[f"conv{i}.w"] = (c, c_in, 3, 3)
            shapes[f"conv{i}.b"] = (c,)
            c_in = c
        shapes["hidden.w"] = (self.n_features, self.hidden)
        shapes["hidden.b"] = (self.hidden,)
        shapes["mean.w"] = (self.hidden, self.n_out)
        shapes["mean.b"] = (self.n_out,)
        shapes["logvar.w"] = (self.hidden, self.n_out)
        shapes["logvar.b"] = (self.n_out,)
        return shapes


@dataclass
class TrainConfig:
    batch_size: int = 128
    weight_decay: float = 1e-5
    dropout: float = 0.05
    lr: float = 1e-3
    lr_decay: float = 0.5
    n_decays: int = 2
    epochs: int = 200
    holdout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.epochs) < 1:
            raise ValueError("batch_size and epochs must be positive")
        if min(self.weight_decay, self.dropout, self.lr, self.holdout) < 0:
            raise ValueError("rates must be non-negative")
        if not self.dropout < 1:
            raise ValueError("dropout must be < 1")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, y) -> "Standardizer":
        y = np.asarray(y, dtype=np.float64)
        std = y.std(axis=0)
        return cls(y.mean(axis=0), np.where(std > 0, std, 1.0))

    def forward(self, y):
        return (np.asarray(y) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, checkpoint):
        self.epoch = epoch
        self.checkpoint = checkpoint
        super().__init__(f"training loss became non-finite at epoch {epoch}")


class Surrogate:
    """CNN surrogate holding parameters and the property standardization."""

    def __init__(self, arch: Architecture, params: dict | None = None, scaler: Standardizer | None = None,
                 seed: int = 0):
        self.arch = arch
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self.scaler = scaler or Standardizer(np.zeros(arch.n_out), np.ones(arch.n_out))
        self.seed = seed

    def _init_params(self, rng) -> dict:
        params = {}
        for name, shape in self.arch.param_shapes().items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
                continue
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = math.sqrt(6.0 / ((1 + self.arch.leaky_slope ** 2) * fan_in))
            params[name] = rng.uniform(-bound, bound, size=shape)
        params["logvar.w"] *= 0.1
        return params

    # -- evaluation --------------------------------------------------------
    def _encode(self, x):
        if isinstance(x, ad.Tensor):
            return x * 2.0 - 1.0
        return ad.Tensor(2.0 * np.asarray(x, dtype=np.float64) - 1.0)

    def apply(self, x, params: dict | None = None, *, encoded: bool = False, dropout: float = 0.0,
              rng: np.random.Generator | None = None):
        """Standardized (mean, logvar) tensors for inputs of shape (B, N, N).

        ``params`` maps names to Tensors (for training) or arrays.  With
        ``encoded=True`` the input is already in the +/-1 encoding.
        """
        p = {k: ad.as_tensor(v) for k, v in (params or self.params).items()}
        n = self.arch.n_pixels
        h = x if encoded else self._encode(x)
        h = ad.as_tensor(h)
        if h.shape[-2:] != (n, n):
            raise ad.ShapeError("surrogate.forward", h.shape, (n, n))
        h = ad.reshape(h, (-1, 1, n, n))
        for i in range(len(self.arch.channels)):
            h = ad.conv2d_same(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
            h = ad.avgpool2x2(ad.leaky_relu(h, self.arch.leaky_slope))
        h = ad.reshape(h, (h.shape[0], -1))
        if dropout > 0:
            keep = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * keep
        h = ad.leaky_relu(ad.matmul(h, p["hidden.w"]) + p["hidden.b"], self.arch.leaky_slope)
        mean = ad.matmul(h, p["mean.w"]) + p["mean.b"]
        logvar = ad.matmul(h, p["logvar.w"]) + p["logvar.b"]
        return mean, logvar

    def predict(self, x, batch: int = 256):
        """Predictive mean and variance in property units, numpy (B, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        x = x[None] if single else x
        ms, vs = [], []
        for i in range(0, len(x), batch):
            m, lv = self.apply(x[i:i + batch])
            ms.append(m.value)
            vs.append(np.exp(lv.value))
        m = self.scaler.inverse(np.concatenate(ms))
        v = np.concatenate(vs) * self.scaler.std ** 2
        return (m[0], v[0]) if single else (m, v)

    def log_density(self, kappa, x):
        """log N(kappa | m(x), S(x)) in property units; differentiable in ``x`` if it is a Tensor.

        ``kappa`` broadcasts against the batch: (d,), (B, d) or (S, B, d).
        """
        if isinstance(x, ad.Tensor):
            m, lv = self.apply(x)
            z = (np.asarray(kappa) - self.scaler.mean) / self.scaler.std
            r = (m - z) * ad.exp(lv * -0.5)
            out = ad.tsum((r * r + lv + LOG2PI) * -0.5, axis=-1)
            return out - float(np.log(self.scaler.std).sum())
        m, v = self.predict(x)
        return stats.norm.logpdf(np.asarray(kappa), m, np.sqrt(v)).sum(-1)

    # -- persistence -----------------------------------------------------------
    def save(self, path) -> Path:
        """JSON manifest plus raw little-endian float64 parameter blob."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(self.arch.param_shapes())
        blob = np.concatenate([self.params[k].ravel() for k in names]).astype("<f8")
        path.with_suffix(".bin").write_bytes(blob.tobytes())
        manifest = {
            "architecture": {**asdict(self.arch), "channels": list(self.arch.channels)},
            "parameters": [[k, list(self.params[k].shape)] for k in names],
            "standardization": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "seed": self.seed,
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path) -> "Surrogate":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        a = manifest["architecture"]
        arch = Architecture(**{**a, "channels": tuple(a["channels"])})
        flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        params, pos = {}, 0
        for name, shape in manifest["parameters"]:
            size = int(np.prod(shape))
            params[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        st = manifest["standardization"]
        return cls(arch, params, Standardizer(np.array(st["mean"]), np.array(st["std"])), manifest["seed"])


def gaussian_nll(mean, logvar, target):
    """Per-sample negative Gaussian log-density (standardized units)."""
    r = (mean - target) * ad.exp(logvar * -0.5)
    return ad.tsum((r * r + logvar + LOG2PI) * 0.5, axis=-1)


def nll(model: Surrogate, params: dict, x, y_std, weight_decay: float = 0.0, dropout: float = 0.0, rng=None):
    """Mean negative log-likelihood of a batch plus 0.5 * weight_decay * |theta|^2."""
    if len(y_std) == 0:
        raise ValueError("empty batch")
    mean, logvar = model.apply(x, params, dropout=dropout, rng=rng)
    loss = ad.mean(gaussian_nll(mean, logvar, np.asarray(y_std)))
    if weight_decay > 0:
        penalty = None
        for v in params.values():
            t = ad.tsum(ad.as_tensor(v) * v)
            penalty = t if penalty is None else penalty + t
        loss = loss + penalty * (0.5 * weight_decay)
    return loss


class Adam:
    """Adaptive-moment ascent/descent on a dict of arrays."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, sign: float = -1.0) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] + sign * self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v, "lr": self.lr}


def constant_baseline_nll(y_train_std, y_eval_std) -> float:
    """Held-out NLL of a constant diagonal Gaussian fit to training moments."""
    mu = y_train_std.mean(0)
    var = y_train_std.var(0)
    return float(-stats.norm.logpdf(y_eval_std, mu, np.sqrt(var)).sum(-1).mean())


@dataclass
class TrainResult:
    model: Surrogate
    curve: list = field(default_factory=list)
    heldout_nll: float | None = None
    baseline_nll: float | None = None


def train(x, y, arch: Architecture, config: TrainConfig | None = None) -> TrainResult:
    """Maximum-likelihood fit with Adam on mini-batches; returns model and training curve.

    A ``holdout`` fraction of the data is set aside only to report held-out
    NLL against the constant-Gaussian baseline.
    """
    cfg = config or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    n = len(x)
    order = rng.permutation(n)
    n_hold = int(round(cfg.holdout * n)) if n >= 10 else 0
    hold, fit_idx = order[:n_hold], order[n_hold:]
    if len(fit_idx) < min(cfg.batch_size, 1) or len(fit_idx) == 0:
        raise ValueError("not enough data to train")
    scaler = Standardizer.fit(y[fit_idx])
    ys = scaler.forward(y)
    model = Surrogate(arch, scaler=scaler, seed=cfg.seed)
    params = model.params
    opt = Adam(params, cfg.lr)
    bs = min(cfg.batch_size, len(fit_idx))
    decay_every = max(1, cfg.epochs // (cfg.n_decays + 1))
    curve = []
    checkpoint = {k: v.copy() for k, v in params.items()}
    for epoch in range(cfg.epochs):
        if epoch and epoch % decay_every == 0 and epoch // decay_every <= cfg.n_decays:
            opt.lr *= cfg.lr_decay
        perm = fit_idx[rng.permutation(len(fit_idx))]
        total = 0.0
        for start in range(0, len(perm), bs):
            idx = perm[start:start + bs]
            leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = nll(model, leaves, x[idx], ys[idx], cfg.weight_decay, cfg.dropout, rng)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch, checkpoint)
            ad.backward(loss)
            opt.step(params, {k: t.grad for k, t in leaves.items()})
            total += loss.item() * len(idx)
        curve.append(total / len(perm))
        checkpoint = {k: v.copy() for k, v in params.items()}
    result = TrainResult(model, curve)
    if n_hold:
        m, lv = model.apply(x[hold])
        result.heldout_nll = float(gaussian_nll(m, lv, ys[hold]).value.mean())
        result.baseline_nll = constant_baseline_nll(ys[fit_idx], ys[hold])
        logger.info("surrogate held-out NLL %.4f (constant baseline %.4f)", result.heldout_nll, result.baseline_nll)
    return result


def prob_in_box(mean, var, lo, hi):
    """Pr(kappa in [lo, hi]) under independent Gaussians; numpy, broadcasting over leading axes."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    if np.any(lo >= hi):
        raise ValueError(f"degenerate box: lo={lo}, hi={hi}")
    sd = np.sqrt(np.asarray(var))
    mean = np.asarray(mean)
    per = special.ndtr((hi - mean) / sd) - special.ndtr((lo - mean) / sd)
    return np.clip(per, 0.0, 1.0).prod(axis=-1)
