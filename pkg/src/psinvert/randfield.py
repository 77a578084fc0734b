"""Process-structure link: parametrized Gaussian random fields and thresholding.

The spectral density of a zero-mean, unit-variance Gaussian field is an RBF
mixture whose weights are the softmax of the process parameters ``phi``.  A
field realization is synthesized by the spectral representation method from a
vector of standard-normal latent phase variables ``psi_t``; the binary
microstructure follows by thresholding at the cutoff that realizes the
requested volume fraction.

All synthesis functions accept either numpy arrays or :class:`Tensor` inputs
and are differentiable with respect to ``phi`` and ``psi_t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from . import tensorad as ad

__all__ = [
    "SdfConfig",
    "SpectralGrid",
    "Microstructure",
    "sdf_weights",
    "sdf_eval",
    "phase_transform",
    "synthesize_field",
    "cutoff_from_vf",
    "smooth_threshold",
    "hard_threshold",
    "sample_microstructures",
    "save_microstructure",
    "load_microstructure",
]


@dataclass(frozen=True)
class SdfConfig:
    """RBF spectral-mixture layout: ``n_rbf`` centers on a square grid in [0, w_max]^2."""

    n_rbf: int = 36
    w_max: float = 65.0
    bandwidth: float = 12.0

    def __post_init__(self):
        side = int(round(math.sqrt(self.n_rbf)))
        if side * side != self.n_rbf or side < 1:
            raise ValueError(f"n_rbf must be a perfect square, got {self.n_rbf}")
        if self.bandwidth <= 0 or self.w_max <= 0:
            raise ValueError("bandwidth and w_max must be positive")

    @property
    def centers(self) -> np.ndarray:
        side = int(round(math.sqrt(self.n_rbf)))
        ticks = np.linspace(0.0, self.w_max, side) if side > 1 else np.array([0.5 * self.w_max])
        w1, w2 = np.meshgrid(ticks, ticks, indexing="ij")
        return np.stack([w1.ravel(), w2.ravel()], axis=1)


def sdf_weights(phi):
    """Softmax map from process parameters to mixture weights on the simplex."""
    if isinstance(phi, ad.Tensor):
        return ad.softmax(phi, axis=-1)
    return special.softmax(np.asarray(phi, dtype=np.float64), axis=-1)


def _rbf_matrix(w: np.ndarray, cfg: SdfConfig) -> np.ndarray:
    """Normalized 2-D Gaussian bumps; rows index RBFs, columns wavenumbers."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    d2 = ((cfg.centers[:, None, :] - w[None, :, :]) ** 2).sum(-1)
    s2 = cfg.bandwidth ** 2
    return np.exp(-0.5 * d2 / s2) / (2.0 * np.pi * s2)


def sdf_eval(gamma, w, cfg: SdfConfig) -> np.ndarray:
    """Spectral density G(w) = sum_i gamma_i h(w; mu_i, sigma) at one or many wavenumbers."""
    w = np.asarray(w, dtype=np.float64)
    out = np.asarray(gamma, dtype=np.float64) @ _rbf_matrix(w.reshape(-1, 2), cfg)
    return out.reshape(w.shape[:-1]) if w.ndim > 1 else out[0]


class SpectralGrid:
    """Discretized one-sided spectral representation on an N_p x N_p pixel grid.

    ``n_freq`` x ``n_freq`` midpoint nodes cover [0, w_max]^2.  Each node
    carries two cosine families (w1 s1 + w2 s2 and w1 s1 - w2 s2), each with
    its own phase angle, so ``dim_psi = 2 * n_freq**2``.
    """

    def __init__(self, n_pixels: int = 32, n_freq: int = 16, sdf: SdfConfig | None = None):
        if n_pixels < 2 or n_freq < 1:
            raise ValueError("n_pixels >= 2 and n_freq >= 1 required")
        self.n_pixels = int(n_pixels)
        self.n_freq = int(n_freq)
        self.sdf = sdf or SdfConfig()
        dw = self.sdf.w_max / self.n_freq
        ticks = (np.arange(self.n_freq) + 0.5) * dw
        w1, w2 = np.meshgrid(ticks, ticks, indexing="ij")
        self.nodes = np.stack([w1.ravel(), w2.ravel()], axis=1)
        self.dw = dw
        # pixel centers; column index -> s1, row index -> s2
        c = (np.arange(self.n_pixels) + 0.5) / self.n_pixels
        s2, s1 = np.meshgrid(c, c, indexing="ij")
        coords = np.stack([s1.ravel(), s2.ravel()], axis=1)
        waves = np.concatenate([self.nodes, self.nodes * np.array([1.0, -1.0])], axis=0)
        self.wavevectors = waves
        arg = coords @ waves.T
        self._cos = np.cos(arg).T.copy()
        self._sin = np.sin(arg).T.copy()
        self._h = _rbf_matrix(self.nodes, self.sdf)

    @property
    def dim_psi(self) -> int:
        return 2 * self.n_freq ** 2

    @property
    def n_rbf(self) -> int:
        return self.sdf.n_rbf

    def node_density(self, phi) -> np.ndarray:
        """Spectral density at the grid nodes (numpy)."""
        return sdf_weights(np.asarray(phi, dtype=np.float64)) @ self._h

    def amplitudes(self, phi):
        """Per-term cosine amplitudes, repeated for both families, with sum(A^2) = 1."""
        gamma = sdf_weights(phi)
        if isinstance(gamma, ad.Tensor):
            dens = ad.matmul(gamma, self._h)
            share = dens / ad.tsum(dens, axis=-1, keepdims=True)
            amp = ad.sqrt(share)
            return ad.concat([amp, amp], axis=-1)
        dens = gamma @ self._h
        amp = np.sqrt(dens / dens.sum(axis=-1, keepdims=True))
        return np.concatenate([amp, amp], axis=-1)

    def covariance(self, phi, lag) -> np.ndarray:
        """Exact autocovariance of the discrete representation at lag vector(s)."""
        amp = np.asarray(self.amplitudes(np.asarray(phi, dtype=np.float64)))
        lag = np.atleast_2d(np.asarray(lag, dtype=np.float64))
        return (0.5 * amp ** 2 * np.cos(lag @ self.wavevectors.T)).sum(-1)


def phase_transform(psi_t):
    """Map standard-normal latents to phase angles uniform on [0, 2 pi].

    Uses the probability integral transform Psi = 2 pi Phi(psi_t).
    """
    if isinstance(psi_t, ad.Tensor):
        return (ad.erf(psi_t * (1.0 / math.sqrt(2.0))) + 1.0) * math.pi
    return (special.erf(np.asarray(psi_t) / math.sqrt(2.0)) + 1.0) * math.pi


def synthesize_field(phi, psi_t, grid: SpectralGrid):
    """Gaussian field values on the pixel grid.

    ``psi_t`` has shape (dim_psi,) or (B, dim_psi); ``phi`` has shape (Q,).
    Returns (N_p, N_p) or (B, N_p, N_p); a Tensor if either input is one.
    """
    use_ad = isinstance(phi, ad.Tensor) or isinstance(psi_t, ad.Tensor)
    shape = psi_t.shape
    if shape[-1] != grid.dim_psi:
        raise ValueError(f"phase vector length {shape[-1]} does not match spectral grid ({grid.dim_psi})")
    if phi.shape[-1] != grid.n_rbf:
        raise ValueError(f"phi length {phi.shape[-1]} does not match n_rbf={grid.n_rbf}")
    npx = grid.n_pixels
    if use_ad:
        phi, psi_t = ad.as_tensor(phi), ad.as_tensor(psi_t)
        amp = grid.amplitudes(phi)
        ang = phase_transform(psi_t)
        field = ad.matmul(amp * ad.cos(ang), grid._cos) - ad.matmul(amp * ad.sin(ang), grid._sin)
        return ad.reshape(field, shape[:-1] + (npx, npx))
    amp = grid.amplitudes(np.asarray(phi, dtype=np.float64))
    ang = phase_transform(np.asarray(psi_t, dtype=np.float64))
    field = (amp * np.cos(ang)) @ grid._cos - (amp * np.sin(ang)) @ grid._sin
    return field.reshape(shape[:-1] + (npx, npx))


def cutoff_from_vf(vf: float) -> float:
    """Threshold x0 with Pr(x_g > x0) = vf for a standard-normal field."""
    if not 0.0 < vf < 1.0:
        raise ValueError(f"volume fraction must lie in (0, 1), got {vf}")
    return float(special.ndtri(1.0 - vf))


def smooth_threshold(x_g, x0: float, eps: float = 25.0):
    """Relaxed phase indicator (tanh(eps (x_g - x0)) + 1) / 2."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(x_g, ad.Tensor):
        return (ad.tanh((x_g - x0) * eps) + 1.0) * 0.5
    return 0.5 * (np.tanh(eps * (np.asarray(x_g) - x0)) + 1.0)


def hard_threshold(x_g, x0: float) -> np.ndarray:
    """Binary phase indicator H(x_g - x0) as float64 {0, 1}."""
    return (np.asarray(x_g) > x0).astype(np.float64)


def sample_microstructures(phi, grid: SpectralGrid, vf: float, rng: np.random.Generator, n: int) -> np.ndarray:
    """Ancestral draws x ~ p(x | phi) (binary), shape (n, N_p, N_p)."""
    psi_t = rng.standard_normal((n, grid.dim_psi))
    return hard_threshold(synthesize_field(np.asarray(phi), psi_t, grid), cutoff_from_vf(vf))


@dataclass
class Microstructure:
    """A pixel grid plus the metadata written to its JSON sidecar."""

    grid: np.ndarray
    mode: str = "binary"
    vf: float = 0.5
    x0: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"microstructure must be square 2-D, got {self.grid.shape}")
        if self.mode not in ("binary", "smooth"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_pixels(self) -> int:
        return self.grid.shape[0]


def save_microstructure(ms: Microstructure, path) -> Path:
    """Write ``<path>.bin`` (little-endian float64, row-major) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(ms.grid.astype("<f8").tobytes(order="C"))
    meta = {"n_pixels": ms.n_pixels, "mode": ms.mode, "vf": ms.vf, "x0": ms.x0, "seed": ms.seed}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".bin")


def load_microstructure(path) -> Microstructure:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    n = meta["n_pixels"]
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    if raw.size != n * n:
        raise ValueError(f"{path}: expected {n * n} values, found {raw.size}")
    return Microstructure(raw.reshape(n, n).astype(np.float64), meta["mode"], meta["vf"], meta["x0"], meta.get("seed"))
