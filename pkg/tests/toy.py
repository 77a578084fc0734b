"""Two-dimensional linear-Gaussian toy: kappa | psi ~ N(phi + c psi, s^2), psi ~ N(0, 1)."""

import math

import numpy as np

from psinvert import tensorad as ad
from psinvert.surrogate import LOG2PI


class LinearGaussianToy:
    d_kappa = 1
    d_psi = 1

    def __init__(self, c=0.8, s=0.5):
        self.c, self.s = c, s

    def log_lik(self, kappa, phi, psi):
        mean = ad.as_tensor(phi) + ad.as_tensor(psi) * self.c
        r = (ad.as_tensor(kappa) - mean) * (1.0 / self.s)
        return ad.tsum(r * r, axis=-1) * -0.5 - (math.log(self.s) + 0.5 * LOG2PI)

    def predict(self, phi, psi):
        psi = np.asarray(psi)
        m = np.asarray(phi)[0] + self.c * psi[:, :1]
        return m, np.full_like(m, self.s ** 2)

    # closed forms for the gaussian utility exp(-tau (kappa - t)^2)
    def marginal_var(self):
        return self.s ** 2 + self.c ** 2

    def log_u_expected(self, phi, target, tau):
        v = self.marginal_var()
        return -0.5 * math.log1p(2 * tau * v) - tau * (phi - target) ** 2 / (1 + 2 * tau * v)

    def posterior(self, phi, target, tau):
        s2 = self.s ** 2
        P = np.array([[2 * tau + 1 / s2, -self.c / s2], [-self.c / s2, self.c ** 2 / s2 + 1]])
        b = np.array([2 * tau * target + phi / s2, -self.c * phi / s2])
        cov = np.linalg.inv(P)
        return cov @ b, cov


def lowrank_split(cov):
    """Write a 2x2 SPD matrix as diag(d) + l l^T with d > 0."""
    lo, hi = cov[0, 1] ** 2 / cov[1, 1], cov[0, 0]
    l1 = math.sqrt(math.sqrt(lo * hi)) if lo > 0 else math.sqrt(0.5 * hi)
    l2 = cov[0, 1] / l1
    d = np.array([cov[0, 0] - l1 ** 2, cov[1, 1] - l2 ** 2])
    return d, np.array([[l1], [l2]])
