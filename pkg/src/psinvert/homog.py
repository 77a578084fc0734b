"""Structure-property oracle: periodic FEM homogenization of pixel microstructures.

One bilinear quadrilateral per pixel on the unit cell, 2x2 Gauss quadrature,
periodicity by identifying opposite boundary nodes.  Each load case imposes a
macroscopic gradient (strain for elasticity, temperature gradient for
conduction) and solves for the periodic fluctuation; the mean fluctuation is
pinned by a Lagrange multiplier.  Effective tensors are volume averages of the
microscopic flux, which satisfy Hill's energy condition at the discrete level.

Pixel convention: ``x[r, c]`` with the column index along s1 and the row index
along s2.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache, partial

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

__all__ = [
    "MaterialConfig",
    "PeriodicMesh",
    "FemSolution",
    "EffectiveTensors",
    "SingularSystemError",
    "assemble_elastic",
    "assemble_thermal",
    "solve_cell",
    "effective_elasticity",
    "effective_conductivity",
    "effective_tensors",
    "properties_case1",
    "properties_case2",
    "PROPERTY_MAPS",
    "label_batch",
    "voigt_reuss_elastic",
    "voigt_reuss_thermal",
]

_GP = np.array([-1.0, 1.0]) / np.sqrt(3.0)


class SingularSystemError(np.linalg.LinAlgError):
    def __init__(self, nullity):
        self.nullity = nullity
        super().__init__(f"cell problem is singular beyond the pinned rigid modes (null-space dimension {nullity})")


@dataclass(frozen=True)
class MaterialConfig:
    """Isotropic phases; ``E*`` Young's moduli, ``a*`` conductivities."""

    E0: float = 1.0
    E1: float = 50.0
    nu: float = 0.3
    a0: float = 1.0
    a1: float = 50.0
    plane: str = "strain"

    def __post_init__(self):
        if min(self.E0, self.E1, self.a0, self.a1) <= 0:
            raise ValueError("moduli and conductivities must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")
        if self.plane not in ("strain", "stress"):
            raise ValueError(f"plane must be 'strain' or 'stress', got {self.plane!r}")

    @classmethod
    def with_contrast(cls, contrast: float = 50.0, nu: float = 0.3, plane: str = "strain"):
        return cls(1.0, contrast, nu, 1.0, contrast, plane)

    def stiffness(self, E: float) -> np.ndarray:
        """3x3 Voigt matrix (engineering shear strain)."""
        nu = self.nu
        if self.plane == "strain":
            f = E / ((1 + nu) * (1 - 2 * nu))
            return f * np.array([[1 - nu, nu, 0.0], [nu, 1 - nu, 0.0], [0.0, 0.0, 0.5 - nu]])
        f = E / (1 - nu ** 2)
        return f * np.array([[1.0, nu, 0.0], [nu, 1.0, 0.0], [0.0, 0.0, 0.5 * (1 - nu)]])

    @property
    def C0(self) -> np.ndarray:
        return self.stiffness(self.E0)

    @property
    def C1(self) -> np.ndarray:
        return self.stiffness(self.E1)


class PeriodicMesh:
    """N x N unit-cell mesh with periodic node identification (N^2 nodes)."""

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("need at least 2 pixels per side")
        self.n = int(n)
        self.h = 1.0 / n
        r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        r, c = r.ravel(), c.ravel()

        def node(rr, cc):
            return (rr % n) * n + (cc % n)

        # local node order: (s1, s2) = (0,0), (1,0), (1,1), (0,1)
        self.connectivity = np.stack([node(r, c), node(r, c + 1), node(r + 1, c + 1), node(r + 1, c)], axis=1)

    @property
    def n_nodes(self) -> int:
        return self.n * self.n

    @property
    def n_elements(self) -> int:
        return self.n * self.n

    @property
    def element_area(self) -> float:
        return self.h * self.h


@lru_cache(maxsize=None)
def _mesh(n: int) -> PeriodicMesh:
    return PeriodicMesh(n)


@lru_cache(maxsize=None)
def _shape_gradients(h: float) -> np.ndarray:
    """dN/ds at the four Gauss points: shape (4 gp, 2 dims, 4 nodes)."""
    xi_n = np.array([-1.0, 1.0, 1.0, -1.0])
    eta_n = np.array([-1.0, -1.0, 1.0, 1.0])
    out = []
    for eta in _GP:
        for xi in _GP:
            dxi = 0.25 * xi_n * (1 + eta * eta_n)
            deta = 0.25 * eta_n * (1 + xi * xi_n)
            out.append(np.stack([dxi, deta]) * (2.0 / h))
    return np.array(out)


def _b_elastic(h: float) -> np.ndarray:
    """Strain-displacement matrices per Gauss point: (4, 3, 8), dofs (u1,u2) per node."""
    G = _shape_gradients(h)
    B = np.zeros((4, 3, 8))
    B[:, 0, 0::2] = G[:, 0]
    B[:, 1, 1::2] = G[:, 1]
    B[:, 2, 0::2] = G[:, 1]
    B[:, 2, 1::2] = G[:, 0]
    return B


def _b_thermal(h: float) -> np.ndarray:
    return _shape_gradients(h)


# -- generic assembly ------------------------------------------------------

@dataclass
class _CellProblem:
    """Physics-specific pieces for the shared assembly path."""

    B: np.ndarray          # (gp, ncomp, ndof_el)
    dofs: np.ndarray       # (n_el, ndof_el) global dof indices
    n_dof: int
    n_fields: int          # components pinned by the multiplier
    moduli: np.ndarray     # (n_el, ncomp, ncomp), per-element constitutive matrix
    weight: float          # quadrature weight x Jacobian per gauss point


def _element_dofs(mesh: PeriodicMesh, n_fields: int) -> np.ndarray:
    conn = mesh.connectivity
    return (conn[:, :, None] * n_fields + np.arange(n_fields)).reshape(len(conn), -1)


def _cell_problem(x: np.ndarray, elastic: bool, mat: MaterialConfig) -> _CellProblem:
    x = _check_binary(x)
    n = x.shape[0]
    mesh = _mesh(n)
    phase = x.ravel().astype(bool)
    if elastic:
        B = _b_elastic(mesh.h)
        per_phase = np.stack([mat.C0, mat.C1])
        nf = 2
    else:
        B = _b_thermal(mesh.h)
        per_phase = np.stack([mat.a0 * np.eye(2), mat.a1 * np.eye(2)])
        nf = 1
    return _CellProblem(
        B=B,
        dofs=_element_dofs(mesh, nf),
        n_dof=mesh.n_nodes * nf,
        n_fields=nf,
        moduli=per_phase[phase.astype(int)],
        weight=0.25 * mesh.element_area,
    )


def _assemble(prob: _CellProblem) -> sp.csr_matrix:
    # element matrices: sum_gp w B^T D B, computed once per distinct phase
    unique, inverse = np.unique(prob.moduli.reshape(len(prob.moduli), -1), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    ke = np.stack([
        prob.weight * np.einsum("gki,kl,glj->ij", prob.B, D.reshape(prob.B.shape[1], -1), prob.B) for D in unique
    ])
    vals = ke[inverse]
    ndof_el = prob.dofs.shape[1]
    rows = np.repeat(prob.dofs, ndof_el, axis=1).ravel()
    cols = np.tile(prob.dofs, (1, ndof_el)).ravel()
    K = sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(prob.n_dof, prob.n_dof)).tocsr()
    K.sum_duplicates()
    return K


def _saddle(K: sp.csr_matrix, n_fields: int) -> sp.csc_matrix:
    """Append one multiplier per field component pinning the mean fluctuation."""
    n = K.shape[0]
    n_nodes = n // n_fields
    rows = np.arange(n)
    cols = rows % n_fields
    C = sp.coo_matrix((np.full(n, 1.0 / n_nodes), (cols, rows)), shape=(n_fields, n))
    return sp.bmat([[K, C.T], [C, None]], format="csc")


def _load_vectors(prob: _CellProblem, macro: np.ndarray) -> np.ndarray:
    """Right-hand sides -int B^T D E for each imposed macroscopic gradient column."""
    # sigma0 per element and gp: D @ E  -> (n_el, ncomp, ncases)
    s0 = np.einsum("eij,jc->eic", prob.moduli, macro)
    fe = -prob.weight * np.einsum("gki,ekc->eic", prob.B, s0)
    F = np.zeros((prob.n_dof, macro.shape[1]))
    np.add.at(F, prob.dofs.ravel(), fe.reshape(-1, macro.shape[1]))
    return F


def assemble_elastic(x, mat: MaterialConfig | None = None) -> sp.csc_matrix:
    """Saddle-point stiffness (periodic fluctuations + mean-pinning multipliers)."""
    prob = _cell_problem(x, True, mat or MaterialConfig())
    return _saddle(_assemble(prob), prob.n_fields)


def assemble_thermal(x, mat: MaterialConfig | None = None) -> sp.csc_matrix:
    prob = _cell_problem(x, False, mat or MaterialConfig())
    return _saddle(_assemble(prob), prob.n_fields)


@dataclass
class FemSolution:
    """Solved cell problem for a set of load cases (columns of ``macro``)."""

    fluctuation: np.ndarray      # (n_dof, ncases)
    multipliers: np.ndarray      # (n_fields, ncases)
    strain: np.ndarray           # (n_el, gp, ncomp, ncases)
    stress: np.ndarray           # (n_el, gp, ncomp, ncases)
    macro: np.ndarray            # (ncomp, ncases)
    residual: float

    @property
    def mean_stress(self) -> np.ndarray:
        return self.stress.mean(axis=(0, 1))

    @property
    def mean_strain(self) -> np.ndarray:
        return self.strain.mean(axis=(0, 1))

    def hill_gap(self) -> float:
        """Relative mismatch between <sigma:eps> and <sigma>:<eps> over all load cases."""
        local = np.einsum("egkc,egkc->c", self.stress, self.strain) / (self.stress.shape[0] * self.stress.shape[1])
        macro = np.einsum("kc,kc->c", self.mean_stress, self.mean_strain)
        return float(np.max(np.abs(local - macro) / np.maximum(np.abs(local), 1e-300)))


def solve_cell(x, elastic: bool, mat: MaterialConfig | None = None, macro: np.ndarray | None = None) -> FemSolution:
    """Solve the periodic cell problem for the unit load cases (or given ``macro`` columns)."""
    mat = mat or MaterialConfig()
    prob = _cell_problem(x, elastic, mat)
    ncomp = prob.B.shape[1]
    macro = np.eye(ncomp) if macro is None else np.asarray(macro, dtype=np.float64)
    A = _saddle(_assemble(prob), prob.n_fields)
    F = _load_vectors(prob, macro)
    rhs = np.vstack([F, np.zeros((prob.n_fields, macro.shape[1]))])
    try:
        lu = splu(A)
    except RuntimeError:
        raise SingularSystemError(_nullity(A)) from None
    sol = lu.solve(rhs)
    res = np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300)
    v = sol[: prob.n_dof]
    ue = v[prob.dofs]                                     # (n_el, ndof_el, ncases)
    strain = macro[None, None] + np.einsum("gki,eic->egkc", prob.B, ue)
    stress = np.einsum("ekl,eglc->egkc", prob.moduli, strain)
    return FemSolution(v, sol[prob.n_dof:], strain, stress, macro, float(res))


def _nullity(A) -> int | str:
    if A.shape[0] > 4000:
        return "unknown"
    dense = A.toarray()
    return int(dense.shape[0] - np.linalg.matrix_rank(dense))


def _check_binary(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"expected a square 2-D microstructure, got shape {x.shape}")
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("oracle requires a binary {0,1} microstructure")
    return x


@dataclass
class EffectiveTensors:
    C_eff: np.ndarray | None
    a_eff: np.ndarray | None


def effective_elasticity(x, mat: MaterialConfig | None = None) -> np.ndarray:
    """3x3 Voigt effective stiffness; column c is <sigma> under the c-th unit strain mode."""
    sol = solve_cell(x, True, mat)
    return sol.mean_stress


def effective_conductivity(x, mat: MaterialConfig | None = None) -> np.ndarray:
    """2x2 effective conductivity; column j is <flux> under unit mean gradient e_j."""
    sol = solve_cell(x, False, mat)
    return sol.mean_stress


def effective_tensors(x, mat: MaterialConfig | None = None, elastic: bool = True, thermal: bool = True) -> EffectiveTensors:
    return EffectiveTensors(
        effective_elasticity(x, mat) if elastic else None,
        effective_conductivity(x, mat) if thermal else None,
    )


def properties_case1(x, mat: MaterialConfig | None = None) -> np.ndarray:
    """(a_eff[0,0], (C_eff[0,0] + C_eff[1,1]) / 2)."""
    a = effective_conductivity(x, mat)
    C = effective_elasticity(x, mat)
    return np.array([a[0, 0], 0.5 * (C[0, 0] + C[1, 1])])


def properties_case2(x, mat: MaterialConfig | None = None) -> np.ndarray:
    """(a_eff[0,0], a_eff[1,1])."""
    a = effective_conductivity(x, mat)
    return np.array([a[0, 0], a[1, 1]])


PROPERTY_MAPS = {"case1": properties_case1, "case2": properties_case2}


def _label_one(x, case: str, mat: MaterialConfig):
    try:
        return PROPERTY_MAPS[case](x, mat)
    except (np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("oracle failed: %s", exc)
        return None


def label_batch(xs, case: str, mat: MaterialConfig | None = None, threads: int = 1) -> list:
    """Oracle labels for a batch; failed solves yield ``None`` in place."""
    mat = mat or MaterialConfig()
    fn = partial(_label_one, case=case, mat=mat)
    if threads <= 1 or len(xs) < 2:
        return [fn(x) for x in xs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, list(xs), chunksize=max(1, len(xs) // (4 * threads))))


def voigt_reuss_elastic(vf: float, mat: MaterialConfig):
    """(Reuss, Voigt) bounds on the Voigt stiffness matrix for phase-1 fraction ``vf``."""
    C0, C1 = mat.C0, mat.C1
    voigt = (1 - vf) * C0 + vf * C1
    reuss = np.linalg.inv((1 - vf) * np.linalg.inv(C0) + vf * np.linalg.inv(C1))
    return reuss, voigt


def voigt_reuss_thermal(vf: float, mat: MaterialConfig):
    voigt = ((1 - vf) * mat.a0 + vf * mat.a1) * np.eye(2)
    reuss = 1.0 / ((1 - vf) / mat.a0 + vf / mat.a1) * np.eye(2)
    return reuss, voigt
