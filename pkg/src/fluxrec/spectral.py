"""Spectral calculus on the inner boundary loop.

The loop GammaI is a closed polygonal curve; its 1D P1 Laplace-Beltrami
stiffness S_i together with the lumped arc-length mass M_i defines the
generalized eigenproblem S_i e = mu M_i e.  The self-adjoint operator of
interest is (I + Laplace-Beltrami)^(1/2) with eigenvalues
lambda_n = sqrt(1 + mu_n) >= 1, which makes the discrete H^(1/2) inner
product  (q, v)_(1/2) = sum lambda_n c_n d_n  hold exactly, where c, d
are eigencoefficients in the M_i inner product.

Fractional powers, fractional Sobolev norms and the spectral cutoff
projectors P_lambda are all exact multiplier operations on the finite
spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatchError,
    EigensolverFailureError,
    InvalidGeometryError,
)
from .fem import BoundaryVector
from .geometry import GAMMA_I, BoundaryIndexMap, Mesh, boundary_map

_BASIS_CACHE: dict[int, "SpectralBasis"] = {}


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Eigenpairs of the boundary operator on GammaI.

    eigenvalues are ascending with lambda_1 = 1; eigenvector columns are
    orthonormal in the lumped M_i inner product.
    """

    mesh: Mesh
    bmap: BoundaryIndexMap
    eigenvalues: np.ndarray     # (n,) lambda_n >= 1
    eigenvectors: np.ndarray    # (n, n), column n is e_n per boundary vertex
    mass_diag: np.ndarray       # lumped M_i diagonal (= arc weights)
    stiffness: np.ndarray       # dense 1D curve stiffness S_i

    def __post_init__(self):
        for arr in (self.eigenvalues, self.eigenvectors, self.mass_diag, self.stiffness):
            arr.flags.writeable = False

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def mode(self, n: int) -> BoundaryVector:
        """n-th eigenvector as a boundary vector (0-based)."""
        return BoundaryVector(GAMMA_I, self.eigenvectors[:, n].copy())


@dataclass(eq=False)
class FluxCoefficients:
    """Eigencoefficients c_n = (q, e_n) on GammaI."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


def build_spectral_basis(mesh: Mesh) -> SpectralBasis:
    """Full symmetric generalized eigendecomposition of the loop operator.

    Results are cached per mesh; the basis is immutable and safe to
    share.  Requires at least 8 vertices on GammaI.
    """
    cached = _BASIS_CACHE.get(id(mesh))
    if cached is not None and cached.mesh is mesh:
        return cached

    bmap = boundary_map(mesh, GAMMA_I)
    n = len(bmap)
    if n < 8:
        raise InvalidGeometryError(f"GammaI loop has {n} vertices, need >= 8")

    pts = mesh.vertices[bmap.vertex_indices]
    edge_len = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    stiff = np.zeros((n, n))
    for j in range(n):
        jp = (j + 1) % n
        w = 1.0 / edge_len[j]
        stiff[j, j] += w
        stiff[jp, jp] += w
        stiff[j, jp] -= w
        stiff[jp, j] -= w

    mass = bmap.weights
    inv_sqrt = 1.0 / np.sqrt(mass)
    sym = inv_sqrt[:, None] * stiff * inv_sqrt[None, :]
    sym = 0.5 * (sym + sym.T)
    try:
        mu, y = scipy.linalg.eigh(sym)
    except scipy.linalg.LinAlgError as exc:
        raise EigensolverFailureError(str(exc)) from exc
    # the constant mode carries mu = 0 exactly; snap eigensolver dust
    mu = np.where(mu < 1e-9, 0.0, mu)
    vecs = inv_sqrt[:, None] * y

    # canonical sign: largest-magnitude component positive
    for col in range(n):
        k = int(np.argmax(np.abs(vecs[:, col])))
        if vecs[k, col] < 0.0:
            vecs[:, col] = -vecs[:, col]

    lambdas = np.sqrt(1.0 + mu)
    gram = vecs.T @ (mass[:, None] * vecs)
    ortho_err = float(np.abs(gram - np.eye(n)).max())
    if ortho_err > 1e-10:
        raise EigensolverFailureError(f"orthonormality residual {ortho_err:.3e}")

    basis = SpectralBasis(mesh, bmap, lambdas, vecs, mass, stiff)
    if len(_BASIS_CACHE) >= 16:
        _BASIS_CACHE.clear()
    _BASIS_CACHE[id(mesh)] = basis
    return basis


def _check_dim(basis: SpectralBasis, values: np.ndarray) -> None:
    if values.shape != (basis.n_modes,):
        raise DimensionMismatchError(
            f"expected {basis.n_modes} boundary values, got {values.shape}"
        )


def analyze(basis: SpectralBasis, q: BoundaryVector) -> FluxCoefficients:
    """Eigencoefficients of q; Parseval holds exactly in the lumped norm."""
    _check_dim(basis, q.values)
    return FluxCoefficients(basis.eigenvectors.T @ (basis.mass_diag * q.values))


def synthesize(basis: SpectralBasis, c: FluxCoefficients) -> BoundaryVector:
    _check_dim(basis, c.values)
    return BoundaryVector(GAMMA_I, basis.eigenvectors @ c.values)


def fractional_apply(basis: SpectralBasis, s: float, q: BoundaryVector) -> BoundaryVector:
    """Spectral multiplier lambda_n^s; exact on the finite spectrum."""
    c = analyze(basis, q)
    return synthesize(basis, FluxCoefficients(basis.eigenvalues ** s * c.values))


def sobolev_norm(basis: SpectralBasis, s: float, q: BoundaryVector) -> float:
    """Discrete H^s(GammaI) norm (sum lambda_n^(2s) c_n^2)^(1/2), s in [-1/2, 1]."""
    if not -0.5 <= s <= 1.0:
        raise ValueError(f"s={s} outside supported range [-1/2, 1]")
    c = analyze(basis, q)
    return float(np.sqrt((basis.eigenvalues ** (2.0 * s) * c.values ** 2).sum()))


def project(basis: SpectralBasis, lambda_cut: float, q: BoundaryVector) -> BoundaryVector:
    """Orthogonal projection onto modes with lambda_n <= lambda_cut (ties kept)."""
    if lambda_cut < 1.0:
        raise ValueError(f"lambda_cut={lambda_cut} below the spectrum floor 1")
    c = analyze(basis, q)
    kept = np.where(basis.eigenvalues <= lambda_cut, c.values, 0.0)
    return synthesize(basis, FluxCoefficients(kept))


def tail_norm(basis: SpectralBasis, lambda_cut: float, q: BoundaryVector) -> float:
    """||(I - P_lambda) q|| in the lumped L2(GammaI) norm, from coefficients."""
    c = analyze(basis, q)
    tail = c.values[basis.eigenvalues > lambda_cut]
    return float(np.sqrt((tail * tail).sum()))


def synthesize_flux_with_smoothness(basis: SpectralBasis, s: float, eps: float,
                                    seed: int) -> BoundaryVector:
    """Random flux of prescribed smoothness, unit L2(GammaI) norm.

    Coefficients are sign-randomized lambda_n^-(s + 1/2 + eps), which
    keeps the H^s norm finite under boundary refinement while norms of
    order above s + eps diverge.  Deterministic per seed.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if not 0.0 < s <= 0.5:
        raise ValueError(f"s={s} outside (0, 1/2]")
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=basis.n_modes)
    coeffs = signs * basis.eigenvalues ** (-(s + 0.5 + eps))
    coeffs /= np.linalg.norm(coeffs)
    return synthesize(basis, FluxCoefficients(coeffs))


def band_limited_flux(basis: SpectralBasis, n_modes: int, seed: int) -> BoundaryVector:
    """Random flux supported on the first n_modes eigenmodes, unit L2 norm."""
    rng = np.random.default_rng(seed)
    coeffs = np.zeros(basis.n_modes)
    coeffs[:n_modes] = rng.standard_normal(n_modes)
    coeffs /= np.linalg.norm(coeffs)
    return synthesize(basis, FluxCoefficients(coeffs))
