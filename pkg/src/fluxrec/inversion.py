"""Affine forward operator and Tikhonov inversion of the inner flux.

The measurement map q -> trace of the solution on GammaA is affine,
A(q) = K q + b, with b the response to zero flux (carrying f and u_a).
K is assembled column by column from unit nodal fluxes, reusing one
factorization; beyond _DENSE_LIMIT inner-boundary unknowns the operator
stays matrix-free.

All boundary inner products are the lumped arc-weight L2 products, so
the normal equations of the objective

    (1/rho) ||A(q) - u_delta||_a^2 + (1/2) ||q||_i^2

read  (K^T M_a K + (rho/2) M_i) q = K^T M_a (u_delta - b).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .errors import (
    BracketFailureError,
    DimensionMismatchError,
    SolverFailureError,
    TagMismatchError,
)
from .fem import (
    BoundaryVector,
    FactorizedSystem,
    ProblemData,
    assemble_rhs,
    boundary_l2_norm,
    trace,
)
from .geometry import GAMMA_A, GAMMA_I, Mesh, boundary_map
from .spectral import SpectralBasis, sobolev_norm

logger = logging.getLogger(__name__)

_DENSE_LIMIT = 512
RHO_BRACKET = (1e-14, 1e6)


@dataclass(eq=False)
class AffineForwardOperator:
    """Discrete A(q) = K q + b with its boundary weight vectors."""

    mesh: Mesh
    data: ProblemData
    K: np.ndarray | None        # (n_a, n_i) when dense, None when matrix-free
    b: np.ndarray               # (n_a,)
    w_a: np.ndarray             # lumped weights on GammaA
    w_i: np.ndarray             # lumped weights on GammaI
    system: FactorizedSystem

    @property
    def n_i(self) -> int:
        return len(self.w_i)

    @property
    def n_a(self) -> int:
        return len(self.w_a)

    def apply_linear(self, q_values: np.ndarray) -> np.ndarray:
        """K q, the linear part of the forward map."""
        q_values = np.asarray(q_values, dtype=float)
        if q_values.shape != (self.n_i,):
            raise DimensionMismatchError(f"flux length {q_values.shape} != {self.n_i}")
        if self.K is not None:
            return self.K @ q_values
        u = self.system.solve_flux(BoundaryVector(GAMMA_I, q_values))
        return trace(u, GAMMA_A).values

    def apply(self, q: BoundaryVector) -> BoundaryVector:
        """A(q) = K q + b on GammaA."""
        if q.tag != GAMMA_I:
            raise TagMismatchError(f"flux must be tagged {GAMMA_I}, got {q.tag}")
        return BoundaryVector(GAMMA_A, self.apply_linear(q.values) + self.b)

    def apply_adjoint(self, w_values: np.ndarray) -> np.ndarray:
        """K* w with respect to the weighted boundary inner products."""
        w_values = np.asarray(w_values, dtype=float)
        if w_values.shape != (self.n_a,):
            raise DimensionMismatchError(f"trace length {w_values.shape} != {self.n_a}")
        if self.K is not None:
            return (self.K.T @ (self.w_a * w_values)) / self.w_i
        # matrix-free: K = T A^-1 B, so K* = M_i^-1 B^T A^-1 T^T M_a
        bmap_a = boundary_map(self.mesh, GAMMA_A)
        load = np.zeros(self.mesh.n_vertices)
        load[bmap_a.vertex_indices] = self.w_a * w_values
        v = self.system.solve(load)
        bt = -_flux_load_matrix_T(self.mesh, v.values)
        return bt / self.w_i

    def misfit_norm(self, trace_values: np.ndarray, u_delta: np.ndarray) -> float:
        d = trace_values - u_delta
        return float(np.sqrt((self.w_a * d * d).sum()))


@dataclass(eq=False)
class TikhonovResult:
    """Solution of the regularized normal equations for one rho."""

    q_rec: BoundaryVector
    rho: float
    residual_norm: float
    solution_norm: float
    admissible: bool | None
    iterations: int


def _flux_load_matrix_T(mesh: Mesh, v: np.ndarray) -> np.ndarray:
    """B^T v where B maps GammaI flux coefficients to the (negated) load."""
    bmap_i = boundary_map(mesh, GAMMA_I)
    pos = {int(x): i for i, x in enumerate(bmap_i.vertex_indices)}
    out = np.zeros(len(bmap_i))
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag != GAMMA_I:
            continue
        length = float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
        ia, ib = pos[int(a)], pos[int(b)]
        out[ia] += length * (2.0 * v[a] + v[b]) / 6.0
        out[ib] += length * (v[a] + 2.0 * v[b]) / 6.0
    return out


def build_forward_operator(mesh: Mesh, data: ProblemData,
                           dense: bool | None = None) -> AffineForwardOperator:
    """Assemble A(q) = K q + b, reusing one factorization for all columns.

    K is dense for n_i <= 512 (enables SVD diagnostics), matrix-free
    beyond; ``dense`` overrides the size rule.
    """
    system = FactorizedSystem(mesh, data)
    bmap_i = boundary_map(mesh, GAMMA_I)
    bmap_a = boundary_map(mesh, GAMMA_A)
    n_i = len(bmap_i)

    b = trace(system.solve_flux(None), GAMMA_A).values
    if dense is None:
        dense = n_i <= _DENSE_LIMIT

    K = None
    if dense:
        zero_data = ProblemData(data.alpha, data.k, np.zeros(mesh.n_vertices),
                                np.zeros(len(bmap_a)))
        loads = np.empty((mesh.n_vertices, n_i))
        for j in range(n_i):
            e = np.zeros(n_i)
            e[j] = 1.0
            loads[:, j] = assemble_rhs(mesh, zero_data, BoundaryVector(GAMMA_I, e))
        if system._lu is None:
            raise SolverFailureError("dense K assembly requires the direct factorization")
        sol = system._lu.solve(loads)
        K = sol[bmap_a.vertex_indices, :]
    return AffineForwardOperator(mesh, data, K, b, bmap_a.weights, bmap_i.weights, system)


def adjoint_apply(op: AffineForwardOperator, w: BoundaryVector) -> BoundaryVector:
    """K* w on GammaI, satisfying (Kq, w)_a = (q, K*w)_i exactly."""
    if w.tag != GAMMA_A:
        raise TagMismatchError(f"adjoint input must be tagged {GAMMA_A}, got {w.tag}")
    return BoundaryVector(GAMMA_I, op.apply_adjoint(w.values))


def whitened_singular_values(op: AffineForwardOperator) -> np.ndarray:
    """Singular values of M_a^(1/2) K M_i^(-1/2); decay quantifies ill-posedness."""
    if op.K is None:
        raise SolverFailureError("singular-value diagnostics need the dense operator")
    white = np.sqrt(op.w_a)[:, None] * op.K / np.sqrt(op.w_i)[None, :]
    return scipy.linalg.svdvals(white)


def add_noise(mesh: Mesh, u_exact: BoundaryVector, delta: float, seed: int) -> BoundaryVector:
    """Gaussian perturbation scaled to exact L2(GammaA) norm delta."""
    if u_exact.tag != GAMMA_A:
        raise TagMismatchError(f"data trace must be tagged {GAMMA_A}, got {u_exact.tag}")
    if delta < 0.0:
        raise ValueError("delta must be >= 0")
    if delta == 0.0:
        return BoundaryVector(GAMMA_A, u_exact.values.copy())
    rng = np.random.default_rng(seed)
    for _ in range(2):
        xi = rng.standard_normal(len(u_exact.values))
        nrm = boundary_l2_norm(mesh, BoundaryVector(GAMMA_A, xi))
        if nrm > 0.0:
            return BoundaryVector(GAMMA_A, u_exact.values + delta * xi / nrm)
    raise SolverFailureError("degenerate zero noise draw twice in a row")


def tikhonov_objective(op: AffineForwardOperator, q_values: np.ndarray,
                       u_delta: np.ndarray, rho: float) -> float:
    """(1/rho) ||K q + b - u_delta||_a^2 + (1/2) ||q||_i^2."""
    r = op.apply_linear(q_values) + op.b - u_delta
    misfit = float((op.w_a * r * r).sum())
    penalty = float((op.w_i * q_values * q_values).sum())
    return misfit / rho + 0.5 * penalty


def tikhonov_solve(op: AffineForwardOperator, u_delta: BoundaryVector,
                   rho: float) -> TikhonovResult:
    """Minimizer of the Tikhonov objective via the normal equations."""
    if rho <= 0.0:
        raise ValueError(f"rho must be positive, got {rho}")
    if u_delta.tag != GAMMA_A:
        raise TagMismatchError(f"data must be tagged {GAMMA_A}, got {u_delta.tag}")
    ud = u_delta.values
    rhs_vec = _normal_rhs(op, ud)

    iterations = 0
    if op.K is not None:
        G = op.K.T @ (op.w_a[:, None] * op.K) + np.diag(0.5 * rho * op.w_i)
        try:
            cho = scipy.linalg.cho_factor(G)
            q = scipy.linalg.cho_solve(cho, rhs_vec)
        except scipy.linalg.LinAlgError as exc:
            raise SolverFailureError(f"normal equations not SPD: {exc}") from exc
        # one refinement step guards the 1e-10 contract near rho ~ 0
        q += scipy.linalg.cho_solve(cho, rhs_vec - G @ q)
        resid = float(np.linalg.norm(G @ q - rhs_vec))
        matvec = lambda x: G @ x
    else:
        def matvec(x):
            return op.apply_adjoint(op.apply_linear(x)) * op.w_i + 0.5 * rho * op.w_i * x

        lin = spla.LinearOperator((op.n_i, op.n_i), matvec=matvec)
        prec = spla.LinearOperator((op.n_i, op.n_i),
                                   matvec=lambda x: x / (0.5 * rho * op.w_i))
        counter = _CgCounter()
        q, info = spla.cg(lin, rhs_vec, rtol=1e-13, atol=0.0, maxiter=50 * op.n_i,
                          M=prec, callback=counter)
        iterations = counter.count
        if info != 0:
            raise SolverFailureError(f"normal-equation CG did not converge (info={info})")
        resid = float(np.linalg.norm(matvec(q) - rhs_vec))

    scale = float(np.linalg.norm(rhs_vec))
    if scale > 0.0 and resid / scale > 1e-10:
        raise SolverFailureError(f"normal-equation residual {resid / scale:.3e} above 1e-10")

    q_rec = BoundaryVector(GAMMA_I, q)
    residual_norm = op.misfit_norm(op.apply_linear(q) + op.b, ud)
    solution_norm = float(np.sqrt((op.w_i * q * q).sum()))
    return TikhonovResult(q_rec, float(rho), residual_norm, solution_norm, None, iterations)


class _CgCounter:
    def __init__(self):
        self.count = 0

    def __call__(self, _):
        self.count += 1


def _normal_rhs(op: AffineForwardOperator, u_delta: np.ndarray) -> np.ndarray:
    if op.K is not None:
        return op.K.T @ (op.w_a * (u_delta - op.b))
    return op.apply_adjoint(u_delta - op.b) * op.w_i


def choose_rho_discrepancy(op: AffineForwardOperator, u_delta: BoundaryVector,
                           delta: float, tau_d: float = 1.5) -> float:
    """Morozov choice by bisection on log rho.

    Converges on the largest rho whose residual stays at or below
    tau_d * delta, so the returned residual sits in [delta, tau_d*delta]
    near its upper edge (the classical "residual matches the noise
    level" rule).  The residual is non-decreasing in rho, asserted on
    the evaluation trace; failure to bracket raises BracketFailureError
    with a diagnosis of which side failed.
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    if tau_d <= 1.0:
        raise ValueError("tau_d must be > 1")

    lo, hi = RHO_BRACKET
    evaluations: list[tuple[float, float]] = []

    def residual(rho: float) -> float:
        r = tikhonov_solve(op, u_delta, rho).residual_norm
        evaluations.append((rho, r))
        return r

    r_lo = residual(lo)
    if r_lo > tau_d * delta:
        raise BracketFailureError(
            f"residual {r_lo:.3e} at rho={lo:.1e} exceeds tau_d*delta={tau_d * delta:.3e}; "
            "the mesh cannot fit the data this closely (under-resolved mesh)"
        )
    r_hi = residual(hi)
    if r_hi < delta:
        raise BracketFailureError(
            f"residual {r_hi:.3e} at rho={hi:.1e} is below delta={delta:.3e}; "
            "delta lies above the data scale (q = 0 already over-fits)"
        )
    if r_hi <= tau_d * delta:
        _assert_monotone(evaluations)
        return hi

    best_in_band = lo if r_lo >= delta else None
    log_lo, log_hi = np.log10(lo), np.log10(hi)
    for _ in range(200):
        mid = 10.0 ** (0.5 * (log_lo + log_hi))
        r_mid = residual(mid)
        if r_mid > tau_d * delta:
            log_hi = np.log10(mid)
        else:
            log_lo = np.log10(mid)
            if r_mid >= delta:
                best_in_band = mid
        if log_hi - log_lo < 1e-3 and best_in_band is not None:
            _assert_monotone(evaluations)
            return best_in_band
    raise BracketFailureError("bisection exhausted its iteration budget")


def _assert_monotone(evaluations: list[tuple[float, float]]) -> None:
    evaluations = sorted(evaluations)
    for (r1, v1), (r2, v2) in zip(evaluations, evaluations[1:]):
        if v2 < v1 - 1e-10 * max(v1, 1.0):
            raise SolverFailureError(
                f"residual not monotone in rho: {v1:.6e}@{r1:.3e} vs {v2:.6e}@{r2:.3e}"
            )


def admissibility_check(q_rec: BoundaryVector, q_dag: BoundaryVector,
                        basis: SpectralBasis, m0: float) -> bool:
    """Closed-ball test ||q_rec - q_dag||_(1/2, GammaI) <= m0."""
    diff = BoundaryVector(GAMMA_I, q_rec.values - q_dag.values)
    return sobolev_norm(basis, 0.5, diff) <= m0
