"""P1 finite elements for the annular diffusion problem.

Discretizes the weak form of

    -div(alpha grad u) = f        in Omega,
    -alpha du/dn = k (u - u_a)    on GammaA,
    -alpha du/dn = q              on GammaI,

i.e.  a(u, v) = int alpha grad u . grad v + int_GammaA k u v  against
rhs(v) = int f v - int_GammaI q v + int_GammaA k u_a v.

Volume terms use exact integration of the piecewise-polynomial
integrands; boundary terms use two-point Gauss quadrature per edge,
exact for products of P1 traces up to degree 3.  Boundary L2 inner
products everywhere in the package use the lumped arc-length weights of
the BoundaryIndexMap, so that spectral Parseval identities hold exactly
in the discrete norms.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DegenerateTriangleError,
    DimensionMismatchError,
    SolverFailureError,
    TagMismatchError,
)
from .geometry import GAMMA_A, GAMMA_I, Mesh, boundary_map, triangle_areas

_AREA_FLOOR = 1e-14
_DIRECT_SOLVE_LIMIT = 200_000

# 2-point Gauss-Legendre on [0, 1]
_GAUSS_T = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


@dataclass(eq=False)
class ScalarField:
    """Nodal coefficients of an H1 finite-element function."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise DimensionMismatchError(
                f"field has {self.values.shape} values for {self.mesh.n_vertices} vertices"
            )
        if not np.isfinite(self.values).all():
            raise SolverFailureError("field contains non-finite values")


@dataclass(eq=False)
class BoundaryVector:
    """Values on one boundary loop, in BoundaryIndexMap order."""

    tag: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


@dataclass(eq=False)
class ProblemData:
    """Coefficients of the diffusion problem.

    alpha and f are nodal fields (length n_v); k and u_a are
    per-boundary-vertex arrays on GammaA in BoundaryIndexMap order.
    """

    alpha: np.ndarray
    k: np.ndarray
    f: np.ndarray
    u_a: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        self.u_a = np.asarray(self.u_a, dtype=float)
        if self.alpha.min() <= 0.0:
            raise ValueError("alpha must be strictly positive")
        if self.k.min() <= 0.0:
            raise ValueError("k must be strictly positive")

    @classmethod
    def from_constants(cls, mesh: Mesh, alpha: float = 1.0, k: float = 1.0,
                       f: float = 0.0, u_a: float = 0.0) -> "ProblemData":
        n_a = len(boundary_map(mesh, GAMMA_A))
        return cls(np.full(mesh.n_vertices, alpha), np.full(n_a, k),
                   np.full(mesh.n_vertices, f), np.full(n_a, u_a))


def constant_flux(mesh: Mesh, value: float) -> BoundaryVector:
    return BoundaryVector(GAMMA_I, np.full(len(boundary_map(mesh, GAMMA_I)), value))


def _gradients(mesh: Mesh):
    """Per-triangle P1 shape gradients and areas."""
    areas = triangle_areas(mesh.vertices, mesh.triangles)
    if areas.min() < _AREA_FLOOR:
        raise DegenerateTriangleError(f"triangle area {areas.min():.3e} below {_AREA_FLOOR}")
    p = mesh.vertices[mesh.triangles]          # (n_t, 3, 2)
    # grad phi_i = rot90(opposite edge) / (2 area)
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    grads = np.stack([-e[..., 1], e[..., 0]], axis=-1) / (2.0 * areas)[:, None, None]
    return grads, areas


@functools.lru_cache(maxsize=32)
def _norm_matrices(mesh: Mesh):
    """Unit-coefficient mass and stiffness matrices for norm evaluation."""
    grads, areas = _gradients(mesh)
    tri = mesh.triangles
    n = mesh.n_vertices
    rows, cols = np.broadcast_arrays(tri[:, :, None], tri[:, None, :])
    stiff_loc = np.einsum("tid,tjd,t->tij", grads, grads, areas)
    mass_loc = (np.ones((3, 3)) + np.eye(3))[None, :, :] * (areas / 12.0)[:, None, None]
    shape = (n, n)
    stiffness = sp.csr_matrix((stiff_loc.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    mass = sp.csr_matrix((mass_loc.ravel(), (rows.ravel(), cols.ravel())), shape=shape)
    return mass, stiffness


def _edge_robin_matrix(mesh: Mesh, coeff_on_gamma_a: np.ndarray):
    """Sparse matrix of int_GammaA k u v for P1 traces (exact quadrature)."""
    bmap = boundary_map(mesh, GAMMA_A)
    pos = {int(v): i for i, v in enumerate(bmap.vertex_indices)}
    rows, cols, vals = [], [], []
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag != GAMMA_A:
            continue
        length = float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
        ka, kb = coeff_on_gamma_a[pos[int(a)]], coeff_on_gamma_a[pos[int(b)]]
        m_aa = length * (3.0 * ka + kb) / 12.0
        m_ab = length * (ka + kb) / 12.0
        m_bb = length * (ka + 3.0 * kb) / 12.0
        rows.extend((a, a, b, b))
        cols.extend((a, b, a, b))
        vals.extend((m_aa, m_ab, m_ab, m_bb))
    n = mesh.n_vertices
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_system(mesh: Mesh, data: ProblemData) -> sp.csr_matrix:
    """Symmetric positive-definite matrix of the bilinear form.

    Stiffness uses the exact per-triangle average of the nodal alpha;
    the Robin block on GammaA removes the constant kernel.
    """
    grads, areas = _gradients(mesh)
    tri = mesh.triangles
    alpha_bar = data.alpha[tri].mean(axis=1)
    rows, cols = np.broadcast_arrays(tri[:, :, None], tri[:, None, :])
    loc = np.einsum("tid,tjd,t->tij", grads, grads, alpha_bar * areas)
    n = mesh.n_vertices
    stiffness = sp.csr_matrix((loc.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))
    system = stiffness + _edge_robin_matrix(mesh, data.k)
    asym = abs(system - system.T).max()
    if asym > 1e-12 * max(abs(system).max(), 1.0):
        raise SolverFailureError(f"assembled system asymmetric by {asym:.3e}")
    return system.tocsr()


def assemble_rhs(mesh: Mesh, data: ProblemData, q: BoundaryVector | None) -> np.ndarray:
    """Load vector: int f v - int_GammaI q v + int_GammaA k u_a v.

    The strong form fixes the +k u_a sign (u == u_a solves the problem
    when f = 0 and q = 0).
    """
    if q is not None and q.tag != GAMMA_I:
        raise TagMismatchError(f"flux must be tagged {GAMMA_I}, got {q.tag}")
    mass, _ = _norm_matrices(mesh)
    rhs = mass @ data.f

    bmap_i = boundary_map(mesh, GAMMA_I)
    if q is not None:
        if q.values.shape != (len(bmap_i),):
            raise DimensionMismatchError(
                f"flux has {q.values.shape} values for {len(bmap_i)} GammaI vertices"
            )
        pos_i = {int(v): i for i, v in enumerate(bmap_i.vertex_indices)}
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            if tag != GAMMA_I:
                continue
            length = float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
            qa, qb = q.values[pos_i[int(a)]], q.values[pos_i[int(b)]]
            # int_e q phi with q, phi linear on the edge
            rhs[a] -= length * (2.0 * qa + qb) / 6.0
            rhs[b] -= length * (qa + 2.0 * qb) / 6.0

    bmap_a = boundary_map(mesh, GAMMA_A)
    pos_a = {int(v): i for i, v in enumerate(bmap_a.vertex_indices)}
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        if tag != GAMMA_A:
            continue
        length = float(np.linalg.norm(mesh.vertices[b] - mesh.vertices[a]))
        ia, ib = pos_a[int(a)], pos_a[int(b)]
        kt = data.k[ia] * (1.0 - _GAUSS_T) + data.k[ib] * _GAUSS_T
        ut = data.u_a[ia] * (1.0 - _GAUSS_T) + data.u_a[ib] * _GAUSS_T
        rhs[a] += length * float((_GAUSS_W * kt * ut * (1.0 - _GAUSS_T)).sum())
        rhs[b] += length * float((_GAUSS_W * kt * ut * _GAUSS_T).sum())
    return rhs


class FactorizedSystem:
    """Assembled system with a reusable factorization.

    Direct sparse LU for desk-scale systems, Jacobi-preconditioned CG
    beyond _DIRECT_SOLVE_LIMIT unknowns.  Solves are deterministic and
    the object is safe to share across concurrent callers once built.
    """

    def __init__(self, mesh: Mesh, data: ProblemData, system: sp.spmatrix | None = None):
        self.mesh = mesh
        self.data = data
        self.matrix = assemble_system(mesh, data) if system is None else system.tocsc()
        self._direct = mesh.n_vertices <= _DIRECT_SOLVE_LIMIT
        self._lu = spla.splu(sp.csc_matrix(self.matrix)) if self._direct else None

    def solve(self, rhs: np.ndarray) -> ScalarField:
        rhs = np.asarray(rhs, dtype=float)
        scale = float(np.linalg.norm(rhs))
        if scale == 0.0:
            return ScalarField(self.mesh, np.zeros(self.mesh.n_vertices))
        if self._direct:
            u = self._lu.solve(rhs)
        else:
            diag = self.matrix.diagonal()
            prec = spla.LinearOperator(self.matrix.shape, matvec=lambda x: x / diag)
            u, info = spla.cg(self.matrix, rhs, rtol=1e-12, atol=0.0,
                              maxiter=20 * self.mesh.n_vertices, M=prec)
            if info != 0:
                raise SolverFailureError(f"CG did not converge (info={info})")
        residual = float(np.linalg.norm(self.matrix @ u - rhs)) / scale
        if residual > 1e-10:
            raise SolverFailureError(f"relative residual {residual:.3e} above 1e-10")
        return ScalarField(self.mesh, u)

    def solve_flux(self, q: BoundaryVector | None) -> ScalarField:
        return self.solve(assemble_rhs(self.mesh, self.data, q))


def solve_forward(mesh: Mesh, system: sp.spmatrix, rhs: np.ndarray) -> ScalarField:
    """One-shot solve; prefer FactorizedSystem when reusing the matrix."""
    return FactorizedSystem(mesh, ProblemData.from_constants(mesh), system).solve(rhs)


def trace(u: ScalarField, tag: str) -> BoundaryVector:
    """Restriction of nodal values to one tagged loop, in map order."""
    if tag not in (GAMMA_I, GAMMA_A):
        raise TagMismatchError(f"unknown tag {tag!r}")
    bmap = boundary_map(u.mesh, tag)
    return BoundaryVector(tag, u.values[bmap.vertex_indices].copy())


def norms(u: ScalarField) -> tuple[float, float]:
    """(L2(Omega) norm, full H1(Omega) norm) via exact element matrices."""
    mass, stiffness = _norm_matrices(u.mesh)
    l2sq = float(u.values @ (mass @ u.values))
    h1sq = l2sq + float(u.values @ (stiffness @ u.values))
    return np.sqrt(max(l2sq, 0.0)), np.sqrt(max(h1sq, 0.0))


def boundary_l2_norm(mesh: Mesh, v: BoundaryVector) -> float:
    """Discrete L2 norm on the tagged loop with lumped arc weights."""
    w = boundary_weights(mesh, v.tag)
    if v.values.shape != w.shape:
        raise DimensionMismatchError(
            f"boundary vector has {v.values.shape} values for {w.shape} weights"
        )
    return float(np.sqrt((w * v.values * v.values).sum()))


def boundary_weights(mesh: Mesh, tag: str) -> np.ndarray:
    return boundary_map(mesh, tag).weights


# 6-point Dunavant rule, exact to degree 4, barycentric points and weights
_DUN_PTS = np.array([
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
])
_DUN_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


def error_norms(u: ScalarField, exact, exact_grad) -> tuple[float, float]:
    """(L2, H1) errors of a P1 field against a smooth reference.

    ``exact(x, y)`` and ``exact_grad(x, y) -> (ux, uy)`` are vectorized
    callables; integration uses a degree-4 triangle rule.
    """
    mesh = u.mesh
    grads, areas = _gradients(mesh)
    p = mesh.vertices[mesh.triangles]                      # (n_t, 3, 2)
    uh = u.values[mesh.triangles]                          # (n_t, 3)
    guh = np.einsum("ti,tid->td", uh, grads)               # (n_t, 2)

    xq = np.einsum("qk,tkd->tqd", _DUN_PTS, p)             # (n_t, 6, 2)
    uq = np.einsum("qk,tk->tq", _DUN_PTS, uh)
    ex = exact(xq[..., 0], xq[..., 1])
    gx, gy = exact_grad(xq[..., 0], xq[..., 1])
    diff2 = (uq - ex) ** 2
    gdiff2 = (guh[:, None, 0] - gx) ** 2 + (guh[:, None, 1] - gy) ** 2
    l2sq = float((areas[:, None] * _DUN_W[None, :] * diff2).sum())
    h1sq = float((areas[:, None] * _DUN_W[None, :] * gdiff2).sum())
    return np.sqrt(l2sq), np.sqrt(l2sq + h1sq)


@functools.lru_cache(maxsize=32)
def discrete_trace_constant(mesh: Mesh) -> float:
    """Largest ratio ||u||_{GammaA} / ||u||_{1,Omega} over the P1 space.

    Computed by power iteration on the generalized problem B u = t H u
    with B the lumped GammaA boundary mass and H the H1 matrix.
    """
    mass, stiffness = _norm_matrices(mesh)
    h1 = (mass + stiffness).tocsc()
    lu = spla.splu(h1)
    bmap = boundary_map(mesh, GAMMA_A)
    idx, w = bmap.vertex_indices, bmap.weights

    rng = np.random.default_rng(0)
    x = rng.standard_normal(mesh.n_vertices)
    t_old = 0.0
    for _ in range(200):
        bx = np.zeros(mesh.n_vertices)
        bx[idx] = w * x[idx]
        y = lu.solve(bx)
        t = float(x @ bx) / float(x @ (h1 @ x))
        nrm = np.sqrt(float(y @ (h1 @ y)))
        if nrm == 0.0:
            break
        x = y / nrm
        if abs(t - t_old) <= 1e-10 * max(t, 1e-30):
            break
        t_old = t
    return float(np.sqrt(t))
