"""Empirical probe of the logarithmic conditional-stability modulus.

Solutions u of the homogeneous problem (zero source, zero ambient data,
flux q on GammaI) are sampled over mixed boundary frequencies and the
smallest constants (C, C0) with

    ||u||_{1,Omega} <= C * M / log(C0 * M / ||u||_{GammaA})^kappa

over the ensemble are fitted by grid search.  The inaccessible H2 bound
M is replaced by the degree-1 homogeneous surrogate
m_proxy = ||q||_{1/2,GammaI} + ||u||_{1,Omega}, which P1 elements can
evaluate; ensembles are normalized to m_proxy = 1 so the fit sees only
shape, not scale.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEnsembleError
from .fem import BoundaryVector, FactorizedSystem, ScalarField, boundary_l2_norm, norms, trace
from .geometry import GAMMA_A, GAMMA_I
from .spectral import FluxCoefficients, SpectralBasis, sobolev_norm, synthesize

logger = logging.getLogger(__name__)

TRACE_FLOOR = 1e-14


@dataclass(eq=False)
class StabilitySample:
    """One homogeneous solve with the norms entering the modulus fit."""

    q: BoundaryVector
    u: ScalarField
    h1_norm: float
    trace_norm: float
    m_proxy: float
    label: str = ""

    def __post_init__(self):
        if min(self.h1_norm, self.trace_norm, self.m_proxy) < 0.0:
            raise ValueError("stability sample norms must be non-negative")


def sample_homogeneous_solution(system: FactorizedSystem, basis: SpectralBasis,
                                q: BoundaryVector, label: str = "") -> StabilitySample:
    """Solve the homogeneous problem for q and collect the norms.

    The shared system must carry f = 0 and u_a = 0; the factorization
    is reused across samples.
    """
    if np.any(system.data.f != 0.0) or np.any(system.data.u_a != 0.0):
        raise ValueError("stability probe requires f = 0 and u_a = 0")
    u = system.solve_flux(q)
    _, h1 = norms(u)
    tr = boundary_l2_norm(system.mesh, trace(u, GAMMA_A))
    m_proxy = sobolev_norm(basis, 0.5, q) + h1
    return StabilitySample(q, u, h1, tr, m_proxy, label)


def generate_probe_ensemble(system: FactorizedSystem, basis: SpectralBasis,
                            n_samples: int, seed: int) -> list[StabilitySample]:
    """Mixed-frequency ensemble normalized to m_proxy = 1.

    Alternates pure eigenmodes (index growing with the sample counter,
    which spreads trace norms over many decades) with random decaying
    mixtures.  Deterministic per seed; linearity makes the
    normalization exact.
    """
    rng = np.random.default_rng(seed)
    n_modes = basis.n_modes
    max_pure = min(n_modes - 1, 48)
    samples = []
    for i in range(n_samples):
        if i % 2 == 0:
            mode = 1 + (i // 2) % max_pure
            c = np.zeros(n_modes)
            c[mode] = 1.0
            label = f"mode{mode}"
        else:
            p = rng.uniform(0.5, 2.0)
            c = rng.standard_normal(n_modes) * basis.eigenvalues ** (-p)
            label = f"mix{i}"
        q = synthesize(basis, FluxCoefficients(c))
        s = sample_homogeneous_solution(system, basis, q, label)
        if s.m_proxy == 0.0:
            continue
        scale = 1.0 / s.m_proxy
        samples.append(StabilitySample(
            BoundaryVector(GAMMA_I, q.values * scale),
            ScalarField(system.mesh, s.u.values * scale),
            s.h1_norm * scale, s.trace_norm * scale, 1.0, label))
    return samples


def fit_stability_modulus(samples: list[StabilitySample], kappa: float,
                          min_samples: int = 50) -> tuple[float, float, float]:
    """Grid-fit (C, C0) validating the whole ensemble; returns max violation.

    The C0 grid is floored at e^(kappa+1) * max(trace/M) so every log
    argument stays comfortably above 1 (the same largeness margin the
    logarithmic index function needs), then C is the smallest grid value
    covering the worst sample at the best C0.
    """
    usable = [s for s in samples if s.trace_norm > TRACE_FLOOR]
    if not usable:
        raise DegenerateEnsembleError("all trace norms are zero")
    if len(usable) < min_samples:
        raise DegenerateEnsembleError(
            f"need >= {min_samples} samples with positive trace, got {len(usable)}"
        )
    h1 = np.array([s.h1_norm for s in usable])
    tr = np.array([s.trace_norm for s in usable])
    m = np.array([s.m_proxy for s in usable])

    ratio_max = float((tr / m).max())
    c0_grid = math.exp(kappa + 1.0) * ratio_max * np.geomspace(1.0, 1e6, 120)
    c_grid = np.geomspace(1e-6, 1e8, 281)

    best_c0, best_req = None, np.inf
    for c0 in c0_grid:
        req = float((h1 * np.log(c0 * m / tr) ** kappa / m).max())
        if req < best_req:
            best_req, best_c0 = req, float(c0)
    idx = int(np.searchsorted(c_grid, best_req, side="left"))
    if idx >= len(c_grid):
        raise DegenerateEnsembleError(f"required C {best_req:.3e} beyond the grid")
    c_fit = float(c_grid[idx])
    bound = c_fit * m / np.log(best_c0 * m / tr) ** kappa
    max_violation = float((h1 - bound).max())
    logger.info("stability fit: C=%.4g C0=%.4g max_violation=%.3e",
                c_fit, best_c0, max_violation)
    return c_fit, best_c0, max_violation


def evaluate_stability_bound(samples: list[StabilitySample], c: float, c0: float,
                             kappa: float) -> tuple[int, float]:
    """(violation count, worst excess) of the bound on an ensemble.

    Samples whose log argument falls to or below 1 count as violations:
    the bound does not apply there, which is a failure of the fitted
    domain guard rather than of the sample.
    """
    violations = 0
    worst = -np.inf
    for s in samples:
        if s.trace_norm <= TRACE_FLOOR:
            continue
        arg = c0 * s.m_proxy / s.trace_norm
        if arg <= 1.0:
            violations += 1
            worst = max(worst, np.inf)
            continue
        bound = c * s.m_proxy / math.log(arg) ** kappa
        excess = s.h1_norm - bound
        worst = max(worst, excess)
        if excess > 0.0:
            violations += 1
    return violations, float(worst)


@dataclass
class NearUniquenessReport:
    """Sorted (trace, h1) pairs with a decade-binned upper envelope."""

    trace_norms: np.ndarray
    h1_norms: np.ndarray
    envelope_traces: np.ndarray
    envelope_h1: np.ndarray
    n_excluded: int

    @property
    def envelope_nondecreasing(self) -> bool:
        return bool((np.diff(self.envelope_h1) >= -1e-12).all())


def near_uniqueness_check(samples: list[StabilitySample]) -> NearUniquenessReport:
    """Sort samples by trace norm and bin the h1 upper envelope per decade.

    Zero-trace samples are excluded (they cannot appear on log axes).
    Small Cauchy data forcing small interior norm shows up as a
    non-decreasing envelope.
    """
    usable = sorted((s for s in samples if s.trace_norm > TRACE_FLOOR),
                    key=lambda s: s.trace_norm)
    n_excluded = len(samples) - len(usable)
    if not usable:
        raise DegenerateEnsembleError("no samples with positive trace norm")
    tr = np.array([s.trace_norm for s in usable])
    h1 = np.array([s.h1_norm for s in usable])

    decades = np.floor(np.log10(tr)).astype(int)
    env_t, env_h = [], []
    for d in np.unique(decades):
        sel = decades == d
        env_t.append(10.0 ** d)
        env_h.append(float(h1[sel].max()))
    return NearUniquenessReport(tr, h1, np.array(env_t), np.array(env_h), n_excluded)
