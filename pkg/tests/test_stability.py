import numpy as np
import pytest

from fluxrec import fem, stability
from fluxrec.errors import DegenerateEnsembleError
from fluxrec.fem import BoundaryVector, FactorizedSystem, ProblemData, discrete_trace_constant
from fluxrec.geometry import GAMMA_I, refine_uniform
from fluxrec.spectral import build_spectral_basis
from fluxrec.stability import (
    evaluate_stability_bound,
    fit_stability_modulus,
    generate_probe_ensemble,
    near_uniqueness_check,
    sample_homogeneous_solution,
)


@pytest.fixture(scope="module")
def probe_system(coarse_mesh):
    return FactorizedSystem(coarse_mesh, ProblemData.from_constants(coarse_mesh, f=0.0, u_a=0.0))


@pytest.fixture(scope="module")
def ensemble(probe_system, basis):
    return generate_probe_ensemble(probe_system, basis, 100, seed=5)


def test_zero_flux_gives_zero_sample(probe_system, basis, coarse_mesh):
    q = BoundaryVector(GAMMA_I, np.zeros(basis.n_modes))
    s = sample_homogeneous_solution(probe_system, basis, q)
    assert s.h1_norm == 0.0
    assert s.trace_norm == 0.0
    assert s.m_proxy == 0.0


def test_requires_homogeneous_data(coarse_mesh, basis):
    bad = FactorizedSystem(coarse_mesh, ProblemData.from_constants(coarse_mesh, u_a=1.0))
    with pytest.raises(ValueError):
        sample_homogeneous_solution(bad, basis, BoundaryVector(GAMMA_I, np.zeros(basis.n_modes)))


def test_sample_linearity(probe_system, basis, rng):
    q = BoundaryVector(GAMMA_I, rng.standard_normal(basis.n_modes))
    s1 = sample_homogeneous_solution(probe_system, basis, q)
    c = 3.7
    s2 = sample_homogeneous_solution(probe_system, basis,
                                     BoundaryVector(GAMMA_I, c * q.values))
    assert abs(s2.h1_norm - c * s1.h1_norm) <= 1e-10 * s2.h1_norm
    assert abs(s2.trace_norm - c * s1.trace_norm) <= 1e-10 * max(s2.trace_norm, 1e-30)
    assert abs(s2.m_proxy - c * s1.m_proxy) <= 1e-10 * s2.m_proxy


def test_high_modes_decay_across_annulus(probe_system, basis):
    s1 = sample_homogeneous_solution(probe_system, basis, basis.mode(1))
    s5 = sample_homogeneous_solution(probe_system, basis, basis.mode(9))
    # ratio trace/h1 falls sharply with boundary frequency
    assert s5.trace_norm / s5.h1_norm < 0.1 * (s1.trace_norm / s1.h1_norm)


def test_trace_inequality_with_calibrated_constant(ensemble, coarse_mesh):
    c_tr = discrete_trace_constant(coarse_mesh)
    for s in ensemble:
        assert s.trace_norm <= c_tr * s.h1_norm * (1.0 + 1e-8)


def test_ensemble_normalized_and_spans_decades(ensemble):
    for s in ensemble:
        assert abs(s.m_proxy - 1.0) <= 1e-12
    tr = np.array([s.trace_norm for s in ensemble if s.trace_norm > 0.0])
    assert np.log10(tr.max() / tr.min()) >= 3.0


def test_fit_zero_violations(ensemble):
    c_fit, c0_fit, max_violation = fit_stability_modulus(ensemble, kappa=0.9)
    assert max_violation <= 0.0
    assert c_fit > 0.0
    for s in ensemble:
        if s.trace_norm > stability.TRACE_FLOOR:
            assert c0_fit * s.m_proxy / s.trace_norm > 1.0


def test_fit_scale_invariance_on_amplitude_ray(probe_system, basis):
    # pure-mode fluxes at many amplitudes: all bound ratios are
    # amplitude-independent because every norm is degree-1 homogeneous
    samples = []
    for i, amp in enumerate(np.geomspace(1e-3, 1e3, 60)):
        q = BoundaryVector(GAMMA_I, amp * basis.eigenvectors[:, 1])
        samples.append(sample_homogeneous_solution(probe_system, basis, q, label=f"amp{i}"))
    c_fit, c0_fit, max_violation = fit_stability_modulus(samples, kappa=0.9)
    assert max_violation <= 0.0
    violations, worst = evaluate_stability_bound(samples, c_fit, c0_fit, 0.9)
    assert violations == 0


def test_fit_needs_enough_signal(probe_system, basis):
    q = BoundaryVector(GAMMA_I, np.zeros(basis.n_modes))
    zeros = [sample_homogeneous_solution(probe_system, basis, q) for _ in range(60)]
    with pytest.raises(DegenerateEnsembleError):
        fit_stability_modulus(zeros, kappa=0.9)
    with pytest.raises(DegenerateEnsembleError):
        fit_stability_modulus([], kappa=0.9)


def test_holdout_tolerates_five_percent(probe_system, basis, ensemble):
    c_fit, c0_fit, _ = fit_stability_modulus(ensemble, kappa=0.9)
    holdout = generate_probe_ensemble(probe_system, basis, 50, seed=77)
    violations, _ = evaluate_stability_bound(holdout, 1.05 * c_fit, c0_fit, 0.9)
    assert violations <= 0.05 * len(holdout)


def test_fit_stable_under_refinement(coarse_mesh, ensemble):
    c_fit, _, _ = fit_stability_modulus(ensemble, kappa=0.9)
    fine = refine_uniform(coarse_mesh)
    system = FactorizedSystem(fine, ProblemData.from_constants(fine))
    basis_fine = build_spectral_basis(fine)
    ens_fine = generate_probe_ensemble(system, basis_fine, 100, seed=5)
    c_fine, _, _ = fit_stability_modulus(ens_fine, kappa=0.9)
    assert 0.5 <= c_fine / c_fit <= 2.0


def test_near_uniqueness_envelope(ensemble):
    report = near_uniqueness_check(ensemble)
    assert report.envelope_nondecreasing
    assert (np.diff(report.trace_norms) >= 0.0).all()
    smallest_trace_h1 = report.h1_norms[0]
    assert smallest_trace_h1 <= np.median(report.h1_norms)


def test_near_uniqueness_excludes_zero_trace(probe_system, basis, ensemble):
    zero = sample_homogeneous_solution(
        probe_system, basis, BoundaryVector(GAMMA_I, np.zeros(basis.n_modes)))
    report = near_uniqueness_check(list(ensemble) + [zero])
    assert report.n_excluded == 1
