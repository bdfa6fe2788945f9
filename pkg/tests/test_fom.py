import math

import numpy as np
import pytest
import scipy.linalg
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qpic import circuit, fom, mps
from qpic.fock import FockSpace, coherent_vector, gate_unitary


def _random_density(rng, d, rank=None):
    rank = rank or d
    x = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = x @ x.conj().T
    return rho / np.trace(rho)


def _proj(d, n):
    p = np.zeros((d, d), complex)
    p[n, n] = 1
    return p


def test_trace_distance_examples():
    d = 4
    rho = _proj(d, 0)
    assert float(fom.weighted_trace_distance(rho, rho)) == 0.0
    ones = np.ones((d, d))
    assert float(fom.weighted_trace_distance(_proj(d, 0), _proj(d, 1), ones)) == pytest.approx(1.0)
    mask = fom.vacuum_mask(d, 9)
    assert mask.mean() == pytest.approx(1.0)
    assert mask[0, 0] * 9 == pytest.approx(mask[1, 1])
    diff = mask * (_proj(d, 0) - _proj(d, 1))
    expected = 0.5 * np.abs(np.linalg.eigvalsh(diff)).sum()
    assert float(fom.weighted_trace_distance(_proj(d, 0), _proj(d, 1), mask)) == pytest.approx(expected, abs=1e-14)


def test_trace_distance_rejects_non_hermitian_mask():
    mask = np.ones((3, 3))
    mask[0, 1] = 2
    with pytest.raises(fom.FomError):
        fom.weighted_trace_distance(_random_density(np.random.default_rng(0), 3), _proj(3, 1), mask)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_trace_distance_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_random_density(rng, 4) for _ in range(3))

    def dist(x, y):
        return float(fom.weighted_trace_distance(x, y))

    assert dist(a, b) == pytest.approx(dist(b, a), abs=1e-10)
    assert dist(a, c) <= dist(a, b) + dist(b, c) + 1e-10


def test_entropy_penalty():
    assert float(fom.entropy_penalty(mps.init_product_coherent([1, 1, 1], 4))) == 0.0
    d = 2
    t = np.zeros((1, 1, d, 1), complex)
    t[0, 0, 1, 0] = 1
    t0 = np.zeros((1, 1, d, 1), complex)
    t0[0, 0, 0, 0] = 1
    state = mps.BatchedMps(
        tensors=[torch.from_numpy(t), torch.from_numpy(t0)],
        singular_values=[torch.ones(1, 1, dtype=torch.float64)],
        n_max=1,
    )
    mps.apply_two_mode_gate(state, gate_unitary(math.pi / 4, 0, state.space), 0)
    assert float(fom.entropy_penalty(state)) == pytest.approx(math.log(2), abs=1e-12)


def test_entropy_penalty_matches_dense():
    rng = np.random.default_rng(4)
    spec = circuit.build_circuit(4, 3, u_t_circ=1.0)
    spec.j_dt = np.where(spec.slot_mask(), rng.uniform(0, np.pi, spec.j_dt.shape), 0)
    alphas = rng.uniform(0.3, 0.8, 4)
    state = mps.init_product_coherent(alphas, n_max=3, chi_max=64, s_min=0.0)
    circuit.contract_circuit(state, spec)
    psi = oracles.run_circuit(alphas, spec.j_dt, float(spec.u_dt[0]), 4)
    total = 0.0
    for bond in range(3):
        p = np.linalg.svd(psi.reshape(4 ** (bond + 1), -1), compute_uv=False) ** 2
        p = p[p > 1e-300]
        total += (-(p * np.log(p)).sum()) ** 2
    assert float(fom.entropy_penalty(state)) == pytest.approx(math.sqrt(total), abs=1e-8)


def test_uhlmann_fidelity():
    space = FockSpace(5)
    v = coherent_vector(0.8, space)
    pure = np.outer(v, v.conj())
    assert float(fom.uhlmann_fidelity(pure, pure)) == pytest.approx(1.0, abs=1e-12)
    assert float(fom.uhlmann_fidelity(_proj(6, 0), _proj(6, 1))) == pytest.approx(0.0, abs=1e-14)
    rng = np.random.default_rng(2)
    rho = _random_density(rng, 6)
    sq = scipy.linalg.sqrtm(rho)
    ref = np.trace(scipy.linalg.sqrtm(sq @ pure @ sq)).real ** 2
    assert float(fom.uhlmann_fidelity(rho, pure)) == pytest.approx(np.vdot(v, rho @ v).real, abs=1e-12)
    # matrix square roots of a rank-one product lose about half the digits
    assert float(fom.uhlmann_fidelity(rho, pure)) == pytest.approx(ref, abs=1e-7)
    sigma = _random_density(rng, 6)
    ref_mixed = np.trace(scipy.linalg.sqrtm(sq @ sigma @ sq)).real ** 2
    assert float(fom.uhlmann_fidelity(rho, sigma)) == pytest.approx(ref_mixed, abs=1e-8)
    assert float(fom.uhlmann_fidelity(sigma, sigma)) == pytest.approx(1.0, abs=1e-8)


def test_conditioning():
    cond, p = fom.conditioned_density(_proj(4, 1))
    np.testing.assert_allclose(cond.numpy(), _proj(4, 1))
    assert float(p) == 1.0
    cond, p = fom.conditioned_density(0.5 * _proj(4, 0) + 0.5 * _proj(4, 1))
    np.testing.assert_allclose(cond.numpy(), _proj(4, 1))
    assert float(p) == 0.5
    with pytest.raises(fom.VacuumOutputError):
        fom.conditioned_density(_proj(4, 0))


def test_conditioning_raises_fidelity_when_vacuum_block_only():
    target = _proj(4, 1)
    rho = 0.3 * _proj(4, 0) + 0.7 * target
    cond, _ = fom.conditioned_density(rho)
    assert float(fom.uhlmann_fidelity(cond, target)) > float(fom.uhlmann_fidelity(rho, target))


def test_g2_examples():
    space = FockSpace(25)
    v = coherent_vector(1.3, space)
    assert float(fom.g2_from_density(np.outer(v, v.conj()))) == pytest.approx(1.0, abs=1e-10)
    assert float(fom.g2_from_density(_proj(5, 1))) == 0.0
    assert float(fom.g2_from_density(_proj(5, 2))) == pytest.approx(0.5)
    with pytest.raises(fom.VacuumOutputError):
        fom.g2_from_density(_proj(5, 0))
    state = mps.init_product_coherent([0.7, 0.2], n_max=20)
    assert float(fom.g2_zero(state, 0)) == pytest.approx(1.0, abs=1e-10)


def test_g2_mixture():
    rho = 0.2 * _proj(5, 0) + 0.5 * _proj(5, 1) + 0.3 * _proj(5, 3)
    assert float(fom.g2_from_density(rho)) == pytest.approx(0.3 * 6 / 1.4**2)


def test_fisher_readout_examples():
    disconnected = circuit.build_circuit(2, 1, j_dt_init=0.0)
    assert fom.fisher_information_readout(disconnected, [1, 1], n_max=6) == pytest.approx(0.0, abs=1e-12)
    splitter = circuit.build_circuit(2, 1, j_dt_init=math.pi / 4)
    fi = fom.fisher_information_readout(splitter, [1, 1], n_max=12)
    assert fi == pytest.approx(1.0, rel=1e-3)
    assert fi <= fom.qfi_coherent(1.0) + 1e-6


def test_fisher_step_refinement_is_stable():
    spec = circuit.build_circuit(3, 3, j_dt_init=0.6)
    coarse = fom.fisher_information_readout(spec, [1, 1, 1], theta_step=1e-3, n_max=8)
    fine = fom.fisher_information_readout(spec, [1, 1, 1], theta_step=5e-4, n_max=8)
    assert abs(coarse - fine) / fine < 5e-3


def test_fisher_global_phase_invariance():
    spec = circuit.build_circuit(3, 3, j_dt_init=0.7)
    base = fom.fisher_information_readout(spec, [1, 0.8, 0.5], n_max=8)
    shifted = fom.fisher_information_readout(spec, np.array([1, 0.8, 0.5]) * np.exp(0.9j), n_max=8)
    assert abs(base - shifted) <= 1e-8


def test_gaussian_fi():
    assert fom.gaussian_fi(lambda t: 3.0, 1.0) == 0.0
    assert fom.gaussian_fi(lambda t: t, 1.0) == pytest.approx(1.0)
    with pytest.raises(fom.FomError):
        fom.gaussian_fi(lambda t: t, 0.0)


def test_linear_readout_gaussian_equals_number_fi():
    spec = circuit.build_circuit(2, 1, j_dt_init=0.9)
    stats = fom.readout_statistics(spec, [1.0, 0.6j], readout_mode=1, n_max=14)
    assert float(stats.gaussian()) == pytest.approx(float(stats.fisher()), rel=2e-2)


def test_qfi_coherent():
    assert fom.qfi_coherent(1) == 4.0
    assert fom.qfi_coherent(0) == 0.0
    # pure-state overlap limit: QFI = 8 (1 - |<a|a e^{i t}>|) / t^2
    space = FockSpace(30)
    t = 1e-3
    overlap = abs(np.vdot(coherent_vector(1.0, space), coherent_vector(np.exp(1j * t), space)))
    assert 8 * (1 - overlap) / t**2 == pytest.approx(4.0, rel=1e-3)


def test_homodyne_pfi():
    assert fom.homodyne_pfi(1 / math.sqrt(2), math.pi / 2, 1, 1) == pytest.approx(1.0, abs=1e-15)
    assert fom.homodyne_pfi(0.0, 1.0, 1, 1) == 0.0
    strong = fom.homodyne_pfi(1 / math.sqrt(2), math.pi / 2, 0.6, 1e4)
    assert strong == pytest.approx(2 * 0.36, rel=1e-6)
    with pytest.raises(fom.FomError):
        fom.homodyne_pfi(1.2, 0.0, 1, 1)


def test_homodyne_pfi_dark_output_flags():
    assert math.isnan(fom.homodyne_pfi(1 / math.sqrt(2), math.pi, 1, 1))


def test_total_fom():
    assert float(fom.total_fom("cat", {"rho": torch.tensor(0.3), "s": torch.tensor(1.0)}, {"lambda_s": 0.0})) == pytest.approx(0.3)
    val = fom.total_fom("cat", {"rho": torch.tensor(0.2), "s": torch.tensor(1.0)})
    assert float(val) == pytest.approx(0.204)
    val = fom.total_fom("sensing", {"fi": torch.tensor(4.0), "s": torch.tensor(2.0)}, {"lambda_s": 0.0})
    assert float(val) == -4.0
    assert fom.DEFAULT_WEIGHTS["single_photon"] == {"lambda_rho": 0.1, "lambda_g": 0.9}
    with pytest.raises(fom.FomError):
        fom.total_fom("cat", {"g": torch.tensor(1.0)})
    with pytest.raises(fom.FomError):
        fom.total_fom("unknown", {})
