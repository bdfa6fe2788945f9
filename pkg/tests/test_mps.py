import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from qpic import autodiff, mps
from qpic.fock import FockSpace, annihilation, gate_unitary, number


def _fock_product(occupations_by_batch, n_max):
    """Batched product of Fock states, built by hand."""
    d = n_max + 1
    occ = np.asarray(occupations_by_batch)
    n_batch, n_modes = occ.shape
    tensors = []
    for l in range(n_modes):
        t = np.zeros((n_batch, 1, d, 1), complex)
        t[np.arange(n_batch), 0, occ[:, l], 0] = 1.0
        tensors.append(torch.from_numpy(t))
    svals = [torch.ones(n_batch, 1, dtype=autodiff.RDTYPE) for _ in range(n_modes - 1)]
    return mps.BatchedMps(tensors=tensors, singular_values=svals, n_max=n_max)


def _random_gate_state(seed, n_modes=3, n_max=3, n_gates=5):
    rng = np.random.default_rng(seed)
    alphas = rng.uniform(0.2, 0.9, n_modes) * np.exp(1j * rng.uniform(0, 2 * np.pi, n_modes))
    d = n_max + 1
    state = mps.init_product_coherent(alphas, n_max, chi_max=d**2, s_min=0.0)
    psi = oracles.product_state(alphas, d)
    for _ in range(n_gates):
        site = int(rng.integers(0, n_modes - 1))
        j, u = rng.uniform(0, np.pi), rng.uniform(0, 1)
        mps.apply_two_mode_gate(state, gate_unitary(j, u, FockSpace(n_max)), site)
        psi = oracles.embed(oracles.two_mode_unitary(j, u, d), site, 2, n_modes, d) @ psi
    return state, psi


def _assert_right_canonical(state):
    for t in state.tensors:
        b, chi_l = t.shape[:2]
        m = t.reshape(b, chi_l, -1)
        eye = torch.eye(chi_l, dtype=t.dtype).expand(b, -1, -1)
        assert torch.allclose(m @ m.mH, eye, atol=1e-10)
    for s in state.singular_values:
        np.testing.assert_allclose((s**2).sum(dim=-1).numpy(), 1.0, atol=1e-10)


def test_vacuum_and_coherent_initial_states():
    vac = mps.init_product_coherent([0, 0, 0], n_max=4)
    for l in range(3):
        assert float(mps.local_expectation(vac, number(vac.space), l)[1]) == 0.0
    state = mps.init_product_coherent([1, 1, 1], n_max=12, batch_count=2)
    assert state.bond_dimensions() == [1, 1]
    for l in range(3):
        values, mean = mps.local_expectation(state, number(state.space), l)
        assert float(mean) == pytest.approx(1.0, abs=1e-6)
        assert values.shape == (2,)
    _, entropies = mps.bipartite_entropies(state)
    assert torch.all(entropies == 0)
    _assert_right_canonical(state)


def test_identity_gate_and_expectations():
    state = mps.init_product_coherent([0.5, 0.3j], n_max=5)
    before = [float(mps.local_expectation(state, number(state.space), l)[1]) for l in range(2)]
    mps.apply_two_mode_gate(state, gate_unitary(0, 0, state.space), 0)
    after = [float(mps.local_expectation(state, number(state.space), l)[1]) for l in range(2)]
    np.testing.assert_allclose(after, before, atol=1e-12)
    values, _ = mps.local_expectation(state, np.eye(state.d), 1)
    np.testing.assert_allclose(values.numpy(), 1.0, atol=1e-12)


def test_beam_splitter_and_swap_on_coherent_input():
    alpha = 0.8
    state = mps.init_product_coherent([alpha, 0], n_max=14)
    mps.apply_two_mode_gate(state, gate_unitary(math.pi / 4, 0, state.space), 0)
    occ = [float(mps.local_expectation(state, number(state.space), l)[1]) for l in range(2)]
    np.testing.assert_allclose(occ, [alpha**2 / 2] * 2, atol=1e-8)
    swap = mps.init_product_coherent([alpha, 0], n_max=14)
    mps.apply_two_mode_gate(swap, gate_unitary(math.pi / 2, 0, swap.space), 0)
    occ = [float(mps.local_expectation(swap, number(swap.space), l)[1]) for l in range(2)]
    np.testing.assert_allclose(occ, [0, alpha**2], atol=1e-8)
    assert swap.max_bond_dimension() == 1


def test_gate_matches_dense_and_keeps_canonical_form():
    state, psi = _random_gate_state(0)
    out = mps.to_dense(state)
    assert abs(np.vdot(psi, out)) == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-10)
    _assert_right_canonical(state)


def test_local_quantities_match_dense_oracle():
    state, psi = _random_gate_state(1)
    d = state.d
    for l in range(3):
        rho = mps.reduced_density_matrix(state, l).numpy()
        np.testing.assert_allclose(rho, oracles.reduced_density(psi, l, 3, d), atol=1e-10)
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-10)
        assert np.linalg.eigvalsh(rho).min() >= -1e-12
        val = float(mps.local_expectation(state, number(state.space), l)[1])
        assert val == pytest.approx(oracles.mean_occupation(psi, l, 3, d), abs=1e-10)
    _, entropies = mps.bipartite_entropies(state)
    for bond in range(2):
        t = psi.reshape(d ** (bond + 1), -1)
        p = np.linalg.svd(t, compute_uv=False) ** 2
        p = p[p > 1e-300]
        assert float(entropies[bond]) == pytest.approx(-(p * np.log(p)).sum(), abs=1e-8)


def test_bell_pair_entropy_and_batch_average():
    state = _fock_product([[1, 0]], n_max=1)
    mps.apply_two_mode_gate(state, gate_unitary(math.pi / 4, 0, state.space), 0)
    _, entropies = mps.bipartite_entropies(state)
    assert float(entropies[0]) == pytest.approx(math.log(2), abs=1e-12)
    mixed = _fock_product([[0], [1]], n_max=3)
    np.testing.assert_allclose(mps.reduced_density_matrix(mixed, 0).numpy(), np.diag([0.5, 0.5, 0, 0]))


def test_single_mode_operators():
    space = FockSpace(20)
    state = mps.init_product_coherent([0.7, 0.4], n_max=20)
    before = mps.reduced_density_matrix(state, 0).numpy()
    mps.apply_single_mode(state, np.eye(space.d), 0)
    np.testing.assert_allclose(mps.reduced_density_matrix(state, 0).numpy(), before, atol=1e-14)
    mps.apply_single_mode(state, annihilation(space), 0)
    np.testing.assert_allclose(mps.reduced_density_matrix(state, 0).numpy(), before, atol=1e-10)
    assert state.norm_log[0] == pytest.approx(math.log(0.7), abs=1e-8)
    one = _fock_product([[1, 0]], n_max=3)
    mps.apply_single_mode(one, annihilation(FockSpace(3)), 0)
    assert one.norm_log[0] == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(mps.reduced_density_matrix(one, 0).numpy()[0, 0], 1.0)
    vac = _fock_product([[0, 0]], n_max=3)
    with pytest.raises(mps.ZeroNormError):
        mps.apply_single_mode(vac, annihilation(FockSpace(3)), 0)


def test_non_unitary_operator_restores_canonical_form():
    state, _ = _random_gate_state(2)
    damp = np.diag(np.exp(-0.3 * np.arange(state.d)))
    mps.apply_single_mode(state, damp, 1)
    _assert_right_canonical(state)
    assert np.linalg.norm(mps.to_dense(state)) == pytest.approx(1.0, abs=1e-10)


def test_to_dense_cap_and_product():
    state = mps.init_product_coherent([0.3, 0.5j], n_max=3)
    np.testing.assert_allclose(mps.to_dense(state), oracles.product_state([0.3, 0.5j], 4), atol=1e-14)
    with pytest.raises(mps.DenseCapError):
        mps.to_dense(mps.init_product_coherent([0.1] * 7, n_max=3))


def test_truncation_warning_and_bond_cap():
    state = mps.init_product_coherent([1.0, 1.0], n_max=4, chi_max=2, s_min=0.0)
    with pytest.warns(mps.TruncationWarning):
        mps.apply_two_mode_gate(state, gate_unitary(math.pi / 4, 2.0, state.space), 0)
    assert state.max_bond_dimension() <= 2
    assert state.discarded[0] > 1e-6


def test_batch_commutes_with_gate():
    alphas = np.array([[0.5, 0.2j], [0.1, 0.9]])
    batched = mps.init_product_coherent(alphas, n_max=4)
    gate = gate_unitary(0.7, 0.4, batched.space)
    mps.apply_two_mode_gate(batched, gate, 0)
    for b in range(2):
        single = mps.init_product_coherent(alphas[b], n_max=4)
        mps.apply_two_mode_gate(single, gate, 0)
        assert abs(np.vdot(mps.to_dense(single), mps.to_dense(batched, b))) == pytest.approx(1.0, abs=1e-12)


def test_snapshot_round_trip(tmp_path):
    state, _ = _random_gate_state(3)
    path = tmp_path / "state.npz"
    mps.save_snapshot(state, path)
    loaded = mps.load_snapshot(path)
    np.testing.assert_array_equal(mps.to_dense(loaded), mps.to_dense(state))
    assert loaded.bond_dimensions() == state.bond_dimensions()
    assert loaded.n_max == state.n_max and loaded.s_min == state.s_min


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_norm_conserved_up_to_discarded_weight(seed):
    rng = np.random.default_rng(seed)
    state = mps.init_product_coherent(rng.uniform(0, 1, 4), n_max=3, chi_max=3, s_min=1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mps.TruncationWarning)
        for _ in range(6):
            site = int(rng.integers(0, 3))
            mps.apply_two_mode_gate(state, gate_unitary(rng.uniform(0, np.pi), rng.uniform(0, 1), state.space), site)
    assert state.max_bond_dimension() <= 3
    norm2 = np.linalg.norm(mps.to_dense(state)) ** 2
    assert abs(norm2 - 1) <= state.discarded[0] + 1e-10
