import numpy as np
import pytest
from scipy import sparse

from becphase import fock, lattice
from becphase.errors import ConfigurationError, NumericError


def tensors(h, g4=None):
    h = np.asarray(h, dtype=complex)
    n = len(h)
    return lattice.CouplingTensors(h, np.zeros((n,) * 4) if g4 is None else g4, 0.0)


def test_basis_examples():
    b = fock.build_fock_basis(2, 2)
    assert b.dim == 6
    assert [tuple(s) for s in b.states] == [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0)]
    assert fock.build_fock_basis(1, 5).dim == 6
    with pytest.raises(ConfigurationError):
        fock.build_fock_basis(4, 1000)
    with pytest.raises(ConfigurationError):
        fock.build_fock_basis(5, 2)


@pytest.mark.parametrize("n,nmax", [(1, 7), (2, 5), (3, 4), (4, 3)])
def test_basis_dimension_and_index(n, nmax):
    b = fock.build_fock_basis(n, nmax)
    assert b.dim == fock.fock_dimension(n, nmax)
    assert len({tuple(s) for s in b.states}) == b.dim
    assert all(b.index[tuple(s)] == i for i, s in enumerate(b.states))
    assert b.totals.max() == nmax


def test_hamiltonian_diagonal_free():
    e = np.array([0.5, 1.5, 2.5])
    b = fock.build_fock_basis(3, 3)
    H = fock.build_hamiltonian_matrix(tensors(np.diag(e)), b)
    assert sparse.linalg.norm(H - sparse.diags(H.diagonal())) == 0
    assert np.allclose(H.diagonal(), b.states @ e, atol=1e-14)


def test_hamiltonian_single_mode_kerr():
    chi = 0.7
    b = fock.build_fock_basis(1, 6)
    g4 = np.full((1, 1, 1, 1), 2 * chi)
    H = fock.build_hamiltonian_matrix(tensors(np.zeros((1, 1)), g4), b).toarray()
    n = b.states[:, 0]
    assert np.allclose(np.diag(H), chi * n * (n - 1), atol=1e-14)


def test_hamiltonian_hermitian_and_conserving(rng):
    n = 3
    h = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    h = h + h.conj().T
    g4 = rng.normal(size=(n,) * 4)
    g4 = g4 + g4.transpose(1, 0, 2, 3)
    g4 = g4 + g4.transpose(0, 1, 3, 2)
    g4 = g4 + g4.transpose(3, 2, 1, 0)
    b = fock.build_fock_basis(n, 4)
    H = fock.build_hamiltonian_matrix(tensors(h, g4), b).toarray()
    assert np.max(np.abs(H - H.conj().T)) < 1e-12
    tot = b.totals
    assert np.all(H[tot[:, None] != tot[None, :]] == 0)


def test_eigenstate_phase():
    e = np.array([0.5, 1.5])
    b = fock.build_fock_basis(2, 3)
    H = fock.build_hamiltonian_matrix(tensors(np.diag(e)), b)
    psi = fock.number_state(b, (1, 2))
    out = fock.evolve_exact(psi, H, 2.0, 0.01)
    assert np.max(np.abs(out.amplitudes - psi.amplitudes * np.exp(-1j * 3.5 * 2.0))) < 1e-9


def test_rabi_oscillation():
    J = 0.8
    b = fock.build_fock_basis(2, 1)
    H = fock.build_hamiltonian_matrix(tensors([[0, J], [J, 0]]), b)
    c, cd = fock.operators(b)
    times = np.linspace(0, 5, 11)
    states = fock.evolve_exact(fock.number_state(b, (1, 0)), lambda t: H, 5.0, 0.01,
                               observation_times=times)
    n0 = [fock.expectation(s, cd[0] @ c[0]).real for s in states]
    assert np.max(np.abs(np.array(n0) - np.cos(J * times) ** 2)) < 1e-8


def test_norm_energy_number_conserved():
    b = fock.build_fock_basis(2, 8)
    g4 = np.full((2,) * 4, 0.3)
    H = fock.build_hamiltonian_matrix(tensors([[0.5, 0.2], [0.2, 1.0]], g4), b)
    psi = fock.coherent_state(b, [1.0, 0.5j])
    c, cd = fock.operators(b)
    N = cd[0] @ c[0] + cd[1] @ c[1]
    out = fock.evolve_exact(psi, lambda t: H, 10.0, 1e-3)
    assert abs(out.norm - 1) < 1e-9
    assert abs(fock.expectation(out, H) - fock.expectation(psi, H)) < 1e-8
    assert abs(fock.expectation(out, N) - fock.expectation(psi, N)) < 1e-9


def test_norm_drift_raises():
    b = fock.build_fock_basis(1, 3)
    # non-Hermitian generator breaks unitarity
    H = sparse.csr_matrix(np.diag([0, -1j, 0, 0]).astype(complex))
    with pytest.raises(NumericError):
        fock.evolve_exact(fock.coherent_state(b, [1.0]), lambda t: H, 1.0, 0.1)


def test_dt_must_divide():
    b = fock.build_fock_basis(1, 2)
    with pytest.raises(ConfigurationError):
        fock.evolve_exact(fock.number_state(b, (1,)), sparse.eye(b.dim), 1.0, 0.3)


def test_coherent_truncation_tail():
    cap = fock.coherent_cap([1.0])
    assert cap >= 1 + 6 + 4
    b = fock.build_fock_basis(2, cap)
    s = fock.coherent_state(b, [1.0, 0.0])
    rho = fock.one_body_matrix(s)
    assert abs(rho[0, 0] - 1) < 1e-6
    assert np.max(np.abs(rho - rho.conj().T)) < 1e-12


def test_vacuum_correlations_zero(harmonic6):
    basis, _ = harmonic6
    b = fock.build_fock_basis(3, 2)
    out = fock.exact_correlations(fock.number_state(b, (0, 0, 0)), basis,
                                  g1_pairs=[(0.0, 0.5)], g2_pairs=[(0.0, 0.0)])
    for res in out.values():
        assert np.all(res.values == 0)
        assert np.all(res.errors == 0)
        assert res.method == "exact"


def test_number_state_g2(harmonic6):
    basis, _ = harmonic6
    b = fock.build_fock_basis(2, 3)
    out = fock.exact_correlations(fock.number_state(b, (3, 0)), basis,
                                  g1_pairs=[(0.3, 0.3)], g2_pairs=[(0.3, 0.3)])
    phi = basis.values_at(0.3)[0]
    assert np.isclose(out["G1"].values[0], 3 * abs(phi) ** 2, atol=1e-12)
    assert np.isclose(out["G2"].values[0], 6 * abs(phi) ** 4, atol=1e-12)
