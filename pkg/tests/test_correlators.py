import numpy as np
import pytest

from becphase import correlators as co
from becphase import fock, lattice, stochastic
from becphase.errors import ConfigurationError, UndefinedVisibilityError


def draws(condensate, n_modes, m, seed):
    spec = stochastic.InitialState(tuple(condensate))
    seeds = [stochastic.trajectory_seed(seed, i) for i in range(m)]
    return stochastic.sample_initial_batch(spec, seeds, n_modes)


def ensemble(x, n_modes, channels=(), times=(0.0,)):
    acc = co.EnsembleAccumulator(n_modes, times, channel_names=[c.name for c in channels])
    samples = x[:, None, :] if x.ndim == 2 else x
    return co.accumulate_batch(acc, samples, np.full(len(x), -1), channels)


def test_constant_and_mean_monomials():
    x = draws((10.0, 0.0), 3, 10_000, 1)
    one = co.MonomialChannel((), 3)
    a1 = co.MonomialChannel(co.parse_monomial("a0", 3), 3)
    acc = ensemble(x, 3, [one, a1])
    assert acc.channel_mean(one.name, 0.0) == 1
    assert acc.channel_se(one.name, 0.0) == 0
    assert abs(acc.channel_mean(a1.name, 0.0) - 10) < 3 * acc.channel_se(a1.name, 0.0)


def test_monomial_parsing():
    f = co.parse_monomial("a0+ a1 a2+", 3)
    assert f == (3, 1, 5)
    assert co.parse_monomial(co.format_monomial(f, 3), 3) == f
    with pytest.raises(ConfigurationError):
        co.parse_monomial("a7", 3)
    with pytest.raises(ConfigurationError):
        co.MonomialChannel((9,), 3)


def test_merge_is_exact_on_sums(rng):
    # integer-valued samples make every float sum exact, so grouping cannot matter
    x = rng.integers(-5, 6, size=(40, 2, 8)) + 1j * rng.integers(-5, 6, size=(40, 2, 8))
    ch = [co.MonomialChannel((4, 0), 4)]
    acc0 = co.EnsembleAccumulator(4, (0.0, 1.0), channel_names=[ch[0].name])
    whole = co.accumulate_batch(acc0, x, np.full(40, -1), ch)
    a = co.accumulate_batch(acc0, x[:15], np.full(15, -1), ch)
    b = co.accumulate_batch(acc0, x[15:], np.full(25, -1), ch)
    for merged in (a.merge(b), b.merge(a)):
        for k, v in whole.to_arrays().items():
            assert np.array_equal(v, merged.to_arrays()[k]), k


def test_merge_rejects_mismatched_layout():
    with pytest.raises(ConfigurationError):
        co.EnsembleAccumulator(2, (0.0,)).merge(co.EnsembleAccumulator(3, (0.0,)))


def test_diverged_trajectories_only_counted():
    acc = co.EnsembleAccumulator(2, (0.0,))
    bad = stochastic.TrajectoryResult([], "diverged", 1, diverged_step=3)
    good = stochastic.TrajectoryResult(
        [stochastic.PhasePoint(np.array([1.0, 0, 1.0, 0]))], "completed", 2)
    acc = co.accumulate(co.accumulate(acc, bad), good)
    assert acc.count == 1 and acc.diverged == 1
    assert np.allclose(acc.mean_pairs(0.0), [[1, 0], [0, 0]])
    with pytest.raises(ConfigurationError):
        acc.mean_pairs(0.5)


def test_linear_se_matches_brute_force(rng):
    x = draws((1.5, 0.5j), 3, 2000, 3)
    acc = ensemble(x, 3)
    w = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    vals = np.einsum("jk,bj,bk->b", w, x[:, 3:], x[:, :3])
    m = len(vals)
    assert np.isclose(acc.linear_se(w, 0.0), np.sqrt(np.var(vals) / m), rtol=1e-9)
    assert np.isclose(acc.linear_se(w, 0.0, "re"), np.sqrt(np.var(vals.real) / m), rtol=1e-9)
    assert np.isclose(acc.linear_se(w, 0.0, "im"), np.sqrt(np.var(vals.imag) / m), rtol=1e-9)


def test_se_scales_as_inverse_sqrt(harmonic6):
    basis, _ = harmonic6
    x = draws((2.0, 0.0), 6, 16_000, 4)
    small = co.g1(ensemble(x[:4000], 6), basis, 0.3, 0.3, 0.0).errors[0]
    large = co.g1(ensemble(x, 6), basis, 0.3, 0.3, 0.0).errors[0]
    assert 0.45 < large / small < 0.55


def test_vacuum_g1_cancels(harmonic6):
    basis, _ = harmonic6
    acc = ensemble(draws((0.0, 0.0), 6, 10_000, 5), 6)
    res = co.g1_diagonal(acc, basis, 0.0)
    assert np.all(np.abs(res.values) < 3 * res.errors)
    raw = co.g1_diagonal(acc, basis, 0.0, corrected=False)
    # the uncorrected diagonal carries the half-quantum background
    i = np.argmin(np.abs(basis.grid.x))
    assert raw.values[i].real > 10 * raw.errors[i]


def test_coherent_g1_and_hermiticity(harmonic6):
    basis, _ = harmonic6
    n = 9.0
    acc = ensemble(draws((np.sqrt(n), 0.0), 6, 10_000, 6), 6)
    pts = np.array([-1.5, -0.5, 0.0, 0.4, 1.2])
    r, s = np.meshgrid(pts, pts, indexing="ij")
    res = co.g1(acc, basis, r.ravel(), s.ravel(), 0.0)
    phi = np.array([basis.values_at(p)[0] for p in pts])
    expect = n * np.outer(phi.conj(), phi).ravel()
    assert np.all(np.abs(res.values - expect) < 3 * res.errors)
    back = co.g1(acc, basis, s.ravel(), r.ravel(), 0.0)
    assert np.allclose(res.values, back.values.conj(), atol=1e-12)


def test_one_body_matrix(harmonic6):
    n = 4.0
    acc = ensemble(draws((np.sqrt(n), 0.0), 6, 10_000, 7), 6)
    rho, se = co.one_body_density_matrix(acc, 0.0)
    expect = np.zeros((6, 6))
    expect[0, 0] = n
    assert np.all(np.abs(rho - expect) <= 3 * se)
    assert np.allclose(rho, rho.conj().T, atol=1e-12)
    assert abs(np.trace(rho).real - n) < 3 * acc.linear_se(np.eye(6), 0.0)
    vac = ensemble(draws((0.0, 0.0), 6, 10_000, 8), 6)
    rho, se = co.one_body_density_matrix(vac, 0.0)
    assert np.all(np.abs(rho) <= 3 * se)


def test_g2_coherent_vacuum_and_symmetry(harmonic6):
    basis, _ = harmonic6
    pairs = [(0.0, 0.0), (0.5, -1.0), (-1.0, 0.5), (1.0, 1.0)]
    chans = co.g2_channels(basis, pairs)
    assert len(chans) == 3
    a0 = 2.0
    acc = ensemble(draws((a0, 0.0), 6, 10_000, 9), 6, chans)
    res = co.g2(acc, basis, [p[0] for p in pairs], [p[1] for p in pairs], 0.0)
    for (r1, r2), v, e in zip(pairs, res.values, res.errors):
        p1, p2 = basis.values_at(r1)[0], basis.values_at(r2)[0]
        assert abs(v - a0**4 * abs(p1) ** 2 * abs(p2) ** 2) < 3 * e
    assert res.values[1] == res.values[2]
    vac = ensemble(draws((0.0, 0.0), 6, 10_000, 10), 6, chans)
    res = co.g2(vac, basis, [p[0] for p in pairs], [p[1] for p in pairs], 0.0)
    assert np.all(np.abs(res.values) < 3 * res.errors)
    with pytest.raises(ConfigurationError):
        co.g2(vac, basis, 0.2, 0.3, 0.0)


def test_g2_two_mode_against_fock(harmonic6):
    basis, _ = harmonic6
    alpha = np.array([1.2, 0.9j])
    pairs = [(0.0, 0.0), (-0.7, 0.7), (0.3, 1.1)]
    chans = co.g2_channels(basis, pairs)
    acc = ensemble(draws(alpha, 6, 20_000, 11), 6, chans)
    res = co.g2(acc, basis, [p[0] for p in pairs], [p[1] for p in pairs], 0.0)
    fb = fock.build_fock_basis(2, fock.coherent_cap(alpha))
    exact = fock.exact_correlations(fock.coherent_state(fb, alpha), basis, g2_pairs=pairs)
    assert np.all(np.abs(res.values - exact["G2"].values) < 3 * res.errors)


def _density_result(x, dens):
    return co.CorrelationResult("G1", [(v, v) for v in x], np.asarray(dens, dtype=complex),
                                np.zeros(len(x)), "normal", 1)


def test_visibility_examples():
    x = np.linspace(-np.pi, np.pi, 401)
    assert abs(co.visibility(_density_result(x, np.cos(x) ** 2))[0] - 1) < 1e-6
    assert co.visibility(_density_result(x, np.ones_like(x)))[0] == 0
    assert abs(co.visibility(_density_result(x, 1 + np.cos(x) / 3))[0] - 1 / 3) < 1e-6
    assert abs(co.visibility(_density_result(x, 1 + 0.5 * np.cos(x)))[0] - 0.5) < 1e-6
    # window restricts the extrema
    v, _ = co.visibility(_density_result(x, 1 + 0.5 * np.cos(x)), (-0.1, 0.1))
    assert v < 0.01
    with pytest.raises(UndefinedVisibilityError):
        co.visibility(_density_result(x, np.zeros_like(x)))
    with pytest.raises(UndefinedVisibilityError):
        co.visibility(_density_result(x, np.ones_like(x)), (10, 11))


def test_visibility_error_propagation():
    x = np.array([0.0, 1.0])
    res = _density_result(x, [3.0, 1.0])
    res.errors = np.array([0.1, 0.2])
    v, e = co.visibility(res)
    assert np.isclose(v, 0.5)
    assert np.isclose(e, np.hypot(2 * 1 / 16 * 0.1, 2 * 3 / 16 * 0.2))


def test_imbalance_weights(grid257):
    v = 0.5 * grid257.x**2
    basis = lattice.solve_modes(grid257, v, 4)
    w = co.imbalance_weights(basis)
    assert np.allclose(w, w.conj().T)
    # parity: even/odd harmonic modes only couple to opposite parity
    assert np.allclose(np.diag(w), 0, atol=1e-10)
    assert abs(w[0, 1]) > 0.5


def test_results_csv_json(tmp_path, harmonic6):
    basis, _ = harmonic6
    acc = ensemble(draws((1.0, 0.0), 6, 100, 12), 6)
    res = co.g1(acc, basis, [0.0, 0.5], [0.0, -0.5], 0.0)
    co.write_results_csv(tmp_path / "g1.csv", [res])
    lines = (tmp_path / "g1.csv").read_text().splitlines()
    assert lines[0].split(",") == ["r", "s", "t", "re", "im", "se", "n_used",
                                   "diverged_excluded"]
    assert len(lines) == 3
    co.write_results_json(tmp_path / "r.json", [res], {"seed": 1})
    assert (tmp_path / "r.json").stat().st_size > 0
