"""Exact few-mode dynamics in a truncated Fock space.

States are pure and the Hamiltonian conserves the total number, so a
truncation at total <= N_max is exact for any state supported below it.
"""

from dataclasses import dataclass
from itertools import product
from math import comb, factorial

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .errors import ConfigurationError, NumericError

MAX_MODES = 4
MAX_DIM = 200_000
NORM_TOL = 1e-9


@dataclass
class FockBasis:
    n_modes: int
    n_max: int
    states: np.ndarray   # (dim, n_modes) occupations
    index: dict

    @property
    def dim(self):
        return len(self.states)

    @property
    def totals(self):
        return self.states.sum(axis=1)


@dataclass
class FockState:
    basis: FockBasis
    amplitudes: np.ndarray
    t: float = 0.0

    @property
    def norm(self):
        return float(np.linalg.norm(self.amplitudes))


def fock_dimension(n_modes, n_max):
    return comb(n_max + n_modes, n_modes)


def build_fock_basis(n_modes, n_max):
    """All occupations with total <= n_max, ordered by total then lexicographically."""
    if n_modes < 1 or n_modes > MAX_MODES:
        raise ConfigurationError(f"Fock oracle supports 1..{MAX_MODES} modes, got {n_modes}")
    if n_max < 0:
        raise ConfigurationError("N_max must be >= 0")
    dim = fock_dimension(n_modes, n_max)
    if dim > MAX_DIM:
        raise ConfigurationError(
            f"Fock dimension {dim} for {n_modes} modes, N_max={n_max} exceeds cap {MAX_DIM}")
    states = []
    for total in range(n_max + 1):
        for occ in product(range(total + 1), repeat=n_modes):
            if sum(occ) == total:
                states.append(occ)
    states = np.array(states, dtype=np.int64).reshape(-1, n_modes)
    return FockBasis(n_modes, n_max, states, {tuple(s): i for i, s in enumerate(states)})


def annihilation(basis, k):
    """Sparse c_k."""
    rows, cols, vals = [], [], []
    for j, occ in enumerate(basis.states):
        if occ[k] > 0:
            tgt = occ.copy()
            tgt[k] -= 1
            rows.append(basis.index[tuple(tgt)])
            cols.append(j)
            vals.append(np.sqrt(occ[k]))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(basis.dim, basis.dim), dtype=complex)


def operators(basis):
    c = [annihilation(basis, k) for k in range(basis.n_modes)]
    return c, [op.conj().T.tocsr() for op in c]


def build_hamiltonian_matrix(tensors, basis, ops=None):
    """H = sum h_kl c_k^+ c_l + 1/2 sum g_klmn c_k^+ c_l^+ c_m c_n."""
    n = basis.n_modes
    if tensors.n_modes != n:
        tensors = tensors.restrict(n)
    c, cd = ops or operators(basis)
    h, g4 = tensors.h, tensors.g4
    H = sparse.csr_matrix((basis.dim, basis.dim), dtype=complex)
    for k in range(n):
        for l in range(n):
            if abs(h[k, l]) > 0:
                H = H + h[k, l] * (cd[k] @ c[l])
    pair_a = {(m, nn): c[m] @ c[nn] for m in range(n) for nn in range(n)}
    for k in range(n):
        for l in range(n):
            left = cd[k] @ cd[l]
            for m in range(n):
                for nn in range(n):
                    w = g4[k, l, m, nn]
                    if abs(w) > 0:
                        H = H + 0.5 * w * (left @ pair_a[m, nn])
    H = H.tocsr()
    H.eliminate_zeros()
    return H


def coherent_cap(alpha):
    """Smallest N_max with N_max >= |a|^2 + 6|a| + 4 (Poisson tail < 1e-6)."""
    n2 = float(np.sum(np.abs(np.asarray(alpha)) ** 2))
    return int(np.ceil(n2 + 6 * np.sqrt(n2) + 4))


def coherent_state(basis, alpha, renormalize=True):
    """Product coherent state truncated to the basis."""
    alpha = np.asarray(alpha, dtype=complex)
    if len(alpha) != basis.n_modes:
        raise ConfigurationError("coherent amplitudes do not match the basis mode count")
    amp = np.ones(basis.dim, dtype=complex) * np.exp(-0.5 * np.sum(np.abs(alpha) ** 2))
    for k in range(basis.n_modes):
        nk = basis.states[:, k]
        fact = np.array([np.sqrt(float(factorial(int(v)))) for v in nk])
        amp *= alpha[k] ** nk / fact
    if renormalize:
        amp /= np.linalg.norm(amp)
    return FockState(basis, amp)


def number_state(basis, occupation):
    amp = np.zeros(basis.dim, dtype=complex)
    amp[basis.index[tuple(occupation)]] = 1.0
    return FockState(basis, amp)


def evolve_exact(state, hamiltonian_provider, t_final, dt, observation_times=None,
                 sampling="start"):
    """Piecewise-constant propagation; H is sampled at each step's start (or midpoint).

    ``hamiltonian_provider`` is a callable t -> sparse matrix or a fixed
    matrix.  Returns the final state, or a list of states at
    ``observation_times`` when given.
    """
    n_steps = int(round(t_final / dt))
    if abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigurationError(f"dt = {dt} does not divide t_final = {t_final}")
    static = not callable(hamiltonian_provider)
    obs = {} if observation_times is None else {
        int(round(t / dt)): i for i, t in enumerate(observation_times)}
    out = [None] * len(obs)
    psi = state.amplitudes.copy()
    if 0 in obs:
        out[obs[0]] = FockState(state.basis, psi.copy(), state.t)
    shift = 0.5 if sampling == "midpoint" else 0.0
    if static:
        H = hamiltonian_provider
    step = 0
    while step < n_steps:
        if static:
            # with fixed H, jump straight to the next observation (or the end)
            nxt = min([j for j in obs if j > step], default=n_steps)
            psi = expm_multiply(-1j * (nxt - step) * dt * H, psi)
            step = nxt
        else:
            H = hamiltonian_provider((step + shift) * dt)
            psi = expm_multiply(-1j * dt * H, psi)
            step += 1
        drift = abs(np.linalg.norm(psi) - 1.0)
        if drift > NORM_TOL:
            raise NumericError(
                f"norm drifted by {drift:.2e} at t = {step * dt:.6g}; use a smaller dt")
        if step in obs:
            out[obs[step]] = FockState(state.basis, psi.copy(), state.t + step * dt)
    final = FockState(state.basis, psi, state.t + n_steps * dt)
    return final if observation_times is None else out


def one_body_matrix(state, ops=None):
    """<c_j^+ c_k>."""
    c, _ = ops or operators(state.basis)
    psi = state.amplitudes
    v = [op @ psi for op in c]
    n = len(c)
    return np.array([[np.vdot(v[j], v[k]) for k in range(n)] for j in range(n)])


def two_body_tensor(state, ops=None):
    """<c_i^+ c_j^+ c_k c_l>."""
    c, _ = ops or operators(state.basis)
    psi = state.amplitudes
    n = len(c)
    v = {(k, l): c[k] @ (c[l] @ psi) for k in range(n) for l in range(n)}
    out = np.zeros((n,) * 4, dtype=complex)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for l in range(n):
                    # <psi| c_i^+ c_j^+ c_k c_l |psi> = <c_j c_i psi | c_k c_l psi>
                    out[i, j, k, l] = np.vdot(v[j, i], v[k, l])
    return out


def exact_correlations(state, basis, g1_pairs=(), g2_pairs=(), ops=None):
    """Exact one-body matrix, G1 and G2 in the same layout as ensemble results."""
    from .correlators import CorrelationResult

    ops = ops or operators(state.basis)
    n = state.basis.n_modes
    rho = one_body_matrix(state, ops)
    out = {"one_body": CorrelationResult(
        "one_body", [(j, k) for j in range(n) for k in range(n)], rho.reshape(-1),
        np.zeros(n * n), "normal", 0, 0, state.t, method="exact")}
    if g1_pairs:
        vals = []
        for r, s in g1_pairs:
            pr, ps = basis.values_at(r)[:n], basis.values_at(s)[:n]
            vals.append(pr.conj() @ rho @ ps)
        out["G1"] = CorrelationResult("G1", [tuple(map(float, p)) for p in g1_pairs],
                                      np.array(vals), np.zeros(len(vals)), "normal", 0, 0,
                                      state.t, method="exact")
    if g2_pairs:
        t4 = two_body_tensor(state, ops)
        vals = []
        for r1, r2 in g2_pairs:
            p1, p2 = basis.values_at(r1)[:n], basis.values_at(r2)[:n]
            vals.append(np.einsum("i,j,ijkl,k,l->", p1.conj(), p2.conj(), t4, p2, p1))
        out["G2"] = CorrelationResult("G2", [tuple(map(float, p)) for p in g2_pairs],
                                      np.array(vals), np.zeros(len(vals)), "normal", 0, 0,
                                      state.t, method="exact")
    return out


def expectation(state, op):
    return complex(np.vdot(state.amplitudes, op @ state.amplitudes))
