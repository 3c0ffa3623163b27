"""Double-well interferometer protocol and its observables.

The trap is one smooth family for all stages,

    V(x, t) = a(t) x^2 / 2 + b(t) exp(-x^2 / (2 sigma^2)) + eps(t) x,

so a single well is b = eps = 0 and every stage change is a ramp of the
coefficients (a, b, eps).
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import linalg

from .errors import ConfigurationError
from . import lattice

RAMPS = ("linear", "smoothstep")
FAMILIES = ("harmonic", "double_well")


@dataclass(frozen=True)
class TrapParams:
    a: float = 1.0
    b: float = 0.0
    eps: float = 0.0

    def as_tuple(self):
        return (self.a, self.b, self.eps)


def _trap_from_family(family, params, previous):
    params = dict(params)
    if family == "harmonic":
        omega = params.pop("omega", math.sqrt(previous.a))
        out = TrapParams(omega**2, 0.0, 0.0)
    elif family == "double_well":
        omega = params.pop("omega", math.sqrt(previous.a))
        out = TrapParams(omega**2, float(params.pop("barrier")), float(params.pop("tilt", 0.0)))
    else:
        raise ConfigurationError(f"unknown trap family {family!r}; expected one of {FAMILIES}")
    if params:
        raise ConfigurationError(f"unknown {family} parameters: {sorted(params)}")
    return out


@dataclass(frozen=True)
class Stage:
    duration: float
    start: TrapParams
    end: TrapParams
    ramp: str = "linear"

    def at(self, tau):
        s = min(max(tau / self.duration, 0.0), 1.0)
        if self.ramp == "smoothstep":
            s = s * s * (3.0 - 2.0 * s)
        return tuple(p0 + s * (p1 - p0)
                     for p0, p1 in zip(self.start.as_tuple(), self.end.as_tuple()))


@dataclass(frozen=True)
class PotentialProtocol:
    initial: TrapParams
    stages: tuple
    sigma: float = 0.8
    source: dict = field(default=None, compare=False, repr=False)

    @property
    def span(self):
        return sum(s.duration for s in self.stages)

    @property
    def final(self):
        return self.stages[-1].end if self.stages else self.initial

    @classmethod
    def from_dict(cls, spec):
        spec = dict(spec)
        sigma = float(spec.pop("sigma", 0.8))
        init = dict(spec.pop("initial", {"family": "harmonic", "omega": 1.0}))
        stages_in = spec.pop("stages", [])
        if spec:
            raise ConfigurationError(f"unknown protocol keys: {sorted(spec)}")
        if sigma <= 0:
            raise ConfigurationError("protocol sigma must be positive")
        family = init.pop("family", "harmonic")
        current = _trap_from_family(family, init, TrapParams())
        initial = current
        stages = []
        for i, st in enumerate(stages_in):
            st = dict(st)
            try:
                duration = float(st.pop("duration"))
            except KeyError:
                raise ConfigurationError(f"stage {i} has no duration") from None
            if not duration > 0:
                raise ConfigurationError(f"stage {i} duration must be > 0")
            ramp = st.pop("ramp", "linear")
            if ramp not in RAMPS:
                raise ConfigurationError(f"stage {i} ramp {ramp!r} not in {RAMPS}")
            family = st.pop("family", None)
            target = current if family is None else _trap_from_family(family, st, current)
            if family is None and st:
                raise ConfigurationError(f"stage {i} hold stage has extra keys {sorted(st)}")
            stages.append(Stage(duration, current, target, ramp))
            current = target
        return cls(initial, tuple(stages), sigma, source=None)

    def coefficients(self, t):
        if t < -1e-12 or t > self.span + 1e-9:
            raise ValueError(f"time {t} outside protocol span [0, {self.span}]")
        start = 0.0
        for st in self.stages:
            if t <= start + st.duration:
                return st.at(t - start)
            start += st.duration
        return self.final.as_tuple()

    def shape_functions(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([0.5 * x**2, np.exp(-x**2 / (2 * self.sigma**2)), x])

    def potential_at(self, grid, t):
        x = grid.x if isinstance(grid, lattice.Grid) else np.asarray(grid)
        a, b, eps = self.coefficients(t)
        return a * 0.5 * x**2 + b * np.exp(-x**2 / (2 * self.sigma**2)) + eps * x

    def initial_potential(self, grid):
        return self.potential_at(grid, 0.0)

    def final_potential(self, grid):
        return self.potential_at(grid, self.span)

    def scaled(self, factor):
        """Same trap sequence with every duration multiplied by ``factor``."""
        stages = tuple(Stage(s.duration * factor, s.start, s.end, s.ramp) for s in self.stages)
        return PotentialProtocol(self.initial, stages, self.sigma)

    def with_tilt(self, eps):
        """Replace the tilt of every double-well target by ``eps``."""
        def swap(p):
            return TrapParams(p.a, p.b, eps if p.b > 0 else p.eps)
        stages = tuple(Stage(s.duration, swap(s.start), swap(s.end), s.ramp) for s in self.stages)
        return PotentialProtocol(swap(self.initial), stages, self.sigma)


def static_protocol(params, duration, sigma=0.8):
    return PotentialProtocol(params, (Stage(duration, params, params),), sigma)


def default_protocol(tilt=0.0, barrier=12.0, sigma=0.8):
    """hold 2, ramp up 3, hold 4, ramp down 3, hold 2 (oscillator units)."""
    return PotentialProtocol.from_dict({
        "sigma": sigma,
        "initial": {"family": "harmonic", "omega": 1.0},
        "stages": [
            {"duration": 2.0},
            {"family": "double_well", "barrier": barrier, "tilt": tilt,
             "duration": 3.0, "ramp": "smoothstep"},
            {"duration": 4.0},
            {"family": "harmonic", "omega": 1.0, "duration": 3.0, "ramp": "smoothstep"},
            {"duration": 2.0},
        ],
    })


def half_separation(params, sigma):
    """Distance of each double-well minimum from the centre (0 for one well)."""
    a, b, _ = params.as_tuple()
    if b <= a * sigma**2:
        return 0.0
    return sigma * math.sqrt(2.0 * math.log(b / (a * sigma**2)))


def potential_at(protocol, grid, t):
    return protocol.potential_at(grid, t)


class HamiltonianSchedule:
    """h(t) in a fixed mode basis: kinetic part plus the three trap shapes."""

    def __init__(self, basis, protocol):
        self.basis = basis
        self.protocol = protocol
        zero = np.zeros(basis.grid.n_points)
        self.h_kin = lattice.single_particle_matrix(basis, zero)
        self.shapes = np.array([lattice.potential_matrix(basis, f)
                                for f in protocol.shape_functions(basis.grid.x)])
        # energy reference subtracted from h: a number, or "center" for the
        # midpoint of the instantaneous spectrum.  Either way it only adds a
        # global phase, since the Hamiltonian conserves particle number.
        self.offset = 0.0

    def h(self, t):
        coeffs = np.asarray(self.protocol.coefficients(t))
        h = self.h_kin + np.tensordot(coeffs, self.shapes, axes=1)
        h = 0.5 * (h + h.conj().T)
        if isinstance(self.offset, str):
            ev = np.linalg.eigvalsh(h)
            shift = 0.5 * (ev[0] + ev[-1])
        else:
            shift = self.offset
        return (h - shift * np.eye(len(h))).astype(complex)

    def step_times(self, dt, n_steps, sampling="start"):
        shift = 0.5 if sampling == "midpoint" else 0.0
        return (np.arange(n_steps) + shift) * dt

    def is_static(self):
        return all(s.start == s.end for s in self.protocol.stages) and \
            (not self.protocol.stages or self.protocol.stages[0].start == self.protocol.initial)


# --------------------------------------------------------------------------
# observables

@dataclass
class ExcitationReport:
    populations: np.ndarray
    errors: np.ndarray
    p_excited: float
    p_excited_error: float
    visibility: float = float("nan")
    visibility_error: float = float("nan")

    def to_dict(self):
        return {"populations": self.populations.tolist(), "errors": self.errors.tolist(),
                "p_excited": self.p_excited, "p_excited_error": self.p_excited_error,
                "visibility": self.visibility, "visibility_error": self.visibility_error}


def basis_overlap(final_modes, evolution_modes):
    """U_kj = <phi^final_k | phi_j>."""
    if final_modes.grid != evolution_modes.grid:
        raise ConfigurationError("final and evolution bases live on different grids")
    return final_modes.modes.conj() @ evolution_modes.modes.T * final_modes.grid.dx


def excitation_probability(one_body, final_modes, evolution_modes=None, one_body_cov=None,
                           completeness_tol=1e-3, n_condensate=2):
    """Final-trap populations from the one-body matrix <c_j^+ c_l>.

    ``one_body_cov`` is an optional callable mapping a coefficient matrix W to
    the standard error of sum_jl W_jl rho_jl; it is supplied by ensemble
    results and omitted for exact ones.
    """
    evolution_modes = evolution_modes or final_modes
    u = basis_overlap(final_modes, evolution_modes)
    completeness = np.sum(np.abs(u) ** 2, axis=1)
    bad = np.abs(1.0 - completeness) > completeness_tol
    if np.any(bad):
        worst = int(np.argmax(np.abs(1.0 - completeness)))
        raise ConfigurationError(
            f"final-trap mode {worst} is only {completeness[worst]:.4f} represented in the "
            "evolution basis; increase n_modes")
    rho = np.asarray(one_body)
    # p_k = sum_jl conj(U_kj) U_kl rho_jl
    weights = [np.outer(u[k].conj(), u[k]) for k in range(len(u))]
    pops = np.array([np.sum(w * rho).real for w in weights])
    total = pops.sum()
    excited = pops[n_condensate:].sum()
    p_exc = excited / total
    if one_body_cov is None:
        errs = np.zeros_like(pops)
        p_err = 0.0
    else:
        errs = np.array([one_body_cov(w) for w in weights])
        w_exc = sum(weights[n_condensate:])
        w_tot = sum(weights)
        # linearized ratio: d(E/T) = (dE - p dT)/T
        p_err = one_body_cov((w_exc - p_exc * w_tot) / total)
    return ExcitationReport(pops, errs, float(p_exc), float(p_err))


def ground_state_coefficients(basis, n_modes=None):
    c = np.zeros(n_modes or basis.n_modes, dtype=complex)
    c[0] = 1.0
    return c


def propagate_modes(schedule, coeffs, t_final, dt, sampling="midpoint"):
    """Single-particle Schroedinger evolution in the mode basis."""
    n_steps = _n_steps(t_final, dt)
    c = np.asarray(coeffs, dtype=complex).copy()
    for t in schedule.step_times(dt, n_steps, sampling):
        c = linalg.expm(-1j * dt * schedule.h(t)) @ c
    return c


def propagate_grid(grid, protocol, psi0, t_final, dt, fd_order=lattice.DEFAULT_FD_ORDER):
    """Crank-Nicolson on the grid with the trap sampled at step midpoints."""
    n_steps = _n_steps(t_final, dt)
    bands = -0.5 * lattice.laplacian_bands(grid.n_points, grid.dx, fd_order)
    width = bands.shape[0] - 1
    # full banded storage for solve_banded: rows = upper + diag + lower
    upper = bands.astype(complex)
    lower = np.zeros_like(upper)
    for off in range(1, width + 1):
        lower[off, :-off] = upper[width - off, off:]
    psi = np.asarray(psi0, dtype=complex).copy()
    x = grid.x
    for j in range(n_steps):
        v = protocol.potential_at(x, (j + 0.5) * dt)
        ab = np.vstack([upper[:-1], (upper[-1] + v)[None, :], lower[1:]]) * (0.5j * dt)
        ab[width] += 1.0
        h_psi = lattice.apply_kinetic(grid, psi, fd_order) + v * psi
        rhs = psi - 0.5j * dt * h_psi
        psi = linalg.solve_banded((width, width), ab, rhs)
    return psi


def grid_excitation(grid, protocol, t_final, dt, n_final_modes, fd_order=lattice.DEFAULT_FD_ORDER,
                    n_condensate=2):
    """Excitation probability of one boson computed without any mode truncation."""
    init = lattice.solve_modes(grid, protocol.initial_potential(grid), 1, fd_order, 1)
    psi = propagate_grid(grid, protocol, init.modes[0], t_final, dt, fd_order)
    final = lattice.solve_modes(grid, protocol.potential_at(grid, t_final), n_final_modes,
                                fd_order, min(n_condensate, n_final_modes))
    amps = final.modes.conj() @ psi * grid.dx
    norm = np.sum(np.abs(psi) ** 2) * grid.dx
    return float((norm - np.sum(np.abs(amps[:n_condensate]) ** 2)) / norm)


def single_particle_excitation(basis, protocol, dt, t_final=None):
    """Mode-space N = 1 run of the protocol; returns the ExcitationReport."""
    t_final = protocol.span if t_final is None else t_final
    sched = HamiltonianSchedule(basis, protocol)
    c = propagate_modes(sched, ground_state_coefficients(basis), t_final, dt)
    rho = np.outer(c.conj(), c)
    final = lattice.solve_modes(basis.grid, protocol.potential_at(basis.grid, t_final),
                                basis.n_modes, basis.fd_order, basis.n_condensate)
    return excitation_probability(rho, final, basis)


def _n_steps(t_final, dt):
    n = int(round(t_final / dt))
    if n < 0 or abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ConfigurationError(f"dt = {dt} does not divide t_final = {t_final}")
    return n
