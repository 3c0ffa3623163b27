"""Spatial grid, trap eigenmodes and Hamiltonian coupling tensors.

Everything is in oscillator units of the initial trap (hbar = m = omega = 1).
The kinetic operator is a central finite-difference Laplacian with hard walls
just outside the grid ends.
"""

from dataclasses import dataclass
import json

import numpy as np
from scipy import linalg

from .errors import ConfigurationError, NumericError

N_CONDENSATE = 2
MIN_POINTS = 16

# central second-derivative stencils, coefficients for offsets 0, 1, 2, ...
_STENCILS = {
    2: (-2.0, 1.0),
    4: (-5.0 / 2, 4.0 / 3, -1.0 / 12),
    6: (-49.0 / 18, 3.0 / 2, -3.0 / 20, 1.0 / 90),
    8: (-205.0 / 72, 8.0 / 5, -1.0 / 5, 8.0 / 315, -1.0 / 560),
}
DEFAULT_FD_ORDER = 8


@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    n_points: int

    @property
    def dx(self):
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def x(self):
        return self.x_min + np.arange(self.n_points) * self.dx

    def to_dict(self):
        return {"x_min": self.x_min, "x_max": self.x_max, "n_points": self.n_points}


def build_grid(x_min, x_max, n_points):
    """Uniform grid ``x_i = x_min + i*dx`` with ``n_points`` points."""
    problems = []
    if not (np.isfinite(x_min) and np.isfinite(x_max)) or not x_max > x_min:
        problems.append(f"x_max ({x_max}) must exceed x_min ({x_min})")
    if int(n_points) != n_points or n_points < MIN_POINTS:
        problems.append(f"n_points ({n_points}) must be an integer >= {MIN_POINTS}")
    if problems:
        raise ConfigurationError("invalid grid", problems)
    return Grid(float(x_min), float(x_max), int(n_points))


@dataclass(frozen=True, eq=False)
class ModeBasis:
    """Orthonormal mode functions sampled on ``grid``.

    ``modes[k, i]`` is phi_k(x_i); the first ``n_condensate`` rows are the
    condensate modes.
    """

    grid: Grid
    modes: np.ndarray
    energies: np.ndarray
    n_condensate: int = N_CONDENSATE
    fd_order: int = DEFAULT_FD_ORDER

    @property
    def n_modes(self):
        return self.modes.shape[0]

    @property
    def condensate(self):
        return range(self.n_condensate)

    @property
    def noncondensate(self):
        return range(self.n_condensate, self.n_modes)

    def overlap(self):
        return self.modes.conj() @ self.modes.T * self.grid.dx

    def orthonormality_residual(self):
        return float(np.max(np.abs(self.overlap() - np.eye(self.n_modes))))

    def values_at(self, r):
        """phi_k(r) for every mode, linearly interpolated between grid points."""
        x = self.grid.x
        if not x[0] <= r <= x[-1]:
            raise ConfigurationError(f"position {r} outside grid [{x[0]}, {x[-1]}]")
        return np.array([np.interp(r, x, m) for m in self.modes])


@dataclass(frozen=True, eq=False)
class CouplingTensors:
    """Mode-space Hamiltonian: h_kl c_k^+ c_l + (1/2) g_klmn c_k^+ c_l^+ c_m c_n.

    ``g4`` is the bare overlap tensor times ``g_strength``; the factor 1/2 is
    applied where the Hamiltonian is expanded.
    """

    h: np.ndarray
    g4: np.ndarray
    g_strength: float

    @property
    def n_modes(self):
        return self.h.shape[0]

    def restrict(self, n):
        return CouplingTensors(self.h[:n, :n].copy(), self.g4[:n, :n, :n, :n].copy(),
                               self.g_strength)


def laplacian_bands(n_points, dx, order=DEFAULT_FD_ORDER):
    """Upper-form bands (for ``eig_banded``) of the hard-wall FD Laplacian."""
    try:
        coeffs = _STENCILS[order]
    except KeyError:
        raise ConfigurationError(f"fd_order must be one of {sorted(_STENCILS)}") from None
    width = len(coeffs) - 1
    bands = np.zeros((width + 1, n_points))
    for off, c in enumerate(coeffs):
        bands[width - off, off:] = c / dx**2
    return bands


def kinetic_matrix(grid, order=DEFAULT_FD_ORDER):
    """Dense -1/2 d^2/dx^2 on the grid."""
    coeffs = _STENCILS[order]
    n = grid.n_points
    t = np.zeros((n, n))
    for off, c in enumerate(coeffs):
        v = -0.5 * c / grid.dx**2
        t += np.diag(np.full(n - off, v), off)
        if off:
            t += np.diag(np.full(n - off, v), -off)
    return t


def apply_kinetic(grid, values, order=DEFAULT_FD_ORDER):
    """-1/2 d^2/dx^2 applied along the last axis with hard-wall boundaries."""
    coeffs = _STENCILS[order]
    values = np.asarray(values)
    out = -0.5 * coeffs[0] * values
    for off, c in enumerate(coeffs[1:], start=1):
        out[..., off:] += -0.5 * c * values[..., :-off]
        out[..., :-off] += -0.5 * c * values[..., off:]
    return out / grid.dx**2


def _fix_sign(phi, dx):
    integral = phi.sum() * dx
    scale = np.abs(phi).sum() * dx
    if abs(integral) > 1e-8 * scale:
        return phi if integral > 0 else -phi
    # odd under parity: make the lobe nearest x_min positive
    first = np.argmax(np.abs(phi) > 0.1 * np.abs(phi).max())
    return phi if phi[first] > 0 else -phi


def solve_modes(grid, potential, n_modes, fd_order=DEFAULT_FD_ORDER,
                n_condensate=N_CONDENSATE):
    """Lowest ``n_modes`` eigenmodes of -1/2 d^2/dx^2 + V on ``grid``."""
    potential = np.asarray(potential, dtype=float)
    if potential.shape != (grid.n_points,):
        raise ConfigurationError(
            f"potential has shape {potential.shape}, grid needs ({grid.n_points},)")
    if n_modes < n_condensate:
        raise ConfigurationError(f"n_modes ({n_modes}) must be >= {n_condensate}")
    if n_modes > grid.n_points // 4:
        raise ConfigurationError(
            f"n_modes ({n_modes}) exceeds resolution guard n_points/4 = {grid.n_points // 4}")
    bands = -0.5 * laplacian_bands(grid.n_points, grid.dx, fd_order)
    bands[-1] += potential
    try:
        energies, vecs = linalg.eig_banded(bands, lower=False, select="i",
                                           select_range=(0, n_modes - 1))
    except linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    modes = vecs.T / np.sqrt(grid.dx)
    modes = np.array([_fix_sign(m, grid.dx) for m in modes])
    return ModeBasis(grid, modes, energies, n_condensate, fd_order)


def potential_matrix(basis, potential):
    m = basis.modes
    return (m.conj() * np.asarray(potential)) @ m.T * basis.grid.dx


def single_particle_matrix(basis, potential):
    """h_kl = sum_i phi_k* (T + V) phi_l dx with the basis' own FD stencil."""
    m = basis.modes
    t = m.conj() @ apply_kinetic(basis.grid, m, basis.fd_order).T * basis.grid.dx
    h = t + potential_matrix(basis, potential)
    return 0.5 * (h + h.conj().T)


def overlap_tensor(basis):
    """sum_i phi_k* phi_l* phi_m phi_n dx."""
    m = basis.modes
    return np.einsum("ki,li,mi,ni->klmn", m.conj(), m.conj(), m, m,
                     optimize=True) * basis.grid.dx


def compute_tensors(basis, potential, g_strength):
    if not np.isfinite(g_strength):
        raise ConfigurationError(f"g_strength must be finite, got {g_strength}")
    h = single_particle_matrix(basis, potential).astype(complex)
    g4 = g_strength * overlap_tensor(basis).astype(complex)
    return CouplingTensors(h, g4, float(g_strength))


def assemble_field(basis, point, sector):
    """Field on the grid built from one block of a phase point.

    ``sector`` is one of ``"C"``, ``"NC"``, ``"C+"``, ``"NC+"``; ``point`` is a
    PhasePoint or a length ``2*n_modes`` amplitude vector ordered
    (a_1..a_n, a_1^+..a_n^+).
    """
    alpha = np.asarray(getattr(point, "alpha", point))
    n = basis.n_modes
    if alpha.shape[-1] != 2 * n:
        raise ConfigurationError(
            f"phase point has {alpha.shape[-1]} amplitudes, basis needs {2 * n}")
    try:
        idx, plus = sector_indices(basis, sector)
    except KeyError:
        raise ConfigurationError(f"unknown sector {sector!r}") from None
    amps = alpha[..., n:] if plus else alpha[..., :n]
    phi = basis.modes.conj() if plus else basis.modes
    idx = list(idx)
    return amps[..., idx] @ phi[idx]


def sector_indices(basis, sector):
    return {
        "C": (basis.condensate, False),
        "NC": (basis.noncondensate, False),
        "C+": (basis.condensate, True),
        "NC+": (basis.noncondensate, True),
    }[sector]


def dump_basis(basis, tensors=None):
    """JSON-ready debug dump; g4 is flattened in (k, l, m, n) order."""
    out = {
        "grid": basis.grid.to_dict(),
        "n_modes": basis.n_modes,
        "n_condensate": basis.n_condensate,
        "fd_order": basis.fd_order,
        "energies": basis.energies.tolist(),
        "modes": np.real(basis.modes).tolist(),
    }
    if tensors is not None:
        out["g_strength"] = tensors.g_strength
        out["h"] = {"re": tensors.h.real.tolist(), "im": tensors.h.imag.tolist()}
        flat = tensors.g4.reshape(-1)
        out["g4"] = {"shape": list(tensors.g4.shape), "order": "klmn",
                     "re": flat.real.tolist(), "im": flat.imag.tolist()}
    return out


def write_basis_dump(path, basis, tensors=None):
    with open(path, "w") as fh:
        json.dump(dump_basis(basis, tensors), fh, indent=1)
