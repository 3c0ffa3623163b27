"""Initial sampling, counter-based noise and Euler-Maruyama integration.

Every random number is a pure function of (trajectory seed, purpose, step):
noise for step ``j`` of a trajectory comes from a Philox block counter that
depends only on ``j``, so trajectories can be run in any batch, in any order
and on any worker and still see identical noise.
"""

from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import ConfigurationError

# Philox counter regions (high 64-bit word of the 256-bit counter)
_NOISE_REGION = 0
_INITIAL_REGION = 1
DIVERGENCE_FACTOR = 1e6


@dataclass
class PhasePoint:
    """Amplitudes ordered (a_1..a_n, a_1^+..a_n^+) at time ``t``."""

    alpha: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=complex)
        if not np.all(np.isfinite(self.alpha)):
            raise ValueError("phase point has non-finite amplitudes")

    @property
    def n_modes(self):
        return self.alpha.shape[-1] // 2

    @property
    def a(self):
        return self.alpha[: self.n_modes]

    @property
    def a_plus(self):
        return self.alpha[self.n_modes:]


@dataclass(frozen=True)
class InitialState:
    """Coherent amplitudes of the condensate modes; everything else is vacuum."""

    condensate: tuple = (0.0, 0.0)
    wigner_width: float = 0.5

    def amplitudes(self, n_modes):
        out = np.zeros(n_modes, dtype=complex)
        out[: len(self.condensate)] = self.condensate
        return out

    @property
    def mean_number(self):
        return float(sum(abs(a) ** 2 for a in self.condensate))


@dataclass
class NoiseSlice:
    values: np.ndarray
    dt: float


@dataclass
class TrajectoryResult:
    samples: list
    status: str
    seed: int
    diverged_step: int = -1
    times: np.ndarray = field(default=None, repr=False)

    @property
    def completed(self):
        return self.status == "completed"


@dataclass(frozen=True)
class Schedule:
    dt: float
    observation_times: tuple

    @property
    def t_final(self):
        return max(self.observation_times)

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))

    def observation_steps(self):
        steps = []
        for t in self.observation_times:
            j = int(round(t / self.dt))
            if abs(j * self.dt - t) > 1e-9:
                raise ConfigurationError(f"observation time {t} is not a multiple of dt = {self.dt}")
            steps.append(j)
        return np.asarray(steps)

    def validate(self, span=None):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.observation_times:
            raise ConfigurationError("at least one observation time is required")
        if min(self.observation_times) < 0:
            raise ConfigurationError("observation times must be >= 0")
        if list(self.observation_times) != sorted(self.observation_times):
            raise ConfigurationError("observation times must be increasing")
        if span is not None and self.t_final > span + 1e-9:
            raise ConfigurationError(
                f"last observation time {self.t_final} exceeds protocol span {span}")
        self.observation_steps()
        return self


# --------------------------------------------------------------------------
# random numbers

def _blocks_per_step(n_channels):
    return (n_channels + (n_channels % 2) + 3) // 4


def _box_muller(words, n):
    u = (words >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    u1 = 1.0 - u[..., 0::2]
    u2 = u[..., 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(u.shape, dtype=np.float64)
    z[..., 0::2] = r * np.cos(2.0 * np.pi * u2)
    z[..., 1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[..., :n]


def _philox(seed, region, block):
    return np.random.Philox(key=int(seed), counter=(region << 192) + int(block))


def standard_normals(seed, region, first_block, n_per_row, n_rows):
    """``n_rows`` rows of ``n_per_row`` N(0,1) variates from consecutive counters."""
    bps = _blocks_per_step(n_per_row)
    words = _philox(seed, region, first_block).random_raw(n_rows * bps * 4)
    return _box_muller(words.reshape(n_rows, bps * 4), n_per_row)


def generate_noise(n_channels, dt, seed, step_index):
    """Real Gaussian channels with mean 0 and variance 1/dt for one step."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    z = standard_normals(seed, _NOISE_REGION, step_index * _blocks_per_step(n_channels),
                         n_channels, 1)[0]
    return NoiseSlice(z / np.sqrt(dt), dt)


def noise_block(seeds, n_channels, dt, first_step, n_steps):
    """Noise for ``n_steps`` steps of every seed: shape (n_steps, len(seeds), n_channels)."""
    out = np.empty((n_steps, len(seeds), n_channels))
    first = first_step * _blocks_per_step(n_channels)
    for i, s in enumerate(seeds):
        out[:, i, :] = standard_normals(s, _NOISE_REGION, first, n_channels, n_steps)
    return out / np.sqrt(dt)


def sample_initial(spec, rng, n_modes, n_condensate=2):
    """One phase point: Wigner coherent state in the condensate, P+ vacuum elsewhere.

    ``rng`` is a numpy Generator or an integer trajectory seed.
    """
    if isinstance(rng, (int, np.integer)):
        z = standard_normals(int(rng), _INITIAL_REGION, 0, 2 * n_condensate, 1)[0]
    else:
        z = rng.standard_normal(2 * n_condensate)
    return PhasePoint(_initial_from_normals(spec, z[None, :], n_modes, n_condensate)[0])


def sample_initial_batch(spec, seeds, n_modes, n_condensate=2):
    z = np.array([standard_normals(int(s), _INITIAL_REGION, 0, 2 * n_condensate, 1)[0]
                  for s in seeds]).reshape(len(seeds), 2 * n_condensate)
    return _initial_from_normals(spec, z, n_modes, n_condensate)


def _initial_from_normals(spec, z, n_modes, n_condensate):
    width = np.sqrt(spec.wigner_width / 2.0)
    eta = width * (z[:, 0::2] + 1j * z[:, 1::2])
    x = np.zeros((z.shape[0], 2 * n_modes), dtype=complex)
    a0 = spec.amplitudes(n_modes)[:n_condensate]
    x[:, :n_condensate] = a0 + eta
    x[:, n_modes:n_modes + n_condensate] = np.conj(x[:, :n_condensate])
    return x


# --------------------------------------------------------------------------
# integration

class StepSystem:
    """What one Euler step needs at time t: the linear drift matrix built from
    h(t) and the factor of the constant (h-dependent) part of the diffusion."""

    def __init__(self, family, layout, h_of_t, sampling="start", static=False):
        self.family = family
        self.layout = layout
        self.h_of_t = h_of_t
        self.sampling = sampling
        self.static = static
        self._last = (None, None)

    def at(self, t):
        key = 0.0 if self.static else float(t)
        if self._last[0] != key:
            h = self.h_of_t(t)
            lin = self.family.linear_matrix(h)
            cfac = self.layout.constant_factor(self.family.constant_diffusion(h))
            self._last = (key, (lin, cfac))
        return self._last[1]


def step_ito(point, system, dt, noise, t=None):
    """One Euler-Maruyama step for a PhasePoint (or a batch array).

    ``system`` is a StepSystem; ``noise`` a NoiseSlice or array of channel
    values (variance 1/dt), so dW = noise * dt.
    """
    x = np.asarray(getattr(point, "alpha", point), dtype=complex)
    t = getattr(point, "t", 0.0) if t is None else t
    batch = np.atleast_2d(x)
    values = getattr(noise, "values", noise)
    dw = None if values is None else np.atleast_2d(values) * dt
    new = euler_step(batch, system, dt, t, dw)
    new = new[0] if x.ndim == 1 else new
    if isinstance(point, PhasePoint):
        return PhasePoint(new, t + dt) if np.all(np.isfinite(new)) else new
    return new


def euler_step(x, system, dt, t, dw):
    lin, cfac = system.at(t)
    out = x + dt * system.family.drift(x, lin)
    if not system.layout.deterministic and dw is not None:
        dmat = system.family.diffusion(x) if system.layout.takagi else None
        out = out + system.layout.increment(x, dmat, dw, cfac)
    return out


def evolve_batch(x0, system, schedule, seeds, divergence_factor=DIVERGENCE_FACTOR,
                 chunk=256):
    """Integrate a batch of trajectories.

    Returns ``(samples, diverged_step)``: samples has shape
    (batch, n_observations, n_vars) with NaN after divergence, and
    diverged_step is -1 for completed trajectories.
    """
    x = np.array(x0, dtype=complex)
    n_traj = x.shape[0]
    obs_steps = schedule.observation_steps()
    n_steps = schedule.n_steps
    dt = schedule.dt
    samples = np.full((n_traj, len(obs_steps), x.shape[1]), np.nan + 0j)
    diverged = np.full(n_traj, -1, dtype=np.int64)
    cap = divergence_factor * np.maximum(np.sum(np.abs(x) ** 2, axis=1), 1.0)
    alive = np.ones(n_traj, dtype=bool)
    n_ch = system.layout.n_channels
    noise = None
    shift = 0.5 if system.sampling == "midpoint" else 0.0
    for k, j in enumerate(obs_steps):
        if j == 0:
            samples[:, k] = x
    for step in range(n_steps):
        if n_ch and step % chunk == 0:
            noise = noise_block(seeds, n_ch, dt, step, min(chunk, n_steps - step))
        dw = None if not n_ch else noise[step % chunk] * dt
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        xa = x[idx]
        with np.errstate(all="ignore"):
            new = euler_step(xa, system, dt, (step + shift) * dt,
                             None if dw is None else dw[idx])
            norm = np.sum(np.abs(new) ** 2, axis=1)
        bad = ~np.isfinite(norm) | (norm > cap[idx])
        if np.any(bad):
            diverged[idx[bad]] = step
            alive[idx[bad]] = False
            new[bad] = 0.0
        x[idx] = new
        hits = np.nonzero(obs_steps == step + 1)[0]
        for k in hits:
            samples[alive, k] = x[alive]
    return samples, diverged


def evolve_trajectory(initial, system, schedule, seed, divergence_factor=DIVERGENCE_FACTOR):
    x0 = np.asarray(getattr(initial, "alpha", initial), dtype=complex)[None, :]
    samples, diverged = evolve_batch(x0, system, schedule, [seed], divergence_factor)
    step = int(diverged[0])
    status = "completed" if step < 0 else "diverged"
    times = np.asarray(schedule.observation_times)
    pts = [PhasePoint(samples[0, k], t) for k, t in enumerate(times)
           if np.all(np.isfinite(samples[0, k]))]
    return TrajectoryResult(pts, status, int(seed), step, times)


def trajectory_seed(master_seed, index):
    """Per-trajectory key from a SeedSequence spawn key: independent of workers."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    lo, hi = ss.generate_state(2, dtype=np.uint64)
    return int(lo) | (int(hi) << 64)


# --------------------------------------------------------------------------
# binary trajectory dump

DUMP_MAGIC = b"BECPTRAJ"
DUMP_VERSION = 1
_HEADER = struct.Struct("<8sIIIqQ")
_U64 = 2**64 - 1


def write_trajectory_dump(path, times, samples, seeds, diverged, tag=0):
    """Versioned little-endian dump: header, times, then per trajectory the
    seed, divergence step and complex amplitudes (observation-time major).
    ``tag`` is a 64-bit provenance word stored in the header (the config hash)."""
    samples = np.asarray(samples, dtype="<c16")
    n_traj, n_obs, n_vars = samples.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, n_obs, n_vars, n_traj, int(tag)))
        fh.write(np.asarray(times, dtype="<f8").tobytes())
        for i in range(n_traj):
            seed = int(seeds[i])
            fh.write(struct.pack("<QQq", seed & _U64, seed >> 64, int(diverged[i])))
            fh.write(samples[i].tobytes())


def read_trajectory_dump(path, with_tag=False):
    with open(path, "rb") as fh:
        magic, version, n_obs, n_vars, n_traj, tag = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != DUMP_MAGIC:
            raise ValueError(f"{path} is not a trajectory dump")
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported trajectory dump version {version}")
        times = np.frombuffer(fh.read(8 * n_obs), dtype="<f8")
        seeds, diverged, samples = [], [], []
        for _ in range(n_traj):
            lo, hi, d = struct.unpack("<QQq", fh.read(24))
            seeds.append(lo | (hi << 64))
            diverged.append(d)
            samples.append(np.frombuffer(fh.read(16 * n_obs * n_vars), dtype="<c16")
                           .reshape(n_obs, n_vars))
    out = times, np.array(samples), seeds, np.array(diverged)
    return out + (tag,) if with_tag else out
