"""Run configuration, ensemble orchestration, oracle comparison and output."""

from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict
import copy
import csv
import hashlib
import json
import os
import time

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import compiled, correlators, ffpe, fock, lattice, scenario, stochastic
from .errors import ConfigurationError, DivergenceError

DEFAULTS = {
    "name": "run",
    "grid": {"x_min": -8.0, "x_max": 8.0, "n_points": 257},
    "n_modes": 12,
    "fd_order": lattice.DEFAULT_FD_ORDER,
    "g_strength": 0.0,
    "protocol": None,
    "initial_state": {"condensate": [0.0, 0.0]},
    "dt": 1e-3,
    "observation_times": None,
    "n_trajectories": 1000,
    "seed": 0,
    "workers": 1,
    "block_size": 250,
    "deterministic_merge": True,
    "divergence_factor": stochastic.DIVERGENCE_FACTOR,
    "divergence_threshold": 0.5,
    "energy_reference": "center",
    "observables": {},
    "oracle": {},
    "flags": {},
    "output": "output",
}
OBSERVABLE_KEYS = {"g1_diagonal", "g1_pairs", "g2_pairs", "one_body", "occupations",
                   "imbalance", "visibility_window", "excitation", "monomials", "figures"}
ORACLE_KEYS = {"n_max", "dt"}
ENERGY_REFERENCES = ("center", "ground", "none")
FLAG_KEYS = {"run_oracle", "dump_derivation", "dump_trajectories"}
# keys that do not change any numeric result
_HASH_EXCLUDED = ("output", "workers", "deterministic_merge", "flags")


@dataclass
class RunConfig:
    name: str
    grid: lattice.Grid
    n_modes: int
    fd_order: int
    g_strength: float
    protocol: scenario.PotentialProtocol
    initial_state: stochastic.InitialState
    dt: float
    observation_times: tuple
    n_trajectories: int
    seed: int
    workers: int
    block_size: int
    deterministic_merge: bool
    divergence_factor: float
    divergence_threshold: float
    energy_reference: str
    observables: dict
    oracle: dict
    flags: dict
    output: str
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def schedule(self):
        return stochastic.Schedule(self.dt, self.observation_times)

    def hash(self):
        payload = {k: v for k, v in self.raw.items() if k not in _HASH_EXCLUDED}
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, **kw):
        raw = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if v is not None:
                raw[k] = v
        return build_config(raw)


def _complex(v, where, errors):
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return complex(float(v[0]), float(v[1]))
    try:
        return complex(v)
    except (TypeError, ValueError):
        errors.append(f"{where}: cannot read {v!r} as a complex amplitude")
        return 0j


def _times(spec, errors):
    if spec is None:
        errors.append("observation_times is required")
        return (0.0,)
    if isinstance(spec, dict):
        unknown = set(spec) - {"start", "stop", "step"}
        if unknown:
            errors.append(f"observation_times: unknown keys {sorted(unknown)}")
        try:
            start, stop, step = float(spec.get("start", 0.0)), float(spec["stop"]), float(spec["step"])
        except (KeyError, TypeError, ValueError):
            errors.append("observation_times needs numeric stop and step")
            return (0.0,)
        if step <= 0:
            errors.append("observation_times.step must be positive")
            return (0.0,)
        n = int(round((stop - start) / step))
        return tuple(round(start + i * step, 12) for i in range(n + 1))
    try:
        return tuple(float(t) for t in spec)
    except (TypeError, ValueError):
        errors.append("observation_times must be a list of numbers or {start, stop, step}")
        return (0.0,)


def build_config(raw):
    """Validate a config mapping; every violation is reported at once."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    errors = []
    unknown = sorted(set(raw) - set(DEFAULTS))
    for k in unknown:
        errors.append(f"unknown key {k!r}")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update({k: copy.deepcopy(v) for k, v in raw.items() if k in DEFAULTS})

    grid = None
    gspec = cfg["grid"] if isinstance(cfg["grid"], dict) else {}
    extra = set(gspec) - {"x_min", "x_max", "n_points"}
    if extra:
        errors.append(f"grid: unknown keys {sorted(extra)}")
    try:
        grid = lattice.build_grid(float(gspec.get("x_min", -8.0)), float(gspec.get("x_max", 8.0)),
                                  int(gspec.get("n_points", 257)))
    except (ConfigurationError, TypeError, ValueError) as exc:
        errors.append(f"grid: {exc}")

    def positive_int(key):
        try:
            v = int(cfg[key])
        except (TypeError, ValueError):
            errors.append(f"{key} must be an integer")
            return 1
        if v <= 0:
            errors.append(f"{key} must be > 0, got {v}")
        return v

    n_modes = positive_int("n_modes")
    if n_modes < lattice.N_CONDENSATE:
        errors.append(f"n_modes must be >= {lattice.N_CONDENSATE}")
    n_traj = positive_int("n_trajectories")
    workers = positive_int("workers")
    block = positive_int("block_size")
    try:
        dt = float(cfg["dt"])
        if not dt > 0:
            errors.append("dt must be > 0")
    except (TypeError, ValueError):
        errors.append("dt must be a number")
        dt = 1e-3
    try:
        g_strength = float(cfg["g_strength"])
        if not np.isfinite(g_strength):
            errors.append("g_strength must be finite")
    except (TypeError, ValueError):
        errors.append("g_strength must be a number")
        g_strength = 0.0
    if cfg["fd_order"] not in lattice._STENCILS:
        errors.append(f"fd_order must be one of {sorted(lattice._STENCILS)}")
    if cfg["energy_reference"] not in ENERGY_REFERENCES:
        errors.append(f"energy_reference must be one of {ENERGY_REFERENCES}")
    try:
        div_factor = float(cfg["divergence_factor"])
        if div_factor < 0:
            errors.append("divergence_factor must be >= 0")
    except (TypeError, ValueError):
        errors.append("divergence_factor must be a number")
        div_factor = 1.0

    times = _times(cfg["observation_times"], errors)
    protocol = None
    pspec = cfg["protocol"]
    try:
        if pspec is None:
            pspec = {"stages": [{"duration": max(max(times), 1e-9)}]}
        protocol = scenario.PotentialProtocol.from_dict(pspec)
        if not protocol.stages:
            protocol = scenario.static_protocol(protocol.initial, max(max(times), 1e-9),
                                                protocol.sigma)
    except ConfigurationError as exc:
        errors.append(f"protocol: {exc}")
    except (TypeError, ValueError, AttributeError) as exc:
        errors.append(f"protocol: malformed ({exc})")

    ispec = cfg["initial_state"] if isinstance(cfg["initial_state"], dict) else {}
    extra = set(ispec) - {"condensate"}
    if extra:
        errors.append(f"initial_state: unknown keys {sorted(extra)}")
    cond = ispec.get("condensate", [0.0, 0.0])
    if not isinstance(cond, (list, tuple)) or len(cond) != lattice.N_CONDENSATE:
        errors.append(f"initial_state.condensate needs {lattice.N_CONDENSATE} amplitudes")
        cond = [0.0, 0.0]
    init = stochastic.InitialState(tuple(_complex(v, "initial_state.condensate", errors)
                                         for v in cond))

    for key, allowed in (("observables", OBSERVABLE_KEYS), ("oracle", ORACLE_KEYS),
                         ("flags", FLAG_KEYS)):
        if not isinstance(cfg[key], dict):
            errors.append(f"{key} must be a mapping")
            cfg[key] = {}
        bad = sorted(set(cfg[key]) - allowed)
        if bad:
            errors.append(f"{key}: unknown keys {bad}")

    if not errors and protocol is not None:
        try:
            stochastic.Schedule(dt, times).validate(protocol.span)
        except ConfigurationError as exc:
            errors.append(str(exc))
        if grid is not None and n_modes > grid.n_points // 4:
            errors.append(f"n_modes = {n_modes} exceeds the resolution guard n_points/4")
    if errors:
        raise ConfigurationError("invalid configuration", errors)
    return RunConfig(
        name=str(cfg["name"]), grid=grid, n_modes=n_modes, fd_order=int(cfg["fd_order"]),
        g_strength=g_strength, protocol=protocol, initial_state=init, dt=dt,
        observation_times=times, n_trajectories=n_traj, seed=int(cfg["seed"]),
        workers=workers, block_size=block, deterministic_merge=bool(cfg["deterministic_merge"]),
        divergence_factor=div_factor, divergence_threshold=float(cfg["divergence_threshold"]),
        energy_reference=cfg["energy_reference"], observables=dict(cfg["observables"]),
        oracle=dict(cfg["oracle"]), flags=dict(cfg["flags"]), output=str(cfg["output"]),
        raw=cfg)


def parse_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    return build_config(raw or {})


# --------------------------------------------------------------------------
# physics setup shared by run / compare / derive / modes

@dataclass
class Setup:
    config: RunConfig
    basis: lattice.ModeBasis
    tensors: lattice.CouplingTensors
    schedule: scenario.HamiltonianSchedule
    family: compiled.SdeFamily = None
    layout: compiled.NoiseLayout = None


def build_setup(config, with_family=True):
    v0 = config.protocol.initial_potential(config.grid)
    basis = lattice.solve_modes(config.grid, v0, config.n_modes, config.fd_order)
    tensors = lattice.compute_tensors(basis, v0, config.g_strength)
    sched = scenario.HamiltonianSchedule(basis, config.protocol)
    if config.energy_reference == "ground":
        sched.offset = float(basis.energies[0])
    elif config.energy_reference == "center":
        sched.offset = "center"
    setup = Setup(config, basis, tensors, sched)
    if with_family:
        family = compiled.SdeFamily(tensors.g4, ffpe.default_sector_map(config.n_modes))
        setup.family = family
        setup.layout = family.layout(_h_samples(setup))
    return setup


def _h_samples(setup, max_samples=400):
    cfg = setup.config
    n_steps = cfg.schedule.n_steps
    if setup.schedule.is_static() or n_steps == 0:
        return [setup.schedule.h(0.0)]
    steps = np.unique(np.linspace(0, n_steps - 1, min(n_steps, max_samples)).astype(int))
    return [setup.schedule.h(j * cfg.dt) for j in steps]


def step_system(setup):
    return stochastic.StepSystem(setup.family, setup.layout, setup.schedule.h, "start",
                                 setup.schedule.is_static())


def factorization_residual(setup, n_points=100, seed=0, relative=True):
    """max |d d^T - D| over random phase points and sampled h(t), divided by
    max(1, max |D|) unless ``relative`` is off."""
    pts = ffpe.random_phase_points(setup.config.n_modes, n_points, seed)
    worst = 0.0
    for h in _h_samples(setup, 8):
        dconst = setup.family.constant_diffusion(h)
        dmat = setup.family.diffusion(pts, dconst)
        cfac = setup.layout.constant_factor(dconst)
        d = setup.layout.factor(pts, setup.family.diffusion(pts), cfac)
        res = np.einsum("bij,bkj->bik", d, d) - dmat
        scale = max(1.0, float(np.max(np.abs(dmat)))) if relative else 1.0
        worst = max(worst, float(np.max(np.abs(res))) / scale if res.size else 0.0)
    return worst


# --------------------------------------------------------------------------
# ensemble

def channels_for(config, basis):
    obs = config.observables
    out = [correlators.MonomialChannel(correlators.parse_monomial(m, config.n_modes), config.n_modes)
           for m in obs.get("monomials", [])]
    out += correlators.g2_channels(basis, obs.get("g2_pairs", []))
    return out


_WORKER = {}


def _init_worker(setup, channels):
    _WORKER["setup"] = setup
    _WORKER["channels"] = channels
    _WORKER["system"] = step_system(setup)


def _run_block(start, stop):
    """Trajectories [start, stop): returns the block accumulator (and raw samples
    when trajectory dumps are requested)."""
    setup, channels, system = _WORKER["setup"], _WORKER["channels"], _WORKER["system"]
    cfg = setup.config
    seeds = [stochastic.trajectory_seed(cfg.seed, i) for i in range(start, stop)]
    with threadpool_limits(1):
        x0 = stochastic.sample_initial_batch(cfg.initial_state, seeds, cfg.n_modes)
        samples, diverged = stochastic.evolve_batch(x0, system, cfg.schedule, seeds,
                                                    cfg.divergence_factor)
        acc = correlators.EnsembleAccumulator(
            cfg.n_modes, cfg.observation_times, track_covariance=cfg.n_modes <= 16,
            channel_names=tuple(c.name for c in channels))
        acc = correlators.accumulate_batch(acc, samples, diverged, channels)
        conj = _conjugacy(samples, cfg.n_modes)
    keep = cfg.flags.get("dump_trajectories", False)
    return start, acc, conj, (seeds, samples, diverged) if keep else None


def _conjugacy(samples, n):
    """max_k |a_k^+ - conj(a_k)| over the condensate modes, per observation time."""
    with np.errstate(invalid="ignore"):
        dev = np.abs(samples[..., n:n + 2] - np.conj(samples[..., :2]))
    dev = np.where(np.isfinite(dev), dev, 0.0)
    return dev.max(axis=(0, 2)) if dev.size else np.zeros(samples.shape[1])


def blocks(n_trajectories, block_size):
    return [(i, min(i + block_size, n_trajectories)) for i in range(0, n_trajectories, block_size)]


def run_trajectories(setup, channels, workers=None):
    """Accumulated ensemble; block decomposition and merge order are fixed by
    the config, so the result does not depend on the worker count."""
    cfg = setup.config
    workers = cfg.workers if workers is None else workers
    parts = blocks(cfg.n_trajectories, cfg.block_size)
    results = []
    if workers == 1:
        _init_worker(setup, channels)
        results = [_run_block(a, b) for a, b in parts]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(setup, channels)) as pool:
            futs = [pool.submit(_run_block, a, b) for a, b in parts]
            results = [f.result() for f in as_completed(futs)]
        if cfg.deterministic_merge:
            results.sort(key=lambda r: r[0])
    acc = None
    conj = np.zeros(len(cfg.observation_times))
    dumps = []
    for _, part, c, dump in results:
        acc = part if acc is None else acc.merge(part)
        conj = np.maximum(conj, c)
        if dump is not None:
            dumps.append(dump)
    return acc, conj, dumps


@dataclass
class RunReport:
    config_hash: str
    derivation_hash: str
    files: list
    n_trajectories: int
    n_used: int
    diverged: int
    timings: dict
    results: dict = field(default_factory=dict)
    comparison: list = None
    status: str = "complete"
    exit_code: int = 0

    @property
    def diverged_fraction(self):
        return self.diverged / max(self.n_trajectories, 1)

    def to_dict(self):
        out = asdict(self)
        out["diverged_fraction"] = self.diverged_fraction
        return out


def _provenance(config, derivation_hash):
    return {"config_hash": config.hash(), "derivation_hash": derivation_hash,
            "name": config.name, "seed": config.seed, "n_trajectories": config.n_trajectories}


def derivation_hash(setup):
    """Digest of the interaction derivation plus the unit quadratic tables."""
    h = hashlib.sha256(setup.family.interaction.digest().encode())
    h.update(np.ascontiguousarray(setup.family.lin).tobytes())
    h.update(np.ascontiguousarray(setup.family.dconst).tobytes())
    return h.hexdigest()[:16]


def ensemble_results(config, setup, acc):
    """CorrelationResults per observable kind (lists over observation times)."""
    obs = config.observables
    basis = setup.basis
    out = {}
    if acc is None or acc.count == 0:
        return out
    times = config.observation_times
    if obs.get("g1_diagonal", True):
        x = basis.grid.x
        out["g1_diagonal"] = [correlators.g1(acc, basis, x, x, t) for t in times]
    if obs.get("g1_pairs"):
        r = [p[0] for p in obs["g1_pairs"]]
        s = [p[1] for p in obs["g1_pairs"]]
        out["g1_pairs"] = [correlators.g1(acc, basis, r, s, t) for t in times]
    if obs.get("g2_pairs"):
        r1 = [p[0] for p in obs["g2_pairs"]]
        r2 = [p[1] for p in obs["g2_pairs"]]
        out["g2"] = [correlators.g2(acc, basis, r1, r2, t) for t in times]
    if obs.get("one_body", True):
        out["one_body"] = [correlators.one_body_result(acc, t) for t in times]
    if obs.get("occupations", True):
        res = []
        for t in times:
            occ, se = correlators.occupations(acc, t)
            res.append(correlators.CorrelationResult(
                "occupations", [(k,) for k in range(config.n_modes)], occ.astype(complex), se,
                "normal-corrected", acc.count, acc.diverged, t))
        out["occupations"] = res
    if obs.get("imbalance", False):
        vals = [correlators.population_imbalance(acc, basis, t) for t in times]
        out["imbalance"] = [correlators.CorrelationResult(
            "imbalance", [(t,) for t in times], np.array([v for v, _ in vals], dtype=complex),
            np.array([e for _, e in vals]), "normal-corrected", acc.count, acc.diverged,
            times[-1])]
    for name in acc.channel_names:
        if name.startswith("m:"):
            out.setdefault("monomials", []).extend(
                correlators.CorrelationResult(
                    "monomial", [(name[2:],)], np.array([acc.channel_mean(name, t)]),
                    np.array([acc.channel_se(name, t)]), "raw", acc.count, acc.diverged, t)
                for t in times)
    return out


def scalar_summaries(config, setup, acc, results):
    """Visibility and final-trap excitation at the last observation time."""
    out = {}
    if acc is None or acc.count == 0:
        return out
    obs = config.observables
    t_last = config.observation_times[-1]
    if obs.get("visibility_window") and "g1_diagonal" in results:
        try:
            v, e = correlators.visibility(results["g1_diagonal"][-1], obs["visibility_window"])
            out["visibility"] = {"value": v, "se": e, "t": t_last}
        except correlators.UndefinedVisibilityError as exc:
            out["visibility"] = {"error": str(exc)}
    if obs.get("excitation", False):
        grid = setup.basis.grid
        final = lattice.solve_modes(grid, config.protocol.potential_at(grid, t_last),
                                    config.n_modes, config.fd_order)
        rho, _ = correlators.one_body_density_matrix(acc, t_last)
        u = scenario.basis_overlap(final, setup.basis)
        completeness = float(np.min(np.sum(np.abs(u) ** 2, axis=1)))
        try:
            rep = scenario.excitation_probability(
                rho, final, setup.basis, lambda w: acc.linear_se(w, t_last, "re"))
            out["excitation"] = {**rep.to_dict(), "completeness_min": completeness}
        except ConfigurationError as exc:
            out["excitation"] = {"error": str(exc), "completeness_min": completeness}
    return out


def _write_results(outdir, results, provenance):
    files = []
    for kind, res in results.items():
        path = os.path.join(outdir, f"{kind}.csv")
        correlators.write_results_csv(path, res, provenance)
        files.append(os.path.basename(path))
    return files


def run_ensemble(config, workers=None, with_figures=True):
    """Full stochastic pipeline.  Writes results into ``config.output``."""
    timings = {}
    t0 = time.perf_counter()
    setup = build_setup(config)
    timings["derive"] = time.perf_counter() - t0
    dhash = derivation_hash(setup)
    outdir = config.output
    os.makedirs(outdir, exist_ok=True)
    files = []
    if config.flags.get("dump_derivation", False):
        sym = setup.family.symbolic(setup.schedule.h(0.0), probe_points=())
        path = os.path.join(outdir, "derivation.json")
        with open(path, "w") as fh:
            json.dump({**sym.to_dict(), "config_hash": config.hash()}, fh, indent=1,
                      sort_keys=True)
        files.append("derivation.json")

    channels = channels_for(config, setup.basis)
    t0 = time.perf_counter()
    acc, conj, dumps = run_trajectories(setup, channels, workers)
    timings["trajectories"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    results = ensemble_results(config, setup, acc)
    summaries = scalar_summaries(config, setup, acc, results)
    prov = _provenance(config, dhash)
    if acc.count == 0:
        # keep the file layout stable: header-only CSVs
        for kind in ("g1_diagonal", "one_body", "occupations"):
            with open(os.path.join(outdir, f"{kind}.csv"), "w") as fh:
                fh.write(correlators.provenance_comment(prov))
                fh.write("t,re,im,se,n_used,diverged_excluded\n")
            files.append(f"{kind}.csv")
    else:
        files += _write_results(outdir, results, prov)
    payload = {**prov, "n_used": acc.count, "diverged": acc.diverged,
               "observation_times": list(config.observation_times),
               "conjugacy_deviation": conj.tolist(),
               "factorization_residual": factorization_residual(setup),
               "summaries": summaries,
               "results": {k: [r.to_dict() for r in v] for k, v in results.items()}}
    with open(os.path.join(outdir, "results.json"), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    files.append("results.json")
    if dumps:
        seeds = [s for d in dumps for s in d[0]]
        samples = np.concatenate([d[1] for d in dumps])
        diverged = np.concatenate([d[2] for d in dumps])
        stochastic.write_trajectory_dump(os.path.join(outdir, "trajectories.bin"),
                                         config.observation_times, samples, seeds, diverged,
                                         tag=int(prov["config_hash"], 16))
        files.append("trajectories.bin")
    if with_figures and acc.count and config.observables.get("figures", True):
        from . import plotting
        files += plotting.ensemble_figures(outdir, config, setup, results, prov["config_hash"])
    timings["output"] = time.perf_counter() - t0

    report = RunReport(prov["config_hash"], dhash, files, config.n_trajectories, acc.count,
                       acc.diverged, timings, summaries)
    if report.diverged_fraction > config.divergence_threshold:
        report.status = "divergence-dominated"
        report.exit_code = DivergenceError.exit_code
    _write_report(outdir, report)
    return report, setup, acc


def _write_report(outdir, report):
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True, default=float)


# --------------------------------------------------------------------------
# oracle

def check_oracle_caps(config):
    if config.n_modes > fock.MAX_MODES:
        raise ConfigurationError(
            f"oracle supports at most {fock.MAX_MODES} modes, config has {config.n_modes}")
    n_max = config.oracle.get("n_max") or fock.coherent_cap(config.initial_state.condensate)
    dim = fock.fock_dimension(config.n_modes, n_max)
    if dim > fock.MAX_DIM:
        raise ConfigurationError(f"oracle Fock dimension {dim} exceeds cap {fock.MAX_DIM}")
    return n_max


def run_oracle(config, setup):
    """Exact states at every observation time (same h(t) sampling and dt as the SDE)."""
    n_max = check_oracle_caps(config)
    fb = fock.build_fock_basis(config.n_modes, n_max)
    ops = fock.operators(fb)
    c, cd = ops
    n = config.n_modes
    h_int = fock.build_hamiltonian_matrix(
        lattice.CouplingTensors(np.zeros((n, n), complex), setup.tensors.g4, 1.0), fb, ops)
    pairs = [[(cd[k] @ c[l]).tocsr() for l in range(n)] for k in range(n)]

    def hamiltonian(t):
        h = setup.schedule.h(t)
        H = h_int.copy()
        for k in range(n):
            for l in range(n):
                if abs(h[k, l]) > 0:
                    H = H + h[k, l] * pairs[k][l]
        return H

    state = fock.coherent_state(fb, config.initial_state.amplitudes(n))
    dt = float(config.oracle.get("dt", config.dt))
    provider = hamiltonian(0.0) if setup.schedule.is_static() else hamiltonian
    states = fock.evolve_exact(state, provider, max(config.observation_times), dt,
                               config.observation_times)
    return states, ops


def _z(stoch, se, exact):
    diff = stoch - exact
    if se > 0:
        return diff / se
    return 0.0 if abs(diff) < 1e-9 else float("inf")


def comparison_table(config, setup, acc, states, ops):
    obs = config.observables
    basis = setup.basis
    rows = []
    for t, st in zip(config.observation_times, states):
        rho = fock.one_body_matrix(st, ops)
        occ, occ_se = correlators.occupations(acc, t)
        for k in range(config.n_modes):
            ex = float(rho[k, k].real)
            rows.append({"observable": f"n{k}", "t": t, "stochastic": float(occ[k]),
                         "se": float(occ_se[k]), "exact": ex, "z": float(_z(occ[k], occ_se[k], ex))})
        if obs.get("imbalance", False):
            w = correlators.imbalance_weights(basis)
            v, se = correlators.population_imbalance(acc, basis, t)
            ex = float(np.sum(w * rho).real)
            rows.append({"observable": "imbalance", "t": t, "stochastic": v, "se": se,
                         "exact": ex, "z": float(_z(v, se, ex))})
        pairs = [tuple(p) for p in obs.get("g1_pairs", [])]
        if pairs:
            res = correlators.g1(acc, basis, [p[0] for p in pairs], [p[1] for p in pairs], t)
            exact = fock.exact_correlations(st, basis, g1_pairs=pairs, ops=ops)["G1"]
            for i, (r, s) in enumerate(pairs):
                parts = [("re", np.real, res.errors_re)]
                if r != s:
                    parts.append(("im", np.imag, res.errors_im))
                for tag, f, errs in parts:
                    sv, ev = float(f(res.values[i])), float(f(exact.values[i]))
                    rows.append({"observable": f"G1({r},{s}).{tag}", "t": t, "stochastic": sv,
                                 "se": float(errs[i]), "exact": ev, "z": float(_z(sv, errs[i], ev))})
        g2p = [tuple(p) for p in obs.get("g2_pairs", [])]
        if g2p:
            res = correlators.g2(acc, basis, [p[0] for p in g2p], [p[1] for p in g2p], t)
            exact = fock.exact_correlations(st, basis, g2_pairs=g2p, ops=ops)["G2"]
            for i, (r1, r2) in enumerate(g2p):
                sv, ev = float(res.values[i].real), float(exact.values[i].real)
                rows.append({"observable": f"G2({r1},{r2}).re", "t": t, "stochastic": sv,
                             "se": float(res.errors_re[i]), "exact": ev,
                             "z": float(_z(sv, res.errors_re[i], ev))})
    return rows


def write_comparison_csv(path, rows, config_hash=None):
    cols = ("observable", "t", "stochastic", "se", "exact", "z")
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["observable"]] + [repr(float(r[c])) for c in cols[1:]])


def comparison_passes(rows, z_max=3.0, fraction=0.95):
    if not rows:
        return False
    ok = sum(1 for r in rows if abs(r["z"]) <= z_max)
    return ok >= fraction * len(rows)


def run_oracle_compare(config, workers=None, with_figures=True):
    check_oracle_caps(config)
    report, setup, acc = run_ensemble(config, workers, with_figures)
    if acc.count == 0:
        report.comparison = []
        report.status = "divergence-dominated"
        report.exit_code = DivergenceError.exit_code
        _write_report(config.output, report)
        return report
    t0 = time.perf_counter()
    states, ops = run_oracle(config, setup)
    rows = comparison_table(config, setup, acc, states, ops)
    report.timings["oracle"] = time.perf_counter() - t0
    report.comparison = rows
    passed = comparison_passes(rows)
    report.results["comparison_pass"] = passed
    report.results["comparison_fraction"] = float(np.mean([abs(r["z"]) <= 3 for r in rows]))
    path = os.path.join(config.output, "comparison.csv")
    write_comparison_csv(path, rows, report.config_hash)
    report.files.append("comparison.csv")
    if with_figures and config.observables.get("figures", True):
        from . import plotting
        report.files += plotting.comparison_figure(config.output, rows, report.config_hash)
    if report.exit_code == 0 and not passed:
        report.status = "comparison-failed"
        report.exit_code = 1
    _write_report(config.output, report)
    return report


# --------------------------------------------------------------------------
# derive / modes

def run_derive(config):
    setup = build_setup(config)
    os.makedirs(config.output, exist_ok=True)
    sym = setup.family.symbolic(setup.schedule.h(0.0),
                                probe_points=ffpe.random_phase_points(config.n_modes, 100))
    payload = sym.to_dict()
    payload["config_hash"] = config.hash()
    payload["factorization_residual"] = factorization_residual(setup)
    path = os.path.join(config.output, "derivation.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path, payload


def run_modes(config, with_figures=True):
    setup = build_setup(config, with_family=False)
    os.makedirs(config.output, exist_ok=True)
    path = os.path.join(config.output, "basis.json")
    payload = lattice.dump_basis(setup.basis, setup.tensors)
    payload["config_hash"] = config.hash()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    with open(os.path.join(config.output, "energies.csv"), "w") as fh:
        fh.write(correlators.provenance_comment(payload))
        fh.write("k,energy\n")
        for k, e in enumerate(setup.basis.energies):
            fh.write(f"{k},{e!r}\n")
    files = ["basis.json", "energies.csv"]
    if with_figures:
        from . import plotting
        files += plotting.mode_figure(config.output, setup.basis, config.protocol,
                                      payload["config_hash"])
    return files, setup
