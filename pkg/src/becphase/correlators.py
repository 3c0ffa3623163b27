"""Correlation functions from trajectory ensembles.

Condensate amplitudes are Wigner (symmetrically ordered) and the rest are
positive-P (normally ordered).  Turning a stochastic moment into a normally
ordered expectation value subtracts, for every creator/annihilator pair of
the same condensate mode, a contraction of -1/2.  In position space the
contraction kernel is K(r, s) = sum_{k in C} phi_k(r) phi_k(s).
"""

from dataclasses import dataclass, field
import csv
import json

import numpy as np

from .errors import ConfigurationError, UndefinedVisibilityError


# --------------------------------------------------------------------------
# channels: per-trajectory scalar observables evaluated at every time

class MonomialChannel:
    """Product of phase variables, e.g. a_0^+ a_0 -> (n + 0, 0)."""

    def __init__(self, factors, n_modes):
        self.factors = tuple(int(f) for f in factors)
        if any(f < 0 or f >= 2 * n_modes for f in self.factors):
            raise ConfigurationError(f"monomial {self.factors} references an unknown mode")
        self.n_modes = n_modes

    @property
    def name(self):
        return "m:" + format_monomial(self.factors, self.n_modes)

    def __call__(self, samples):
        out = np.ones(samples.shape[:-1], dtype=complex)
        for f in self.factors:
            out = out * samples[..., f]
        return out


class G2Channel:
    """Normally ordered estimator of G2(r1, r2; r2, r1) for one trajectory."""

    def __init__(self, basis, r1, r2):
        self.r1, self.r2 = float(r1), float(r2)
        self.phi1 = basis.values_at(self.r1)
        self.phi2 = basis.values_at(self.r2)
        self.n = basis.n_modes
        c = list(basis.condensate)
        self.k11 = float(np.sum(self.phi1[c].conj() * self.phi1[c]).real)
        self.k22 = float(np.sum(self.phi2[c].conj() * self.phi2[c]).real)
        self.k12 = complex(np.sum(self.phi1[c].conj() * self.phi2[c]))

    @property
    def name(self):
        return f"g2:{self.r1!r}:{self.r2!r}"

    def __call__(self, samples):
        n = self.n
        a, ap = samples[..., :n], samples[..., n:]
        p1, p2 = ap @ self.phi1.conj(), ap @ self.phi2.conj()
        f1, f2 = a @ self.phi1, a @ self.phi2
        k12, k21 = self.k12, np.conj(self.k12)
        return (p1 * p2 * f2 * f1
                - 0.5 * (k12 * p2 * f1 + self.k11 * p2 * f2 + self.k22 * p1 * f1 + k21 * p1 * f2)
                + 0.25 * (k12 * k21 + self.k11 * self.k22))


def parse_monomial(text, n_modes):
    """'a0+ a0 a1' -> variable indices; a{k} is a_k and a{k}+ is a_k^+."""
    out = []
    for tok in text.split():
        plus = tok.endswith("+")
        body = tok[:-1] if plus else tok
        if not body.startswith("a") or not body[1:].isdigit():
            raise ConfigurationError(f"bad monomial factor {tok!r} in {text!r}")
        k = int(body[1:])
        if k >= n_modes:
            raise ConfigurationError(f"monomial {text!r} references unknown mode {k}")
        out.append(k + n_modes if plus else k)
    return tuple(out)


def format_monomial(factors, n_modes):
    return " ".join(f"a{f - n_modes}+" if f >= n_modes else f"a{f}" for f in factors) or "1"


# --------------------------------------------------------------------------
# accumulator

@dataclass
class EnsembleAccumulator:
    """Streaming sums over completed trajectories.

    ``pair_sum[t, j, k]`` sums a_j^+ a_k.  With covariance tracking,
    ``pair_conj[t]`` and ``pair_plain[t]`` sum v v^H and v v^T of the
    flattened pair matrix, which gives exact standard errors for any linear
    functional of the one-body matrix.
    """

    n_modes: int
    times: tuple
    n_condensate: int = 2
    track_covariance: bool = True
    channel_names: tuple = ()
    count: int = 0
    diverged: int = 0
    pair_sum: np.ndarray = None
    pair_abs2: np.ndarray = None
    pair_conj: np.ndarray = None
    pair_plain: np.ndarray = None
    chan_sum: np.ndarray = None
    chan_re2: np.ndarray = None
    chan_im2: np.ndarray = None

    def __post_init__(self):
        n, nt, nc = self.n_modes, len(self.times), len(self.channel_names)
        self.times = tuple(float(t) for t in self.times)
        self.channel_names = tuple(self.channel_names)
        if self.pair_sum is None:
            self.pair_sum = np.zeros((nt, n, n), dtype=complex)
            self.pair_abs2 = np.zeros((nt, n, n))
            if self.track_covariance:
                self.pair_conj = np.zeros((nt, n * n, n * n), dtype=complex)
                self.pair_plain = np.zeros((nt, n * n, n * n), dtype=complex)
            self.chan_sum = np.zeros((nc, nt), dtype=complex)
            self.chan_re2 = np.zeros((nc, nt))
            self.chan_im2 = np.zeros((nc, nt))

    def empty_like(self):
        return EnsembleAccumulator(self.n_modes, self.times, self.n_condensate,
                                   self.track_covariance, self.channel_names)

    def time_index(self, t):
        if isinstance(t, (int, np.integer)) and not isinstance(t, bool) and t < 0:
            raise ConfigurationError(f"unknown observation time {t}")
        for i, s in enumerate(self.times):
            if abs(s - float(t)) <= 1e-9 * max(1.0, abs(s)):
                return i
        raise ConfigurationError(f"time {t} is not an observation time {list(self.times)}")

    def channel_index(self, name):
        try:
            return self.channel_names.index(name)
        except ValueError:
            raise ConfigurationError(f"channel {name!r} was not registered") from None

    def merge(self, other):
        if (other.n_modes, other.times, other.channel_names, other.track_covariance) != \
                (self.n_modes, self.times, self.channel_names, self.track_covariance):
            raise ConfigurationError("cannot merge accumulators with different layouts")
        out = self.empty_like()
        out.count = self.count + other.count
        out.diverged = self.diverged + other.diverged
        for name in ("pair_sum", "pair_abs2", "pair_conj", "pair_plain",
                     "chan_sum", "chan_re2", "chan_im2"):
            a = getattr(self, name)
            if a is not None:
                setattr(out, name, a + getattr(other, name))
        return out

    # -- reading

    def mean_pairs(self, t):
        """Raw (symmetric/normal mixed) moments <a_j^+ a_k> at time t."""
        self._need_data()
        return self.pair_sum[self.time_index(t)] / self.count

    def channel_mean(self, name, t):
        self._need_data()
        i, k = self.channel_index(name), self.time_index(t)
        return self.chan_sum[i, k] / self.count

    def channel_se(self, name, t, part="abs"):
        self._need_data()
        i, k = self.channel_index(name), self.time_index(t)
        n = self.count
        mean = self.chan_sum[i, k] / n
        if part == "re":
            var = self.chan_re2[i, k] / n - mean.real**2
        elif part == "im":
            var = self.chan_im2[i, k] / n - mean.imag**2
        else:
            var = (self.chan_re2[i, k] + self.chan_im2[i, k]) / n - abs(mean) ** 2
        return float(np.sqrt(max(var, 0.0) / n))

    def linear_se(self, weights, t, part="abs"):
        """Standard error of sum_jk W_jk a_j^+ a_k at time t."""
        self._need_data()
        k = self.time_index(t)
        w = np.asarray(weights, dtype=complex).reshape(-1)
        n = self.count
        mean = w @ self.pair_sum[k].reshape(-1) / n
        if self.pair_conj is None:
            # no covariance: treat elements as independent (upper bound-ish)
            var_abs = np.sum(np.abs(w) ** 2 * (self.pair_abs2[k].reshape(-1) / n
                                                - np.abs(self.pair_sum[k].reshape(-1) / n) ** 2))
            return float(np.sqrt(max(var_abs, 0.0) / n))
        abs2 = (w @ self.pair_conj[k] @ w.conj()).real / n
        sq = (w @ self.pair_plain[k] @ w) / n
        if part == "re":
            var = 0.5 * (abs2 + sq.real) - mean.real**2
        elif part == "im":
            var = 0.5 * (abs2 - sq.real) - mean.imag**2
        else:
            var = abs2 - abs(mean) ** 2
        return float(np.sqrt(max(var, 0.0) / n))

    def _need_data(self):
        if self.count == 0:
            raise ConfigurationError("no completed trajectories accumulated")

    # -- serialization (for worker transport)

    def to_arrays(self):
        return {k: getattr(self, k) for k in ("count", "diverged", "pair_sum", "pair_abs2",
                                               "pair_conj", "pair_plain", "chan_sum",
                                               "chan_re2", "chan_im2")}


def accumulate_batch(acc, samples, diverged, channels=()):
    """Add a batch: ``samples`` (B, n_times, 2n), ``diverged`` (B,) step or -1."""
    if tuple(c.name for c in channels) != acc.channel_names:
        raise ConfigurationError("channel list does not match the accumulator registry")
    samples = np.asarray(samples)
    if samples.shape[1:] != (len(acc.times), 2 * acc.n_modes):
        raise ConfigurationError(
            f"samples shaped {samples.shape[1:]}, accumulator expects "
            f"({len(acc.times)}, {2 * acc.n_modes})")
    ok = np.asarray(diverged) < 0
    out = acc.merge(acc.empty_like())
    out.diverged += int(np.count_nonzero(~ok))
    x = samples[ok]
    b = x.shape[0]
    out.count += b
    if b == 0:
        return out
    n = acc.n_modes
    m = x[..., n:, None] * x[..., None, :n]  # (B, T, j, k) = a_j^+ a_k
    out.pair_sum += m.sum(axis=0)
    out.pair_abs2 += (m.real**2 + m.imag**2).sum(axis=0)
    if acc.track_covariance:
        v = m.reshape(b, len(acc.times), n * n)
        for t in range(len(acc.times)):
            vt = v[:, t, :]
            out.pair_conj[t] += vt.T @ vt.conj()
            out.pair_plain[t] += vt.T @ vt
    for i, ch in enumerate(channels):
        val = ch(x)
        out.chan_sum[i] += val.sum(axis=0)
        out.chan_re2[i] += (val.real**2).sum(axis=0)
        out.chan_im2[i] += (val.imag**2).sum(axis=0)
    return out


def accumulate(acc, traj, monomials=()):
    """Add one TrajectoryResult.  ``monomials`` are the registered channels."""
    n_vars = 2 * acc.n_modes
    if traj.completed:
        samples = np.array([p.alpha for p in traj.samples])[None]
        if samples.shape[1] != len(acc.times):
            raise ConfigurationError("trajectory observation times do not match accumulator")
    else:
        samples = np.zeros((1, len(acc.times), n_vars), dtype=complex)
    return accumulate_batch(acc, samples, [traj.diverged_step if not traj.completed else -1],
                            monomials)


# --------------------------------------------------------------------------
# results

@dataclass
class CorrelationResult:
    kind: str
    coords: list
    values: np.ndarray
    errors: np.ndarray
    ordering: str
    n_used: int
    diverged: int = 0
    time: float = 0.0
    method: str = "stochastic"
    errors_re: np.ndarray = None
    errors_im: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        for i, c in enumerate(self.coords):
            v = self.values[i]
            yield list(c) + [self.time, v.real, v.imag, self.errors[i],
                             self.n_used, self.diverged]

    def header(self):
        coord_names = {"G1": ["r", "s"], "G2": ["r1", "r2"], "one_body": ["j", "k"]}.get(
            self.kind, [f"c{i}" for i in range(len(self.coords[0]) if self.coords else 0)])
        return coord_names + ["t", "re", "im", "se", "n_used", "diverged_excluded"]

    def to_dict(self):
        return {"kind": self.kind, "method": self.method, "ordering": self.ordering,
                "time": self.time, "n_used": self.n_used, "diverged_excluded": self.diverged,
                "coords": [list(c) for c in self.coords],
                "re": np.real(self.values).tolist(), "im": np.imag(self.values).tolist(),
                "se": np.asarray(self.errors).tolist(), **self.meta}


def provenance_comment(provenance):
    keys = ("config_hash", "derivation_hash")
    return "# " + " ".join(f"{k}={provenance[k]}" for k in keys if k in provenance) + "\n"


def write_results_csv(path, results, provenance=None):
    """One row per coordinate; a leading '#' line carries the provenance hashes."""
    results = list(results)
    with open(path, "w", newline="") as fh:
        if provenance:
            fh.write(provenance_comment(provenance))
        w = csv.writer(fh, lineterminator="\n")
        if results:
            w.writerow(results[0].header())
        for res in results:
            for row in res.rows():
                w.writerow([_fmt(v) for v in row])


def write_results_json(path, results, provenance):
    payload = {**provenance, "results": [r.to_dict() for r in results]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# --------------------------------------------------------------------------
# observables

def condensate_kernel(basis, r, s):
    pr, ps = basis.values_at(r), basis.values_at(s)
    c = list(basis.condensate)
    return complex(np.sum(pr[c].conj() * ps[c]))


def _correction_matrix(n, n_condensate):
    corr = np.zeros((n, n))
    corr[range(n_condensate), range(n_condensate)] = 0.5
    return corr


def one_body_density_matrix(acc, t):
    """<c_j^+ c_k> with the -1/2 condensate ordering correction, and SEs."""
    n = acc.n_modes
    rho = acc.mean_pairs(t) - _correction_matrix(n, acc.n_condensate)
    se = np.zeros((n, n))
    for j in range(n):
        for k in range(n):
            w = np.zeros((n, n))
            w[j, k] = 1.0
            se[j, k] = acc.linear_se(w, t)
    return rho, se


def one_body_result(acc, t):
    rho, se = one_body_density_matrix(acc, t)
    n = acc.n_modes
    coords = [(j, k) for j in range(n) for k in range(n)]
    return CorrelationResult("one_body", coords, rho.reshape(-1), se.reshape(-1),
                             "normal-corrected", acc.count, acc.diverged, acc.times[acc.time_index(t)])


def g1(acc, basis, r, s, t, corrected=True):
    """G1(r; s) at time t.  ``r`` and ``s`` may be scalars or equal-length arrays."""
    rs = np.atleast_1d(np.asarray(r, dtype=float))
    ss = np.atleast_1d(np.asarray(s, dtype=float))
    if rs.shape != ss.shape:
        raise ConfigurationError("g1 needs matching r and s arrays")
    if basis.n_modes != acc.n_modes:
        raise ConfigurationError("basis and accumulator mode counts differ")
    moments = acc.mean_pairs(t)
    values, errs, errs_re, errs_im = [], [], [], []
    for a, b in zip(rs, ss):
        w = np.outer(basis.values_at(a).conj(), basis.values_at(b))
        val = np.sum(w * moments)
        if corrected:
            val -= 0.5 * condensate_kernel(basis, a, b)
        values.append(val)
        errs.append(acc.linear_se(w, t))
        errs_re.append(acc.linear_se(w, t, "re"))
        errs_im.append(acc.linear_se(w, t, "im"))
    return CorrelationResult("G1", list(zip(rs.tolist(), ss.tolist())), np.array(values),
                             np.array(errs), "normal-corrected" if corrected else "symmetric-raw",
                             acc.count, acc.diverged, acc.times[acc.time_index(t)],
                             errors_re=np.array(errs_re), errors_im=np.array(errs_im))


def g1_diagonal(acc, basis, t, points=None, corrected=True):
    x = basis.grid.x if points is None else np.asarray(points)
    return g1(acc, basis, x, x, t, corrected)


def g2(acc, basis, r1, r2, t):
    """Normally ordered G2(r1, r2; r2, r1) from registered G2 channels."""
    r1s = np.atleast_1d(np.asarray(r1, dtype=float))
    r2s = np.atleast_1d(np.asarray(r2, dtype=float))
    values, errs, errs_re, errs_im, coords = [], [], [], [], []
    for a, b in zip(r1s, r2s):
        # bosonic symmetry: G2(r1, r2) = G2(r2, r1), stored once in sorted order
        lo, hi = float(min(a, b)), float(max(a, b))
        name = G2Channel.__new__(G2Channel)
        name.r1, name.r2 = lo, hi
        key = G2Channel.name.fget(name)
        try:
            values.append(acc.channel_mean(key, t))
        except ConfigurationError:
            raise ConfigurationError(
                f"G2({a}, {b}) needs a registered fourth-moment channel") from None
        errs.append(acc.channel_se(key, t))
        errs_re.append(acc.channel_se(key, t, "re"))
        errs_im.append(acc.channel_se(key, t, "im"))
        coords.append((float(a), float(b)))
    return CorrelationResult("G2", coords, np.array(values), np.array(errs), "normal-corrected",
                             acc.count, acc.diverged, acc.times[acc.time_index(t)],
                             errors_re=np.array(errs_re), errors_im=np.array(errs_im))


def g2_channels(basis, pairs):
    """Channels for G2 requests; each unordered pair is registered once."""
    seen, out = set(), []
    for a, b in pairs:
        lo, hi = sorted((float(a), float(b)))
        if (lo, hi) not in seen:
            seen.add((lo, hi))
            out.append(G2Channel(basis, lo, hi))
    return out


def visibility(result, window=None):
    """(max - min)/(max + min) of Re G1(r, r) inside ``window`` = (lo, hi)."""
    r = np.array([c[0] for c in result.coords])
    dens = np.real(result.values)
    errs = np.asarray(result.errors)
    mask = np.ones(len(r), dtype=bool) if window is None else (r >= window[0]) & (r <= window[1])
    if not np.any(mask):
        raise UndefinedVisibilityError("visibility window contains no points")
    d, e = dens[mask], errs[mask]
    i_max, i_min = int(np.argmax(d)), int(np.argmin(d))
    hi, lo = d[i_max], d[i_min]
    if not hi + lo > 0:
        raise UndefinedVisibilityError(f"max + min = {hi + lo} is not positive")
    v = (hi - lo) / (hi + lo)
    dv_dhi = 2 * lo / (hi + lo) ** 2
    dv_dlo = -2 * hi / (hi + lo) ** 2
    err = float(np.hypot(dv_dhi * e[i_max], dv_dlo * e[i_min]))
    return float(min(max(v, 0.0), 1.0)), err


def imbalance_weights(basis, split=0.0):
    """S_jk with sum_jk S_jk <c_j^+ c_k> = N(x > split) - N(x < split)."""
    x = basis.grid.x
    sign = np.sign(x - split)
    m = basis.modes
    return (m.conj() * sign) @ m.T * basis.grid.dx


def population_imbalance(acc, basis, t, split=0.0):
    w = imbalance_weights(basis, split)
    rho = acc.mean_pairs(t) - _correction_matrix(acc.n_modes, acc.n_condensate)
    return float(np.sum(w * rho).real), acc.linear_se(w, t, "re")


def occupations(acc, t):
    n = acc.n_modes
    rho = acc.mean_pairs(t) - _correction_matrix(n, acc.n_condensate)
    errs = []
    for k in range(n):
        w = np.zeros((n, n))
        w[k, k] = 1.0
        errs.append(acc.linear_se(w, t, "re"))
    return np.real(np.diag(rho)), np.array(errs)
