"""Machine derivation of Ito equations from the mode-space Hamiltonian.

Phase variables are numbered ``0..n-1`` for a_k and ``n..2n-1`` for a_k^+.
A differential operator is a dict ``{(deriv, mono): coeff}`` where ``deriv``
and ``mono`` are sorted tuples of variable indices (repeats allowed) and the
term means ``coeff * d^deriv (x^mono P)``: derivatives always stand to the
left, which is the form the Fokker-Planck drift and diffusion are read from.
"""

from collections import defaultdict
from dataclasses import dataclass, field
import hashlib
import json

import numpy as np

from .errors import ConfigurationError, InternalConsistencyError, NumericError

PRUNE = 1e-14
WIGNER = "wigner"
POSITIVE_P = "positive_p"
ANNIHILATE = "a"
CREATE = "c"
LEFT = "L"
RIGHT = "R"

HAMILTONIAN_CLASSES = ("H_C", "H_NC", "V_linear", "V_quadratic", "V_cubic")


@dataclass(frozen=True)
class HamiltonianTerm:
    weight: complex
    ops: tuple  # ((mode, kind), ...) in written order
    label: str


@dataclass(frozen=True)
class OperatorTerm:
    coefficient: complex
    factors: tuple  # ((mode, kind, side), ...) in written order


@dataclass(frozen=True)
class DifferentialTerm:
    coefficient: complex
    derivative: tuple
    monomial: tuple

    @property
    def order(self):
        return len(self.derivative)


@dataclass
class TruncationReport:
    dropped: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.dropped)

    def max_magnitude(self):
        return max((abs(t.coefficient) for t in self.dropped), default=0.0)

    def by_order(self):
        out = defaultdict(int)
        for t in self.dropped:
            out[t.order] += 1
        return dict(out)


# --------------------------------------------------------------------------
# Hamiltonian expansion

def _classify(modes, n_condensate):
    n_c = sum(1 for k in modes if k < n_condensate)
    if n_c == len(modes):
        return "H_C"
    if n_c == 0:
        return "H_NC"
    return {1: "V_linear", 2: "V_quadratic", 3: "V_cubic"}[n_c]


def expand_hamiltonian(tensors, n_condensate=2, include_quadratic=True,
                       include_interaction=True):
    """Every monomial of the mode-space Hamiltonian, with zero weights dropped."""
    terms = []
    n = tensors.n_modes
    if include_quadratic:
        for k in range(n):
            for l in range(n):
                w = complex(tensors.h[k, l])
                if abs(w) >= PRUNE:
                    terms.append(HamiltonianTerm(
                        w, ((k, CREATE), (l, ANNIHILATE)), _classify((k, l), n_condensate)))
    if include_interaction:
        g4 = tensors.g4
        for k, l, m, p in zip(*np.nonzero(np.abs(g4) >= 2 * PRUNE)):
            w = 0.5 * complex(g4[k, l, m, p])
            terms.append(HamiltonianTerm(
                w, ((int(k), CREATE), (int(l), CREATE), (int(m), ANNIHILATE),
                    (int(p), ANNIHILATE)),
                _classify((k, l, m, p), n_condensate)))
    return terms


def _canonical_ops(ops):
    # creators commute among themselves, as do annihilators
    creators = sorted(k for k, kind in ops if kind == CREATE)
    annihilators = sorted(k for k, kind in ops if kind == ANNIHILATE)
    return tuple((k, CREATE) for k in creators) + tuple((k, ANNIHILATE) for k in annihilators)


def merge_hamiltonian(terms):
    """Combine normally ordered monomials that are equal as operators."""
    acc = defaultdict(complex)
    labels = {}
    for t in terms:
        key = _canonical_ops(t.ops)
        acc[key] += t.weight
        labels[key] = t.label
    return [HamiltonianTerm(w, key, labels[key]) for key, w in acc.items() if abs(w) >= PRUNE]


def liouvillian_terms(ham_terms):
    """-i[H, rho] as operator terms: -i w (X rho) and +i w (rho X)."""
    out = []
    for t in ham_terms:
        out.append(OperatorTerm(-1j * t.weight, tuple((k, kind, LEFT) for k, kind in t.ops)))
        out.append(OperatorTerm(1j * t.weight, tuple((k, kind, RIGHT) for k, kind in t.ops)))
    return out


# --------------------------------------------------------------------------
# correspondence rules

def rule(sector, kind, side, k, n):
    """(multiplied variable, differentiated variable or None, derivative coeff)."""
    a, ap = k, n + k
    if sector == WIGNER:
        return {
            (ANNIHILATE, LEFT): (a, ap, 0.5),
            (ANNIHILATE, RIGHT): (a, ap, -0.5),
            (CREATE, LEFT): (ap, a, -0.5),
            (CREATE, RIGHT): (ap, a, 0.5),
        }[kind, side]
    if sector == POSITIVE_P:
        return {
            (ANNIHILATE, LEFT): (a, None, 0.0),
            (CREATE, RIGHT): (ap, None, 0.0),
            (CREATE, LEFT): (ap, a, -1.0),
            (ANNIHILATE, RIGHT): (a, ap, -1.0),
        }[kind, side]
    raise ConfigurationError(f"unknown sector {sector!r}")


def _insert(tup, v):
    out = list(tup)
    out.append(v)
    out.sort()
    return tuple(out)


def _remove(tup, v):
    out = list(tup)
    out.remove(v)
    return tuple(out)


def _left_multiply(op, mult, dvar, dcoef):
    """(x_mult + dcoef d_dvar) applied on the left of ``op``."""
    out = defaultdict(complex)
    for (deriv, mono), c in op.items():
        out[deriv, _insert(mono, mult)] += c
        m = deriv.count(mult)
        if m:
            # x d^m = d^m x - m d^(m-1)
            out[_remove(deriv, mult), mono] -= m * c
        if dvar is not None:
            out[_insert(deriv, dvar), mono] += dcoef * c
    return out


def operator_term_rewrite(term, sector_map, n):
    """Differential operator (dict form) equivalent to one OperatorTerm."""
    left = [f for f in term.factors if f[2] == LEFT]
    right = [f for f in term.factors if f[2] == RIGHT]
    # innermost factor first: right factors in written order, left reversed
    order = right + left[::-1]
    op = {((), ()): complex(term.coefficient)}
    for k, kind, side in order:
        try:
            sector = sector_map[k]
        except (KeyError, IndexError):
            raise ConfigurationError(f"mode {k} has no sector assignment") from None
        op = _left_multiply(op, *rule(sector, kind, side, k, n))
    return op


def _merge_into(acc, op):
    for key, c in op.items():
        acc[key] += c


def _to_terms(acc):
    terms = [DifferentialTerm(c, d, m) for (d, m), c in acc.items() if abs(c) >= PRUNE]
    terms.sort(key=lambda t: (len(t.derivative), t.derivative, len(t.monomial), t.monomial))
    return terms


def apply_rules(terms, sector_map, n_modes=None):
    """Rewrite operator terms into merged differential terms.

    ``sector_map`` maps mode index to ``"wigner"`` or ``"positive_p"``.
    """
    if n_modes is None:
        n_modes = len(sector_map)
    acc = defaultdict(complex)
    for t in terms:
        if abs(t.coefficient) < PRUNE:
            continue
        _merge_into(acc, operator_term_rewrite(t, sector_map, n_modes))
    return _to_terms(acc)


def default_sector_map(n_modes, n_condensate=2):
    return [WIGNER if k < n_condensate else POSITIVE_P for k in range(n_modes)]


def truncate(terms, max_order=2):
    kept, report = [], TruncationReport()
    for t in terms:
        (report.dropped if t.order > max_order else kept).append(t)
    return kept, report


# --------------------------------------------------------------------------
# polynomials and the SDE system

def _poly_add(poly, mono, c):
    poly[mono] = poly.get(mono, 0j) + c


def _poly_clean(poly):
    return {m: c for m, c in sorted(poly.items()) if abs(c) >= PRUNE}


def poly_eval(poly, x):
    """Evaluate ``{mono: coeff}`` at x, shape (..., n_vars)."""
    x = np.asarray(x)
    out = np.zeros(x.shape[:-1], dtype=complex)
    for mono, c in poly.items():
        v = np.full(x.shape[:-1], c, dtype=complex)
        for i in mono:
            v = v * x[..., i]
        out = out + v
    return out


def poly_mul(p, q):
    out = {}
    for m1, c1 in p.items():
        for m2, c2 in q.items():
            _poly_add(out, tuple(sorted(m1 + m2)), c1 * c2)
    return _poly_clean(out)


def poly_sub(p, q):
    out = dict(p)
    for m, c in q.items():
        _poly_add(out, m, -c)
    return _poly_clean(out)


@dataclass
class SdeSystem:
    """Drift, diffusion and noise factor as sparse polynomials.

    ``diffusion`` holds both (a, b) and (b, a) for off-diagonal entries.
    ``noise_factor`` holds analytic entries; ``takagi_blocks`` lists variable
    groups whose factor is computed numerically at each phase point.
    """

    n_modes: int
    drift: list
    diffusion: dict
    noise_factor: dict
    takagi_blocks: list
    truncation_report: TruncationReport
    sector_map: list

    @property
    def n_vars(self):
        return 2 * self.n_modes

    def drift_at(self, x):
        x = np.asarray(x)
        return np.stack([poly_eval(p, x) for p in self.drift], axis=-1)

    def diffusion_at(self, x):
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (self.n_vars, self.n_vars), dtype=complex)
        for (a, b), p in self.diffusion.items():
            out[..., a, b] = poly_eval(p, x)
        return out

    def noise_at(self, x):
        """Noise factor d with d d^T = D at a single phase point (or a batch)."""
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (self.n_vars, self.n_vars), dtype=complex)
        for (a, b), p in self.noise_factor.items():
            out[..., a, b] = poly_eval(p, x)
        if self.takagi_blocks:
            dmat = self.diffusion_at(x)
            for block in self.takagi_blocks:
                idx = np.asarray(block)
                sub = dmat[..., idx[:, None], idx[None, :]]
                out[..., idx[:, None], idx[None, :]] = takagi_factor(sub)
        return out

    @property
    def is_deterministic(self):
        return not self.diffusion

    def to_dict(self):
        n = self.n_vars

        def dense(mono):
            e = [0] * n
            for i in mono:
                e[i] += 1
            return e

        def dump(poly):
            return [[dense(m), [c.real, c.imag]] for m, c in poly.items()]

        return {
            "format": "becphase-derivation/1",
            "n_modes": self.n_modes,
            "variables": [f"a{k}" for k in range(self.n_modes)]
            + [f"a{k}+" for k in range(self.n_modes)],
            "sectors": list(self.sector_map),
            "drift": [dump(p) for p in self.drift],
            "diffusion": [{"index": [a, b], "terms": dump(p)}
                          for (a, b), p in sorted(self.diffusion.items()) if a <= b],
            "noise_factor": {
                "analytic": [{"index": [a, b], "terms": dump(p)}
                             for (a, b), p in sorted(self.noise_factor.items())],
                "takagi_blocks": [list(b) for b in self.takagi_blocks],
            },
            "truncation_report": {
                "count": self.truncation_report.count,
                "max_magnitude": self.truncation_report.max_magnitude(),
                "by_order": {str(k): v for k, v in sorted(self.truncation_report.by_order().items())},
                "terms": [{"derivative": dense(t.derivative), "monomial": dense(t.monomial),
                           "coefficient": [t.coefficient.real, t.coefficient.imag]}
                          for t in self.truncation_report.dropped],
            },
        }

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def drift_and_diffusion(terms, n_vars):
    """Read A and D off differential terms of order <= 2."""
    drift = [dict() for _ in range(n_vars)]
    diffusion = defaultdict(dict)
    for t in terms:
        if t.order == 0:
            raise InternalConsistencyError(
                f"order-0 term {t.monomial} with coefficient {t.coefficient} survived merging")
        if t.order == 1:
            # c d_a(x^m P) = -d_a(A_a P)
            _poly_add(drift[t.derivative[0]], t.monomial, -t.coefficient)
        elif t.order == 2:
            a, b = t.derivative
            if a == b:
                _poly_add(diffusion[a, a], t.monomial, 2 * t.coefficient)
            else:
                _poly_add(diffusion[a, b], t.monomial, t.coefficient)
                _poly_add(diffusion[b, a], t.monomial, t.coefficient)
        else:
            raise ConfigurationError("extract_sde needs truncated terms (order <= 2)")
    drift = [_poly_clean(p) for p in drift]
    diffusion = {k: _poly_clean(p) for k, p in diffusion.items()}
    diffusion = {k: p for k, p in diffusion.items() if p}
    for (a, b), p in diffusion.items():
        q = diffusion.get((b, a), {})
        if poly_sub(p, q):
            raise InternalConsistencyError(f"diffusion not symmetric at ({a}, {b})")
    return drift, diffusion


def diffusion_blocks(support, n_vars):
    """Connected components of the diffusion sparsity graph (sorted lists)."""
    parent = list(range(n_vars))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    active = set()
    for a, b in support:
        active.update((a, b))
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = defaultdict(list)
    for v in sorted(active):
        groups[find(v)].append(v)
    return sorted(groups.values())


def _square_root_monomial(poly):
    """sqrt(c) * sqrt(mono) if ``poly`` is a single term with an even monomial."""
    if len(poly) != 1:
        return None
    (mono, c), = poly.items()
    if any(mono.count(v) % 2 for v in set(mono)):
        return None
    half = tuple(sorted(v for v in set(mono) for _ in range(mono.count(v) // 2)))
    return {half: complex(np.sqrt(complex(c)))}


def factor_diffusion(diffusion, n_vars, probe_points=(), tol=1e-10):
    """Noise factor with d d^T = D.

    Scalar blocks whose entry is c * m^2 get the analytic factor sqrt(c) m;
    every other block is Takagi-factorized pointwise.  Returns
    ``(analytic entries, takagi blocks)`` after checking every probe point.
    """
    analytic, blocks = {}, []
    for block in diffusion_blocks(diffusion.keys(), n_vars):
        if len(block) == 1:
            a = block[0]
            root = _square_root_monomial(diffusion[a, a])
            if root is not None:
                analytic[a, a] = root
                continue
        blocks.append(block)
    probe = SdeSystem(n_vars // 2, [{}] * n_vars, diffusion, analytic, blocks,
                      TruncationReport(), [])
    for x in probe_points:
        x = np.asarray(getattr(x, "alpha", x))
        d = probe.noise_at(x)
        dd = probe.diffusion_at(x)
        resid = np.max(np.abs(d @ d.T - dd), initial=0.0)
        scale = max(1.0, np.max(np.abs(dd), initial=0.0))
        if not np.all(np.isfinite(d)) or resid > tol * scale:
            raise NumericError(f"noise factorization failed at phase point {x.tolist()} "
                               f"(residual {resid:.3e})")
    return analytic, blocks


def ldl_factor(mat, tol=1e-12):
    """Batched complex-symmetric elimination d d^T = mat without pivoting.

    Column j of d is the j-th Schur-complement column over the square root of
    its pivot.  Returns ``(d, ok)``; ``ok`` is False where a pivot vanished
    against a non-vanishing column or the residual exceeds ``tol`` relative
    to the largest entry.  Callers re-factor those rows with Takagi.
    """
    mat = np.asarray(mat, dtype=complex)
    a = mat.copy()
    m = mat.shape[-1]
    d = np.zeros_like(a)
    scale = np.maximum(np.max(np.abs(mat), axis=(-2, -1)), 1e-300)
    ok = np.ones(mat.shape[:-2], dtype=bool)
    with np.errstate(all="ignore"):
        for j in range(m):
            p = a[..., j, j]
            col = a[..., j:, j]
            small = np.abs(p) <= 1e-14 * scale
            ok &= ~(small & (np.max(np.abs(col), axis=-1) > 1e-14 * scale))
            root = np.where(small, 1.0, np.sqrt(p))
            d[..., j:, j] = np.where(small[..., None], 0.0, col / root[..., None])
            if j + 1 < m:
                upd = d[..., j + 1:, j]
                a[..., j + 1:, j + 1:] -= upd[..., :, None] * upd[..., None, :]
        resid = np.max(np.abs(d @ np.swapaxes(d, -1, -2) - mat), axis=(-2, -1))
    ok &= np.isfinite(resid) & (resid <= tol * scale)
    return d, ok


def symmetric_factor(mat, order=None):
    """d d^T = mat: LDL^T in ``order`` (a permutation of the block), Takagi where
    elimination breaks down.  Both are deterministic functions of ``mat``."""
    mat = np.asarray(mat, dtype=complex)
    m = mat.shape[-1]
    perm = np.arange(m) if order is None else np.asarray(order)
    inv = np.argsort(perm)
    d, ok = ldl_factor(mat[..., perm[:, None], perm[None, :]])
    d = d[..., inv, :]
    if not np.all(ok):
        bad = ~ok
        d[bad] = takagi_factor(mat[bad])
    return d


def takagi_factor(mat):
    """d with d d^T = mat for complex symmetric ``mat`` (batched on leading axes).

    Uses the real symmetric embedding [[A, B], [B, -A]] of A + iB, whose
    eigenvectors [x; y] with eigenvalue s >= 0 give Takagi vectors x + iy.
    """
    mat = np.asarray(mat, dtype=complex)
    m = mat.shape[-1]
    a, b = mat.real, mat.imag
    emb = np.concatenate([np.concatenate([a, b], axis=-1),
                          np.concatenate([b, -a], axis=-1)], axis=-2)
    vals, vecs = np.linalg.eigh(emb)
    vals = np.clip(vals[..., m:], 0.0, None)
    vecs = vecs[..., :, m:]
    u = vecs[..., :m, :] + 1j * vecs[..., m:, :]
    return u * np.sqrt(vals)[..., None, :]


def extract_sde(terms, n_modes, report=None, sector_map=(), probe_points=()):
    n_vars = 2 * n_modes
    drift, diffusion = drift_and_diffusion(terms, n_vars)
    analytic, blocks = factor_diffusion(diffusion, n_vars, probe_points)
    return SdeSystem(n_modes, drift, diffusion, analytic, blocks,
                     report or TruncationReport(), list(sector_map))


def random_phase_points(n_modes, count, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    shape = (count, 2 * n_modes)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def derive(tensors, n_condensate=2, sector_map=None, probe_points=None,
           include_quadratic=True, include_interaction=True):
    """Hamiltonian -> truncated FFPE -> SdeSystem."""
    n = tensors.n_modes
    if sector_map is None:
        sector_map = default_sector_map(n, n_condensate)
    ham = expand_hamiltonian(tensors, n_condensate, include_quadratic, include_interaction)
    ham = merge_hamiltonian(ham)
    terms = apply_rules(liouvillian_terms(ham), sector_map, n)
    kept, report = truncate(terms)
    if probe_points is None:
        probe_points = random_phase_points(n, 100)
    return extract_sde(kept, n, report, sector_map, probe_points)
