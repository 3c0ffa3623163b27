"""Vectorized evaluation of derived SDE systems over batches of trajectories.

The quadratic part of the Hamiltonian changes in time with the trap, the
interaction part does not.  Because the derivation is linear in the
Hamiltonian weights, the quadratic part is derived once per unit matrix
element and recombined with h(t) at each step.
"""

import numpy as np

from . import ffpe
from .lattice import CouplingTensors


class PolynomialBank:
    """A list of polynomials evaluated together as ``monomials @ coefficients``."""

    def __init__(self, polys, n_vars):
        monos = sorted({m for p in polys for m in p})
        self.n_vars = n_vars
        self.n_out = len(polys)
        deg = max((len(m) for m in monos), default=0)
        self.index = np.full((len(monos), max(deg, 1)), n_vars, dtype=np.intp)
        for i, m in enumerate(monos):
            self.index[i, :len(m)] = m
        pos = {m: i for i, m in enumerate(monos)}
        self.coef = np.zeros((len(monos), self.n_out), dtype=complex)
        for j, p in enumerate(polys):
            for m, c in p.items():
                self.coef[pos[m], j] += c

    @property
    def empty(self):
        return self.coef.shape[0] == 0

    def __call__(self, x):
        x = np.asarray(x)
        if self.empty:
            return np.zeros(x.shape[:-1] + (self.n_out,), dtype=complex)
        xp = np.concatenate([x, np.ones(x.shape[:-1] + (1,), dtype=x.dtype)], axis=-1)
        vals = xp[..., self.index[:, 0]]
        for col in range(1, self.index.shape[1]):
            vals = vals * xp[..., self.index[:, col]]
        return vals @ self.coef


class SdeFamily:
    """Ito system for a fixed interaction tensor and any single-particle matrix h."""

    def __init__(self, g4, sector_map, interaction=None):
        self.g4 = np.asarray(g4, dtype=complex)
        self.n_modes = n = self.g4.shape[0]
        self.n_vars = 2 * n
        self.sector_map = list(sector_map)
        zero_h = np.zeros((n, n), dtype=complex)
        if interaction is None:
            interaction = ffpe.derive(CouplingTensors(zero_h, g4, 1.0),
                                      sector_map=self.sector_map, include_quadratic=False)
        self.interaction = interaction
        # unit-weight derivation of every c_k^+ c_l
        self.lin = np.zeros((n, n, self.n_vars, self.n_vars), dtype=complex)
        self.dconst = np.zeros((n, n, self.n_vars, self.n_vars), dtype=complex)
        for k in range(n):
            for l in range(n):
                term = ffpe.HamiltonianTerm(1.0, ((k, ffpe.CREATE), (l, ffpe.ANNIHILATE)), "")
                terms = ffpe.apply_rules(ffpe.liouvillian_terms([term]), self.sector_map, n)
                kept, report = ffpe.truncate(terms)
                if report.count:
                    raise ffpe.InternalConsistencyError("quadratic term produced order > 2")
                drift, diff = ffpe.drift_and_diffusion(kept, self.n_vars)
                for a, p in enumerate(drift):
                    for mono, c in p.items():
                        if len(mono) != 1:
                            raise ffpe.InternalConsistencyError("quadratic drift not linear")
                        self.lin[k, l, a, mono[0]] += c
                for (a, b), p in diff.items():
                    for mono, c in p.items():
                        if mono:
                            raise ffpe.InternalConsistencyError("quadratic diffusion not constant")
                        self.dconst[k, l, a, b] += c
        self.drift_bank = PolynomialBank(interaction.drift, self.n_vars)
        self.diff_keys = sorted(k for k in interaction.diffusion if k[0] <= k[1])
        self.diff_bank = PolynomialBank([interaction.diffusion[k] for k in self.diff_keys],
                                        self.n_vars)
        self.const_support = {(a, b) for a, b in zip(*np.nonzero(np.any(self.dconst != 0, axis=(0, 1))))}

    def linear_matrix(self, h):
        return np.einsum("kl,klab->ab", h, self.lin)

    def constant_diffusion(self, h):
        return np.einsum("kl,klab->ab", h, self.dconst)

    def symbolic(self, h, probe_points=None):
        tensors = CouplingTensors(np.asarray(h, dtype=complex), self.g4, 1.0)
        return ffpe.derive(tensors, sector_map=self.sector_map, probe_points=probe_points)

    def layout(self, hs):
        """Noise layout valid for every h in ``hs``.

        The diffusion is split as D = D_const(h) + D_int(x).  D_int gets
        analytic scalars and small Takagi blocks per trajectory; D_const is
        factorized once per step and shared by the whole batch.  Stacking
        both factors side by side gives d d^T = D.
        """
        blocks = ffpe.diffusion_blocks(set(self.interaction.diffusion), self.n_vars)
        analytic, takagi = {}, []
        for block in blocks:
            if len(block) == 1 and (block[0], block[0]) in self.interaction.noise_factor:
                analytic[block[0]] = self.interaction.noise_factor[block[0], block[0]]
            else:
                takagi.append(block)
        const_vars = []
        hs = np.asarray(hs)
        if hs.size:
            active = np.any(np.abs(hs) >= ffpe.PRUNE, axis=0)
            coupled = np.any(self.dconst[active] != 0, axis=(0, 1))
            const_vars = sorted(int(a) for a in np.nonzero(coupled)[0])
        return NoiseLayout(self.n_vars, analytic, takagi, const_vars)

    def drift(self, x, lin):
        return x @ lin.T + self.drift_bank(x)

    def diffusion(self, x, dconst=None):
        """Interaction diffusion at ``x`` (plus ``dconst`` when given)."""
        x = np.asarray(x)
        out = np.zeros(x.shape[:-1] + (self.n_vars, self.n_vars), dtype=complex)
        if self.diff_keys:
            vals = self.diff_bank(x)
            for j, (a, b) in enumerate(self.diff_keys):
                out[..., a, b] = vals[..., j]
                out[..., b, a] = vals[..., j]
        if dconst is not None:
            out = out + dconst
        return out


class NoiseLayout:
    """Assignment of real noise channels to the pieces of the diffusion matrix.

    Channel order: analytic scalars (sorted by variable), interaction Takagi
    blocks, then the constant block.
    """

    def __init__(self, n_vars, analytic, takagi, const_vars=()):
        self.n_vars = n_vars
        self.analytic = analytic
        self.takagi = [np.asarray(b) for b in takagi]
        # elimination order: positive-P variables before condensate ones, whose
        # mutual block of D vanishes identically
        n = n_vars // 2
        wigner = {k for k in range(n_vars) if k % n < 2}
        self.orders = [np.array(sorted(range(len(b)), key=lambda i: (int(b[i]) in wigner, int(b[i]))))
                       for b in self.takagi]
        self.const_vars = np.asarray(const_vars, dtype=np.intp)
        self.analytic_vars = np.asarray(sorted(analytic), dtype=np.intp)
        self.analytic_bank = PolynomialBank([analytic[a] for a in sorted(analytic)], n_vars)
        self.n_channels = len(analytic) + sum(len(b) for b in self.takagi) + len(self.const_vars)

    @property
    def deterministic(self):
        return self.n_channels == 0

    def constant_factor(self, dconst):
        """Takagi factor of the constant block, or None when it vanishes."""
        if dconst is None or not len(self.const_vars):
            return None
        sub = dconst[self.const_vars[:, None], self.const_vars[None, :]]
        if not np.any(sub):
            return None
        return ffpe.takagi_factor(sub)

    def increment(self, x, dmat, dw, cfac=None):
        """d(x) @ dw for a batch; ``dmat`` is the interaction diffusion at x and
        ``cfac`` the constant-block factor."""
        out = np.zeros_like(x)
        col = 0
        if len(self.analytic):
            vals = self.analytic_bank(x)
            na = len(self.analytic_vars)
            out[:, self.analytic_vars] = vals * dw[:, col:col + na]
            col += na
        for block, order in zip(self.takagi, self.orders):
            m = len(block)
            sub = dmat[:, block[:, None], block[None, :]]
            d = ffpe.symmetric_factor(sub, order)
            out[:, block] += np.einsum("bij,bj->bi", d, dw[:, col:col + m])
            col += m
        if cfac is not None:
            m = len(self.const_vars)
            out[:, self.const_vars] += dw[:, col:col + m] @ cfac.T
        return out

    def factor(self, x, dmat, cfac=None):
        """Dense noise factor (n_vars x n_channels) for each row of ``x``."""
        x = np.atleast_2d(x)
        out = np.zeros((x.shape[0], self.n_vars, self.n_channels), dtype=complex)
        col = 0
        if len(self.analytic):
            vals = self.analytic_bank(x)
            for j, a in enumerate(self.analytic_vars):
                out[:, a, col + j] = vals[:, j]
            col += len(self.analytic_vars)
        for block, order in zip(self.takagi, self.orders):
            m = len(block)
            sub = dmat[:, block[:, None], block[None, :]]
            out[:, block[:, None], col + np.arange(m)[None, :]] = ffpe.symmetric_factor(sub, order)
            col += m
        if cfac is not None:
            m = len(self.const_vars)
            out[:, self.const_vars[:, None], col + np.arange(m)[None, :]] = cfac
        return out
