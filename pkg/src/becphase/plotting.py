"""Figures written next to the numeric outputs (Agg backend, PNG)."""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _meta(config_hash=None):
    return {**_META, "Description": f"config_hash={config_hash}"} if config_hash else _META


def _save(fig, outdir, name, config_hash=None):
    fig.savefig(os.path.join(outdir, name), dpi=100, metadata=_meta(config_hash))
    plt.close(fig)
    return name


def ensemble_figures(outdir, config, setup, results, config_hash=None):
    files = []
    x = setup.basis.grid.x
    if "g1_diagonal" in results:
        fig, ax = plt.subplots(figsize=(6, 4))
        for res in results["g1_diagonal"]:
            dens = np.real(res.values)
            ax.plot(x, dens, lw=1, label=f"t = {res.time:g}")
            ax.fill_between(x, dens - res.errors, dens + res.errors, alpha=0.2)
        ax.set_xlabel("x")
        ax.set_ylabel("G1(x, x)")
        if len(results["g1_diagonal"]) <= 8:
            ax.legend(fontsize=7)
        files.append(_save(fig, outdir, "g1_density.png", config_hash))
    if "occupations" in results:
        occ = np.array([np.real(r.values) for r in results["occupations"]])
        err = np.array([r.errors for r in results["occupations"]])
        t = [r.time for r in results["occupations"]]
        fig, ax = plt.subplots(figsize=(6, 4))
        for k in range(occ.shape[1]):
            ax.errorbar(t, occ[:, k], yerr=err[:, k], lw=1, capsize=2, label=f"mode {k}")
        ax.set_xlabel("t")
        ax.set_ylabel("occupation")
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.legend(fontsize=6, ncol=2)
        files.append(_save(fig, outdir, "occupations.png", config_hash))
    if "imbalance" in results:
        res = results["imbalance"][0]
        t = [c[0] for c in res.coords]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.errorbar(t, np.real(res.values), yerr=res.errors, capsize=2)
        ax.set_xlabel("t")
        ax.set_ylabel("N_right - N_left")
        files.append(_save(fig, outdir, "imbalance.png", config_hash))
    return files


def comparison_figure(outdir, rows, config_hash=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    z = np.array([r["z"] for r in rows], dtype=float)
    z = np.clip(z, -10, 10)
    ax.plot(z, ".", ms=3)
    ax.axhline(3, color="k", lw=0.5)
    ax.axhline(-3, color="k", lw=0.5)
    ax.set_xlabel("observable index")
    ax.set_ylabel("z = (stochastic - exact) / SE")
    return [_save(fig, outdir, "comparison.png", config_hash)]


def mode_figure(outdir, basis, protocol, config_hash=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    x = basis.grid.x
    v = protocol.initial_potential(basis.grid)
    ax.plot(x, v, "k", lw=1)
    scale = 0.5 * (basis.energies[-1] - basis.energies[0] + 1) / max(basis.n_modes, 1)
    for k in range(basis.n_modes):
        ax.plot(x, basis.energies[k] + scale * 3 * np.real(basis.modes[k]), lw=1)
    ax.set_ylim(min(v.min(), basis.energies[0]) - 1, basis.energies[-1] + 2)
    ax.set_xlabel("x")
    ax.set_ylabel("energy / mode")
    return [_save(fig, outdir, "modes.png", config_hash)]


def excitation_curve(path, eps, p_exc, err=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(eps, p_exc, yerr=err, marker="o", capsize=2)
    ax.set_xlabel("tilt")
    ax.set_ylabel("P(excited)")
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
