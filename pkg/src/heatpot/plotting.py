"""Optional figures from experiment CSV outputs (needs matplotlib)."""

import csv
import importlib.util
import os

from .errors import ConfigError


def require_matplotlib():
    if importlib.util.find_spec("matplotlib") is None:
        raise ConfigError("--plot needs matplotlib (install the 'plot' extra)")


def _read(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _col(rows, key):
    return [float(r[key]) for r in rows if r.get(key) not in ("", None)]


def plot_experiment(name, out):
    """Write PNG figures for experiment ``name`` into ``out/figures``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    figdir = os.path.join(out, "figures")
    os.makedirs(figdir, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if name == "linear_periodic":
        rows = _read(os.path.join(out, "steps.csv"))
        ax.plot(_col(rows, "time"), _col(rows, "leaves"), "-o", ms=3)
        ax.set_xlabel("t")
        ax.set_ylabel("leaf boxes")
    elif name == "semilinear_am":
        rows = _read(os.path.join(out, "errors.csv"))
        for s in ("A2", "A3", "A4", "A5", "A6"):
            pts = [(float(r["dt"]), float(r[s])) for r in rows if r[s]]
            if pts:
                ax.loglog(*zip(*pts), "-o", ms=3, label=s)
        ax.set_xlabel("dt")
        ax.set_ylabel("relative L2 error")
        ax.legend()
    elif name == "fujita":
        rows = _read(os.path.join(out, "umax.csv"))
        ax.plot(_col(rows, "time"), _col(rows, "u_max"))
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("max u")
    elif name == "dirichlet_bvp":
        rows = _read(os.path.join(out, "steps.csv"))
        ax.plot(_col(rows, "time"), _col(rows, "mu_norm2"))
        ax.set_xlabel("t")
        ax.set_ylabel("density L2 norm")
    elif name == "fgt_bench":
        rows = _read(os.path.join(out, "scaling.csv"))
        ax.loglog(_col(rows, "n"), _col(rows, "seconds"), "-o")
        ax.set_xlabel("N")
        ax.set_ylabel("seconds")
    fig.tight_layout()
    path = os.path.join(figdir, f"{name}.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
