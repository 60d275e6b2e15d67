"""Named experiments: configuration, runners and CSV output.

Deterministic tables (``*.csv`` except ``runlog.csv`` and ``scaling.csv``)
hold no wall-clock data, so repeated single-worker runs are bit-identical.
"""

import csv
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from .boundary import Boundary, parse_curves
from .errors import ConfigError
from .fgt import fgt_apply, make_plan
from .problems import builtin_problem, inclusion_curves, inclusion_data, orbiting_reference
from .solvers import (BvpProblem, am_solve, boundary_tree, dirichlet_march,
                      evaluate_solution, relative_l2_error, spacetime_norm, write_run_log)
from .treegrid import GridFunction, QuadTree, build_resolving_tree, dump_grid

EXPERIMENTS = ("linear_periodic", "semilinear_am", "fujita", "dirichlet_bvp", "fgt_bench")

# {{{ configuration

_LIST_INT = "ints"
_LIST_FLOAT = "floats"


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; ``None`` means unset."""
    experiment: str = None
    eps: float = None
    dt: float = None
    n_steps: int = None
    final_time: float = None
    order: int = None
    orders: tuple = None
    step_counts: tuple = None
    scheme: str = None
    fgt_eps: float = None
    delta_f: float = None
    power: int = None
    geometry: str = None
    panels: int = None
    k: int = None
    sizes: tuple = None
    eps_list: tuple = None
    delta: float = None
    targets: int = None
    out: str = None
    workers: int = None
    seed: int = None
    snapshot_every: int = None


_TYPES = {
    "experiment": str, "eps": float, "dt": float, "n_steps": int, "final_time": float,
    "order": int, "orders": _LIST_INT, "step_counts": _LIST_INT, "scheme": str,
    "fgt_eps": float, "delta_f": float, "power": int, "geometry": str, "panels": int,
    "k": int, "sizes": _LIST_INT, "eps_list": _LIST_FLOAT, "delta": float, "targets": int,
    "out": str, "workers": int, "seed": int, "snapshot_every": int,
}

REQUIRED = {
    "linear_periodic": ("eps", "n_steps"),
    "semilinear_am": ("orders", "step_counts"),
    "fujita": ("dt",),
    "dirichlet_bvp": ("dt", "n_steps"),
    "fgt_bench": ("sizes", "eps_list"),
}

DEFAULTS = {
    "linear_periodic": dict(final_time=0.02, delta_f=1e-3, order=4, k=8),
    "semilinear_am": dict(final_time=0.2, eps=1e-12, fgt_eps=1e-13, k=8),
    "fujita": dict(order=4, fgt_eps=1e-7, eps=1e-6, power=2, k=8),
    "dirichlet_bvp": dict(scheme="predictor-corrector", eps=1e-10, fgt_eps=1e-12, k=8,
                          targets=200, panels=16),
    "fgt_bench": dict(delta=1e-3),
}


def _convert(key, text):
    kind = _TYPES[key]
    try:
        if kind is _LIST_INT:
            return tuple(int(v) for v in text.replace(",", " ").split())
        if kind is _LIST_FLOAT:
            return tuple(float(v) for v in text.replace(",", " ").split())
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config(text):
    """Parse ``key = value`` lines (``#`` comments) into an ExperimentConfig."""
    vals = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in vals:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        vals[key] = _convert(key, val)
    return ExperimentConfig(**vals)


def format_config(cfg):
    """Inverse of :func:`parse_config` for set fields."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            continue
        if isinstance(v, tuple):
            v = ", ".join(repr(a) for a in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def validate(cfg):
    """Check required fields and ranges; return a copy with defaults filled in."""
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {cfg.experiment!r}; "
                          f"choose from {', '.join(EXPERIMENTS)}")
    missing = [k for k in REQUIRED[cfg.experiment] if getattr(cfg, k) is None]
    if missing:
        raise ConfigError(f"{cfg.experiment} needs {', '.join(missing)}")
    vals = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for k, v in DEFAULTS[cfg.experiment].items():
        if vals[k] is None:
            vals[k] = v
    out = ExperimentConfig(**vals)
    for key in ("eps", "fgt_eps"):
        v = getattr(out, key)
        if v is not None and not 0 < v < 0.1:
            raise ConfigError(f"{key} must lie in (0, 0.1)")
    if out.eps_list is not None and not all(0 < v < 0.1 for v in out.eps_list):
        raise ConfigError("eps_list entries must lie in (0, 0.1)")
    for key in ("dt", "final_time", "delta_f", "delta"):
        v = getattr(out, key)
        if v is not None and not v > 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("n_steps", "workers", "snapshot_every", "panels", "targets"):
        v = getattr(out, key)
        if v is not None and v < 1:
            raise ConfigError(f"{key} must be >= 1")
    orders = out.orders or ((out.order,) if out.order is not None else ())
    if any(not 1 <= s <= 6 for s in orders):
        raise ConfigError("Adams-Moulton orders must lie in 1..6")
    if out.scheme is not None and out.scheme not in ("euler", "predictor-corrector"):
        raise ConfigError("scheme must be euler or predictor-corrector")
    if out.step_counts is not None and any(n < 1 for n in out.step_counts):
        raise ConfigError("step_counts must be positive")
    if out.sizes is not None and any(n < 1 for n in out.sizes):
        raise ConfigError("sizes must be positive")
    return out

# }}}


# {{{ output helpers

def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


HEADERS = {
    "steps_periodic": ("step", "time", "leaves", "max_abs_u"),
    "linear_summary": ("eps", "n_steps", "final_time", "max_leaves", "l2_error",
                       "rel_l2_error"),
    "am_errors": ("n_steps", "dt", "A2", "A3", "A4", "A5", "A6"),
    "am_ratios": ("n_steps", "A2", "A3", "A4", "A5", "A6"),
    "fujita_series": ("step", "time", "u_max", "leaves"),
    "fujita_summary": ("dt", "t_c", "u_c", "max_rel_deviation", "t_end", "u_end"),
    "bvp_steps": ("step", "time", "mu_norm2", "mu_spacetime", "ftilde_spacetime"),
    "bvp_summary": ("dt", "n_steps", "scheme", "rel_l2_error", "max_abs_error",
                    "max_mu_ratio"),
    "fgt_accuracy": ("eps", "n", "delta", "max_error", "q_total", "bound"),
    "fgt_scaling": ("n", "delta", "eps", "seconds"),
}


class _Snapshots:
    def __init__(self, out, every):
        self.every = every
        self.dir = os.path.join(out, "snapshots") if every else None
        if self.dir:
            os.makedirs(self.dir, exist_ok=True)

    def __call__(self, n, gf, tag="u"):
        if self.every and n % self.every == 0:
            with open(os.path.join(self.dir, f"{tag}_{n:06d}.grid"), "w") as fh:
                dump_grid(gf, fh)

# }}}


# {{{ runners

def _am_rows(log):
    return [(r["step"], r["time"], r["leaves"], r["max_abs_u"]) for r in log]


def run_linear_periodic(cfg, out):
    pr = builtin_problem("orbiting_gaussians", delta_f=cfg.delta_f)
    T, n = cfg.final_time, cfg.n_steps
    snap = _Snapshots(out, cfg.snapshot_every)
    fgt_eps = cfg.fgt_eps or min(1e-12, cfg.eps * 1e-3)

    def cb(st):
        snap(st.n, st.u)
    st = am_solve(pr, cfg.order, T / n, n, eps=cfg.eps, fgt_eps=fgt_eps, k=cfg.k,
                  callback=cb)
    u = st.u
    nodes = u.tree.leaf_nodes()
    ex = GridFunction(u.tree, orbiting_reference(nodes[..., 0], nodes[..., 1], st.t,
                                                 cfg.delta_f))
    err = (u - ex).l2_norm()
    max_leaves = max(r["leaves"] for r in st.log)
    write_csv(os.path.join(out, "steps.csv"), HEADERS["steps_periodic"], _am_rows(st.log))
    write_run_log(st.log, os.path.join(out, "runlog.csv"))
    summary = dict(eps=cfg.eps, n_steps=n, final_time=st.t, max_leaves=max_leaves,
                   l2_error=err, rel_l2_error=err / ex.l2_norm())
    write_csv(os.path.join(out, "summary.csv"), HEADERS["linear_summary"],
              [[summary[h] for h in HEADERS["linear_summary"]]])
    return summary


def semilinear_error(order, n_steps, final_time=0.2, eps=1e-12, fgt_eps=1e-13, k=8):
    """Relative L2 error of the manufactured semilinear problem at ``final_time``."""
    pr = builtin_problem("manufactured")
    # sixth-order errors reach 1e-10; looser solves and grids put a floor there
    st = am_solve(pr, order, final_time / n_steps, n_steps, eps=eps, fgt_eps=fgt_eps, k=k,
                  solve_tol=min(1e-12, 1e-3 * eps))
    return relative_l2_error(st.u, pr.exact, st.t), st


def run_semilinear_am(cfg, out):
    table = {}
    logs = []
    for s in cfg.orders:
        for n in cfg.step_counts:
            e, st = semilinear_error(s, n, cfg.final_time, cfg.eps, cfg.fgt_eps, cfg.k)
            table[s, n] = e
            logs.extend(dict(r, step=f"A{s}/N{n}/{r['step']}") for r in st.log)
    cols = (2, 3, 4, 5, 6)
    rows = [[n, cfg.final_time / n] + [table.get((s, n), "") for s in cols]
            for n in cfg.step_counts]
    write_csv(os.path.join(out, "errors.csv"), HEADERS["am_errors"], rows)
    ratios = []
    for a, b in zip(cfg.step_counts[:-1], cfg.step_counts[1:]):
        ratios.append([b] + [table[s, a] / table[s, b] if (s, a) in table else ""
                             for s in cols])
    write_csv(os.path.join(out, "ratios.csv"), HEADERS["am_ratios"], ratios)
    write_run_log(logs, os.path.join(out, "runlog.csv"))
    return dict(errors=table)


def plateau_fit(times, umax):
    """Plateau ``(t_c, u_c)`` at the minimum of ``umax`` and the largest relative
    deviation of the later samples from ``1/(1/u_c - (t - t_c))``."""
    times = np.asarray(times, dtype=float)
    umax = np.asarray(umax, dtype=float)
    i = int(np.argmin(umax))
    tc, uc = times[i], umax[i]
    model = 1.0 / (1.0 / uc - (times[i:] - tc))
    dev = np.where(model > 0, np.abs(umax[i:] / model - 1.0), np.inf)
    return float(tc), float(uc), float(dev.max())


def fujita_series(dt, order=4, eps=1e-6, fgt_eps=1e-7, power=2, k=8, factor=10.0,
                  callback=None):
    """``(times, umax, leaves, state)`` until ``max u >= factor * max u0``."""
    pr = builtin_problem("fujita", p=power)
    times, umax, leaves = [], [], []

    def cb(st):
        m = float(st.u.values.max())
        times.append(st.t)
        umax.append(m)
        leaves.append(len(st.u.tree.active))
        if callback is not None:
            callback(st)
        return m >= factor * umax[0]
    # the blow-up time of u' = u^2 from the initial maximum bounds the run
    limit = int(math.ceil(2.0 / dt))
    st = am_solve(pr, order, dt, limit, eps=eps, fgt_eps=fgt_eps, k=k, callback=cb)
    return np.array(times), np.array(umax), np.array(leaves), st


def run_fujita(cfg, out):
    snap = _Snapshots(out, cfg.snapshot_every)
    t, m, lv, st = fujita_series(cfg.dt, cfg.order, cfg.eps, cfg.fgt_eps, cfg.power, cfg.k,
                                 callback=lambda s: snap(s.n, s.u))
    write_csv(os.path.join(out, "umax.csv"), HEADERS["fujita_series"],
              [[n, t[n], m[n], lv[n]] for n in range(len(t))])
    write_run_log(st.log, os.path.join(out, "runlog.csv"))
    tc, uc, dev = plateau_fit(t, m)
    summary = dict(dt=cfg.dt, t_c=tc, u_c=uc, max_rel_deviation=dev, t_end=t[-1],
                   u_end=m[-1])
    write_csv(os.path.join(out, "summary.csv"), HEADERS["fujita_summary"],
              [[summary[h] for h in HEADERS["fujita_summary"]]])
    return summary


def inside_any(curves, points, n=2048):
    """True for points enclosed by any curve (even-odd rule on a fine polygon)."""
    points = np.atleast_2d(points)
    inside = np.zeros(len(points), dtype=bool)
    th = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    for c in curves:
        poly = c.position(th)
        x0, y0 = poly[:, 0], poly[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        px, py = points[:, 0, None], points[:, 1, None]
        cross = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= (np.sum(cross & (px < xi), axis=1) % 2).astype(bool)
    return inside


def inclusion_setup(curves, dt, eps=1e-10, k=8, scheme="predictor-corrector"):
    """Periodic-box problem outside ``curves`` with a resolved initial grid."""
    data, u0f, exact = inclusion_data(curves)
    bd = Boundary(curves, k=16)
    tree = boundary_tree(bd, dt, k, (0.0, 0.0), 0.5, periodic=True)
    tree, u0 = build_resolving_tree(u0f, eps, k=k, tree=tree)
    problem = BvpProblem(bd, data, u0=u0, exterior=True, periodic=True, exact=exact,
                         name="inclusions")
    return problem, tree


def domain_targets(curves, count, seed, margin=0.0):
    rng = np.random.default_rng(seed)
    pts = np.zeros((0, 2))
    while len(pts) < count:
        cand = rng.uniform(-0.5, 0.5, (4 * count, 2))
        pts = np.vstack([pts, cand[~inside_any(curves, cand)]])
    return pts[:count]


def run_dirichlet_bvp(cfg, out):
    if cfg.geometry:
        try:
            with open(cfg.geometry) as fh:
                curves = parse_curves(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read geometry {cfg.geometry}: {exc}") from exc
    else:
        curves = inclusion_curves(cfg.panels)
    problem, tree = inclusion_setup(curves, cfg.dt, cfg.eps, cfg.k, cfg.scheme)
    snap = _Snapshots(out, cfg.snapshot_every)
    rows = []

    def cb(st, setup):
        fr = setup.evaluator.frame(st.t)
        mu_st = spacetime_norm(st.density.slices, fr, cfg.dt)
        f_st = math.sqrt(cfg.dt * sum(st.ftilde))
        rows.append([st.n, st.t, st.log[-1]["mu_norm2"], mu_st, f_st])
        snap(st.n, st.far.v_fh, "far")
    st, setup = dirichlet_march(problem, cfg.dt, cfg.n_steps, scheme=cfg.scheme,
                                eps=cfg.fgt_eps, tree=tree, callback=cb)
    tg = domain_targets(curves, cfg.targets, cfg.seed or 0)
    u = evaluate_solution(st, setup, tg)
    ex = problem.exact(tg[:, 0], tg[:, 1], st.t)
    err = float(np.sqrt(np.mean((u - ex) ** 2) / np.mean(ex ** 2)))
    ratio = max((r[3] / r[4] for r in rows if r[4] > 0), default=0.0)
    write_csv(os.path.join(out, "steps.csv"), HEADERS["bvp_steps"], rows)
    write_run_log(st.log, os.path.join(out, "runlog.csv"))
    summary = dict(dt=cfg.dt, n_steps=cfg.n_steps, scheme=cfg.scheme, rel_l2_error=err,
                   max_abs_error=float(np.abs(u - ex).max()), max_mu_ratio=ratio)
    write_csv(os.path.join(out, "summary.csv"), HEADERS["bvp_summary"],
              [[summary[h] for h in HEADERS["bvp_summary"]]])
    return summary


def direct_gauss(sources, strengths, targets, delta, chunk=2048):
    """``sum_j q_j exp(-|x - y_j|^2 / delta)`` by direct summation."""
    out = np.empty(len(targets))
    for a in range(0, len(targets), chunk):
        d2 = ((targets[a:a + chunk, None, :] - sources[None, :, :]) ** 2).sum(-1)
        out[a:a + chunk] = np.exp(-d2 / delta) @ strengths
    return out


def run_fgt_bench(cfg, out):
    rng = np.random.default_rng(cfg.seed or 0)
    root = QuadTree.root((0.0, 0.0), 0.5, 8)
    acc = []
    n_acc = min(2000, min(cfg.sizes))
    y = rng.uniform(-0.5, 0.5, (n_acc, 2))
    q = rng.uniform(-1.0, 1.0, n_acc)
    ref = direct_gauss(y, q, y, cfg.delta)
    for e in cfg.eps_list:
        plan = make_plan(root, cfg.delta, e)
        _, v = fgt_apply(plan, charges=y, strengths=q, points=y)
        qt = float(np.abs(q).sum())
        acc.append([e, n_acc, cfg.delta, float(np.abs(v - ref).max()), qt, e * qt])
    write_csv(os.path.join(out, "accuracy.csv"), HEADERS["fgt_accuracy"], acc)
    scal = []
    e = min(cfg.eps_list)
    for n in cfg.sizes:
        pts = rng.uniform(-0.5, 0.5, (n, 2))
        plan = make_plan(root, cfg.delta, e)
        t0 = time.perf_counter()
        fgt_apply(plan, charges=pts, strengths=np.ones(n), points=pts)
        scal.append([n, cfg.delta, e, time.perf_counter() - t0])
    write_csv(os.path.join(out, "scaling.csv"), HEADERS["fgt_scaling"], scal)
    return dict(accuracy=acc, scaling=scal)


RUNNERS = {
    "linear_periodic": run_linear_periodic,
    "semilinear_am": run_semilinear_am,
    "fujita": run_fujita,
    "dirichlet_bvp": run_dirichlet_bvp,
    "fgt_bench": run_fgt_bench,
}


def run_experiment(cfg, out):
    """Validate ``cfg``, run it and write outputs under ``out``.

    A ``status.txt`` file records ``ok`` or the failure message so partial
    outputs are flagged.
    """
    cfg = validate(cfg)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    status = os.path.join(out, "status.txt")
    with open(status, "w") as fh:
        fh.write("running\n")
    try:
        summary = RUNNERS[cfg.experiment](cfg, out)
    except Exception as exc:
        with open(status, "w") as fh:
            fh.write(f"failed: {type(exc).__name__}: {exc}\n")
        raise
    with open(status, "w") as fh:
        fh.write("ok\n")
    return summary

# }}}
