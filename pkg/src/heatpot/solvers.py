"""Time stepping: Adams-Moulton for periodic semilinear problems and
Volterra marching for Dirichlet problems.

Semilinear problems ``u_t = lap u + F(u, x, t)`` in the periodic box are
advanced by

    u_{n+1} = I[u_n](dt) + dt sum_i b_i I[F(u_{n+1-i})](i dt),

which is a scalar equation ``u = g + dt b_0 F(u, x, t_{n+1})`` at every grid
node.  Dirichlet problems use ``u = u_V + D[mu]``; the density follows from
the boundary condition, with the local part of ``D`` taken from the density
already known on ``[t_n, t_{n+1})``.

Forcing callables take ``(u, x1, x2, t)`` and act elementwise.
"""

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .boundary import Density, nearest_boundary_points
from .errors import InvalidArgument, InvalidState, OutOfDomain, StepFailure
from .fgt import extend_free_space_grid
from .potentials import (DensityHistory, HistoryState, LayerEvaluator, PotentialSplit,
                         advance_far_history, eval_layer_potential, initial_potential,
                         initial_potential_at, volume_potential_local)
from .treegrid import (GridFunction, QuadTree, balance, build_resolving_tree,
                       check_points, is_balanced, resolution_error, transfer)

log = logging.getLogger(__name__)

RUN_LOG_FIELDS = ("step", "time", "leaves", "max_abs_u", "mu_norm2", "wall_far",
                  "wall_near", "wall_local", "secant_iters")


# {{{ schemes

_AM_TABLE = {
    1: ("1",),
    2: ("1/2", "1/2"),
    3: ("5/12", "2/3", "-1/12"),
    4: ("9/24", "19/24", "-5/24", "1/24"),
    5: ("251/720", "646/720", "-264/720", "106/720", "-19/720"),
    6: ("475/1440", "1427/1440", "-798/1440", "482/1440", "-173/1440", "27/1440"),
}


@dataclass(frozen=True)
class AmScheme:
    """Adams-Moulton weights of order ``s``; ``b[0]`` multiplies the new step."""
    order: int

    def __post_init__(self):
        if self.order not in _AM_TABLE:
            raise InvalidArgument(f"Adams-Moulton order must be 1..6, got {self.order}")

    @property
    def exact(self):
        return tuple(Fraction(c) for c in _AM_TABLE[self.order])

    @property
    def b(self):
        return np.array([float(c) for c in self.exact])

# }}}


# {{{ scalar equations

def _residual(F, g, c, x1, x2, t):
    return lambda u: u - g - c * F(u, x1, x2, t)


def _secant(F, g, c, x1, x2, t, u0, u1, tol=1e-12, maxit=50):
    """Vectorized secant iteration; returns (u, converged, iterations)."""
    res = _residual(F, g, c, x1, x2, t)
    a = np.array(u0, dtype=float)
    b = np.array(u1, dtype=float)
    ra, rb = res(a), res(b)
    # keep the better guess in b
    swap = np.abs(ra) < np.abs(rb)
    a, b = np.where(swap, b, a), np.where(swap, a, b)
    ra, rb = np.where(swap, rb, ra), np.where(swap, ra, rb)
    done = np.abs(rb) <= tol * (1.0 + np.abs(b))
    its = 0
    while not done.all() and its < maxit:
        its += 1
        act = ~done
        d = rb[act] - ra[act]
        flat = (d == 0) | ~np.isfinite(d)
        step = np.where(flat, 0.0, rb[act] * (b[act] - a[act]) / np.where(flat, 1.0, d))
        new = b[act] - step
        a[act], ra[act] = b[act], rb[act]
        b[act] = new
        # residuals only at active nodes
        ix = np.flatnonzero(act.ravel())
        rb_flat = rb.ravel()
        rb_flat[ix] = _residual(F, np.ravel(g)[ix] if np.ndim(g) else g, c,
                                np.ravel(x1)[ix] if np.ndim(x1) else x1,
                                np.ravel(x2)[ix] if np.ndim(x2) else x2, t)(new.ravel())
        rb = rb_flat.reshape(rb.shape)
        ok = np.abs(rb) <= tol * (1.0 + np.abs(b))
        stuck = np.zeros_like(done)
        stuck[act] = flat
        done = done | ok | (stuck & ~np.isfinite(rb))
        if np.any(stuck & ~ok):
            # stalled secant: leave for the fallback
            done = done | (stuck & ~ok)
    conv = np.abs(rb) <= tol * (1.0 + np.abs(b))
    return b, conv & np.isfinite(b), its


def _bisect(F, g, c, x1, x2, t, center, tol=1e-12, doublings=4):
    """Bracket the root around ``center`` with a doubling half-width, then bisect."""
    res = _residual(F, g, c, x1, x2, t)
    half = np.maximum(np.abs(g - center) + np.abs(c * F(center, x1, x2, t)),
                      1e-3 * (1.0 + np.abs(center)))
    lo, hi = center - half, center + half
    rlo, rhi = res(lo), res(hi)
    for _ in range(doublings):
        miss = np.sign(rlo) * np.sign(rhi) > 0
        if not miss.any():
            break
        half = np.where(miss, 2.0 * half, half)
        lo, hi = center - half, center + half
        rlo, rhi = res(lo), res(hi)
    found = np.sign(rlo) * np.sign(rhi) <= 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        rm = res(mid)
        left = np.sign(rm) * np.sign(rlo) <= 0
        hi = np.where(left, mid, hi)
        rhi = np.where(left, rm, rhi)
        lo = np.where(left, lo, mid)
        rlo = np.where(left, rlo, rm)
        if np.all(np.abs(hi - lo) <= 1e-15 * (1.0 + np.abs(mid))):
            break
    u = 0.5 * (lo + hi)
    conv = found & (np.abs(res(u)) <= tol * (1.0 + np.abs(u)) + 1e-14 * np.abs(c) *
                    (1.0 + np.abs(F(u, x1, x2, t))))
    return u, conv


def solve_pointwise(F, g, c, x1, x2, t, u0, u1, tol=1e-12):
    """Solve ``u = g + c F(u, x, t)`` at every node; secant, then bisection.

    Returns
    -------
    u : ndarray
    iterations : int
        Secant iterations used.

    Raises
    ------
    StepFailure
        With the first failing node as ``location``.
    """
    g = np.asarray(g, dtype=float)
    x1 = np.broadcast_to(np.asarray(x1, dtype=float), g.shape)
    x2 = np.broadcast_to(np.asarray(x2, dtype=float), g.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        u, conv, its = _secant(F, g, c, x1, x2, t,
                               np.broadcast_to(u0, g.shape), np.broadcast_to(u1, g.shape), tol)
        if not conv.all():
            bad = ~conv
            center = np.broadcast_to(np.asarray(u0, dtype=float), g.shape)[bad]
            ub, cb = _bisect(F, g[bad], c, x1[bad], x2[bad], t, center, tol)
            u = u.copy()
            u[bad] = ub
            if not cb.all():
                i = np.flatnonzero(bad.ravel())[np.flatnonzero(~cb)[0]]
                loc = (float(x1.ravel()[i]), float(x2.ravel()[i]))
                raise StepFailure(f"scalar solve failed at x={loc} t={t:g}", loc)
    return u, its


def secant_solve(g_val, c, F, x, t, u_guess0, u_guess1):
    """Root of ``u - g_val - c F(u, x, t)`` by the secant method.

    Parameters
    ----------
    g_val : float or ndarray
    c : float
        ``dt * b_0``.
    F : callable
        ``F(u, x1, x2, t)``.
    x : array_like, shape (..., 2)
    t : float
    u_guess0, u_guess1 : float or ndarray

    Raises
    ------
    StepFailure
        If the iteration stalls or diverges within 50 iterations.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g_val, dtype=float)
    shape = np.broadcast_shapes(g.shape, x.shape[:-1])
    g = np.broadcast_to(g, shape)
    x1 = np.broadcast_to(x[..., 0], shape)
    x2 = np.broadcast_to(x[..., 1], shape)
    with np.errstate(over="ignore", invalid="ignore"):
        u, conv, _ = _secant(F, g, c, x1, x2, t, np.broadcast_to(u_guess0, shape),
                             np.broadcast_to(u_guess1, shape))
    if not np.all(conv):
        i = int(np.flatnonzero(~np.ravel(conv))[0])
        loc = (float(np.ravel(x1)[i]), float(np.ravel(x2)[i]))
        raise StepFailure("secant iteration did not converge", loc)
    return u if u.ndim else float(u)

# }}}


# {{{ state

@dataclass
class PeriodicProblem:
    """``u_t = lap u + F(u, x, t)`` in a periodic box.

    ``u0(x1, x2)`` and ``forcing(u, x1, x2, t)`` act elementwise; ``exact``,
    when known, is ``exact(x1, x2, t)``.
    """
    u0: object
    forcing: object
    exact: object = None
    center: tuple = (0.0, 0.0)
    halfwidth: float = 0.5
    name: str = ""


@dataclass
class BvpProblem:
    """Boundary value problem for the heat equation.

    Parameters
    ----------
    boundary : Boundary
    condition : {"dirichlet", "neumann", "robin"}
    data : callable
        ``f(x1, x2, t)`` on the boundary (Dirichlet ``f``, Neumann ``g``,
        Robin ``h``).
    alpha : float or callable, optional
        Robin coefficient.
    u0 : GridFunction, optional
        Initial data (on a periodic tree, or a free-space tree that has been
        extended).  Zero when omitted.
    forcing : callable, optional
        ``F(x1, x2, t)``.
    exterior : bool
        Solve outside the curves instead of inside.
    periodic : bool
        Periodic box with inclusions (``box_center``/``box_halfwidth``).
    exact : callable, optional
        ``u(x1, x2, t)`` for error reports.
    """
    boundary: object
    data: object
    condition: str = "dirichlet"
    alpha: object = None
    u0: object = None
    forcing: object = None
    exterior: bool = False
    periodic: bool = False
    box_center: tuple = (0.0, 0.0)
    box_halfwidth: float = 0.5
    exact: object = None
    name: str = ""

    def __post_init__(self):
        if self.condition not in ("dirichlet", "neumann", "robin"):
            raise InvalidArgument(f"unknown boundary condition {self.condition!r}")
        if self.condition == "robin" and self.alpha is None:
            raise InvalidArgument("robin conditions need alpha")

    @property
    def side(self):
        """+1 for exterior problems, -1 for interior ones."""
        return 1.0 if self.exterior else -1.0

    def check_compatibility(self, tol=1e-6, eps=1e-12):
        """Largest ``|f(x, 0) - u0(x)|`` over boundary nodes; warns above ``tol``."""
        if self.condition != "dirichlet":
            return 0.0
        fr = self.boundary.frame(0.0)
        x = fr.flat("nodes")
        f0 = self.data(x[:, 0], x[:, 1], 0.0)
        u0 = np.zeros(len(x)) if self.u0 is None else self.u0(x)
        gap = float(np.max(np.abs(f0 - u0))) if len(x) else 0.0
        if gap > tol:
            warnings.warn(f"boundary data and initial data differ by {gap:.2e} at t=0")
        return gap


@dataclass
class SolverState:
    """Everything carried from one step to the next.

    ``forcing`` holds ``F(u_j)`` newest first; Dirichlet marches use
    ``far``, ``density`` and ``volume``.
    """
    t: float
    n: int
    u: GridFunction = None
    forcing: list = field(default_factory=list)
    far: HistoryState = None
    density: DensityHistory = None
    volume: GridFunction = None
    log: list = field(default_factory=list)

    @property
    def tree(self):
        if self.u is not None:
            return self.u.tree
        return None if self.far is None else self.far.tree

# }}}


# {{{ adams-moulton

def _field_scale(values):
    return max(1.0, float(np.abs(values).max())) if np.size(values) else 1.0


def _solve_at(points, g_gf, F, c, t, tol=1e-12):
    """Solve the scalar equation at arbitrary points with ``g`` interpolated."""
    gv = g_gf(points)
    x1, x2 = points[..., 0], points[..., 1]
    u1 = gv + c * F(gv, x1, x2, t)
    u, its = solve_pointwise(F, gv, c, x1, x2, t, gv, u1, tol)
    return u, F(u, x1, x2, t), its


def spatial_adapt(g, u, Fu, F, t, c, eps, max_depth=12, solve_tol=1e-12):
    """Refine and coarsen the tree of ``u`` for the equation ``u = g + c F(u)``.

    Parameters
    ----------
    g : GridFunction
        Known part, assumed resolved on its own tree.
    u, Fu : GridFunction
        Solution and forcing values on the same tree as ``g``.
    F : callable
    t, c : float
    eps : float
        E_2 tolerance, relative to ``max(1, max|field|)`` for each field.
    solve_tol : float
        Relative residual for the scalar solves on new nodes.

    Returns
    -------
    u, Fu : GridFunction
        On the adapted, balanced tree.
    info : dict
        ``refined``, ``coarsened`` counts and secant iterations.
    """
    tree = u.tree
    su, sf = _field_scale(u.values), _field_scale(Fu.values)
    vals_u = {int(b): u.values[n] for n, b in enumerate(tree.active)}
    vals_f = {int(b): Fu.values[n] for n, b in enumerate(tree.active)}
    todo = tree.active
    refined = 0
    its_max = 0
    # step 1: refinement against solved check-grid values
    while len(todo):
        chk = check_points(tree, todo)
        uc, fc, its = _solve_at(chk, g, F, c, t, solve_tol)
        its_max = max(its_max, its)
        eu = resolution_error(np.stack([vals_u[int(b)] for b in todo]), uc)
        ef = resolution_error(np.stack([vals_f[int(b)] for b in todo]), fc)
        su = max(su, _field_scale(uc))
        sf = max(sf, _field_scale(fc))
        bad = todo[(eu > eps * su) | (ef > eps * sf)]
        if len(bad) == 0:
            break
        if np.any(tree.level[bad] >= max_depth):
            raise StepFailure("spatial refinement exceeded the depth limit",
                              tuple(tree.box_center(bad[tree.level[bad] >= max_depth][:1])[0]))
        n0 = tree.n_boxes
        tree = tree.refined(bad)
        refined += len(bad)
        todo = np.arange(n0, tree.n_boxes)
        nodes = tree.leaf_nodes(todo)
        un, fn, its = _solve_at(nodes, g, F, c, t, solve_tol)
        its_max = max(its_max, its)
        for n, b in enumerate(todo):
            vals_u[int(b)], vals_f[int(b)] = un[n], fn[n]
    tree = _balanced_with_values(tree, vals_u, vals_f, g, F, c, t, solve_tol)

    # step 2: coarsening, finest level first
    coarsened = 0
    while True:
        act = np.zeros(tree.n_boxes, dtype=bool)
        act[tree.active] = True
        ch = tree.children
        cand = np.flatnonzero(np.all(ch >= 0, axis=1) & np.all(act[np.maximum(ch, 0)], axis=1))
        if len(cand) == 0:
            break
        top = tree.level[cand].max()
        cand = cand[tree.level[cand] == top]
        nodes = tree.leaf_nodes(cand)
        up, fp, _ = _solve_at(nodes, g, F, c, t, solve_tol)
        chk = check_points(tree, cand)
        gu = GridFunction(tree, np.stack([vals_u[int(b)] for b in tree.active]))
        gfv = GridFunction(tree, np.stack([vals_f[int(b)] for b in tree.active]))
        ok = ((resolution_error(up, gu(chk)) <= eps * su)
              & (resolution_error(fp, gfv(chk)) <= eps * sf))
        if not ok.any():
            break
        merge = cand[ok]
        new, old_to_new = tree.coarsened(merge)
        if not is_balanced(new):
            # undo merges that would break level restriction
            merge = _balance_safe(tree, merge)
            if len(merge) == 0:
                break
            new, old_to_new = tree.coarsened(merge)
        pos = {int(b): i for i, b in enumerate(cand)}
        nu, nf = {}, {}
        for b in tree.active:
            nb = int(old_to_new[b])
            if nb >= 0:
                nu[nb], nf[nb] = vals_u[int(b)], vals_f[int(b)]
        for b in merge:
            nb = int(old_to_new[b])
            nu[nb], nf[nb] = up[pos[int(b)]], fp[pos[int(b)]]
        tree, vals_u, vals_f = new, nu, nf
        coarsened += len(merge)
    uo = GridFunction(tree, np.stack([vals_u[int(b)] for b in tree.active]))
    fo = GridFunction(tree, np.stack([vals_f[int(b)] for b in tree.active]))
    return uo, fo, {"refined": refined, "coarsened": coarsened, "secant_iters": its_max}


def _balanced_with_values(tree, vals_u, vals_f, g, F, c, t, solve_tol=1e-12):
    """Balance ``tree``, solving the scalar equation on every new leaf."""
    while True:
        n0 = tree.n_boxes
        new = balance(tree)
        if new is tree or new.n_boxes == n0:
            return new
        fresh = [b for b in new.active if int(b) not in vals_u]
        if fresh:
            fresh = np.array(fresh)
            un, fn, _ = _solve_at(new.leaf_nodes(fresh), g, F, c, t, solve_tol)
            for n, b in enumerate(fresh):
                vals_u[int(b)], vals_f[int(b)] = un[n], fn[n]
        tree = new


def _balance_safe(tree, merge):
    """Subset of ``merge`` that keeps the tree level-restricted, found greedily."""
    keep = []
    for b in merge:
        trial, _ = tree.coarsened(keep + [int(b)])
        if is_balanced(trial):
            keep.append(int(b))
    return np.array(keep, dtype=np.int64)


def _forcing_grid(F, u, t):
    nodes = u.tree.leaf_nodes()
    return GridFunction(u.tree, F(u.values, nodes[..., 0], nodes[..., 1], t))


def am_step(state, F, scheme, dt, eps, fgt_eps=1e-12, adapt=True, solve_tol=1e-12):
    """Advance a periodic semilinear state by one Adams-Moulton step.

    Parameters
    ----------
    state : SolverState
        ``state.u`` is ``u_n``; ``state.forcing`` holds ``F(u_n), F(u_{n-1}),
        ...`` (at least ``s - 1`` of them).
    F : callable
        ``F(u, x1, x2, t)``.
    scheme : AmScheme
    dt : float
    eps : float
        Spatial tolerance for :func:`spatial_adapt`.
    fgt_eps : float
        Gauss transform tolerance.
    solve_tol : float
        Relative residual at which the node-wise scalar solves stop.

    Returns
    -------
    SolverState
    """
    s = scheme.order
    b = scheme.b
    if len(state.forcing) < s - 1:
        raise InvalidState(f"order {s} needs {s - 1} past forcing fields, "
                           f"have {len(state.forcing)}")
    u = state.u
    tree = u.tree
    t_new = state.t + dt
    t0 = time.perf_counter()
    src = u if s == 1 else u + state.forcing[0] * (dt * b[1])
    g = initial_potential(src, dt, fgt_eps, periodic=True, target_tree=tree)
    for i in range(2, s):
        g = g + initial_potential(state.forcing[i - 1], i * dt, fgt_eps, periodic=True,
                                  target_tree=tree) * (dt * b[i])
    t1 = time.perf_counter()
    c = dt * b[0]
    nodes = tree.leaf_nodes()
    x1, x2 = nodes[..., 0], nodes[..., 1]
    guess1 = g.values + c * F(u.values, x1, x2, state.t)
    un, its = solve_pointwise(F, g.values, c, x1, x2, t_new, u.values, guess1, solve_tol)
    u_new = GridFunction(tree, un)
    f_new = GridFunction(tree, F(un, x1, x2, t_new))
    info = {"refined": 0, "coarsened": 0, "secant_iters": its}
    if adapt:
        u_new, f_new, info = spatial_adapt(g, u_new, f_new, F, t_new, c, eps,
                                           solve_tol=solve_tol)
        info["secant_iters"] = max(its, info["secant_iters"])
    t2 = time.perf_counter()
    keep = max(s - 1, 0)
    new = SolverState(t_new, state.n + 1, u_new, ([f_new] + state.forcing)[:keep],
                      log=state.log)
    new.log.append({"step": new.n, "time": t_new, "leaves": len(u_new.tree.active),
                    "max_abs_u": u_new.max_abs(), "mu_norm2": "",
                    "wall_far": t1 - t0, "wall_near": 0.0, "wall_local": t2 - t1,
                    "secant_iters": info["secant_iters"]})
    return new


def initial_grid(problem, eps, k=8, min_level=1, t=0.0):
    """Tree resolving ``u0`` and ``F(u0, ., 0)`` to ``eps`` (relative to max(1, max|.|))."""
    u0 = problem.u0
    tree, gu = build_resolving_tree(u0, eps, k=k, center=problem.center,
                                    halfwidth=problem.halfwidth, periodic=True,
                                    min_level=min_level)
    scale = _field_scale(gu.values)
    tree, gu = build_resolving_tree(u0, eps * scale, k=k, tree=tree)
    f0 = lambda a, b: problem.forcing(u0(a, b), a, b, t)
    nodes = tree.leaf_nodes()
    fs = _field_scale(f0(nodes[..., 0], nodes[..., 1]))
    tree, _ = build_resolving_tree(f0, eps * fs, k=k, tree=tree)
    return GridFunction.from_function(tree, u0)


def _richardson_weights(levels, powers):
    h = 2.0 ** -np.arange(levels)
    a = np.vstack([np.ones(levels)] + [h ** p for p in powers])
    rhs = np.zeros(levels)
    rhs[0] = 1.0
    return np.linalg.solve(a, rhs)


def richardson_bootstrap(problem, s, dt, eps=1e-10, fgt_eps=1e-12, k=8, u0=None,
                         adapt=True, solve_tol=1e-12):
    """Starting values ``u_1 .. u_{s-1}`` from extrapolated AM2 runs.

    AM2 (trapezoidal in the Duhamel integral, exact in space) has an error
    expansion in even powers of ``dt``; runs at ``dt, dt/2, ...`` are
    combined to remove the ``dt^2, dt^4, ...`` terms until the error is
    ``O(dt^s)``.

    Returns
    -------
    list of GridFunction
        Empty for ``s <= 2``.
    """
    if s <= 2:
        return []
    levels = (s - 1) // 2 + 1
    powers = [2 * j for j in range(1, levels)]
    w = _richardson_weights(levels, powers)
    if u0 is None:
        u0 = initial_grid(problem, eps, k)
    am2 = AmScheme(2)
    runs = []
    for lev in range(levels):
        m = 2 ** lev
        h = dt / m
        st = SolverState(0.0, 0, u0, [_forcing_grid(problem.forcing, u0, 0.0)])
        out = []
        for step in range(1, (s - 1) * m + 1):
            st = am_step(st, problem.forcing, am2, h, eps, fgt_eps, adapt, solve_tol)
            if step % m == 0:
                out.append(st.u)
        runs.append(out)
    result = []
    for j in range(s - 1):
        base = runs[0][j]
        nodes = base.tree.leaf_nodes()
        vals = w[0] * base.values
        for lev in range(1, levels):
            vals = vals + w[lev] * runs[lev][j](nodes)
        result.append(GridFunction(base.tree, vals))
    return result


def am_solve(problem, scheme, dt, n_steps, eps=1e-10, fgt_eps=1e-12, k=8, adapt=True,
             callback=None, bootstrap=True, solve_tol=1e-12):
    """Adams-Moulton marching to ``n_steps * dt``.

    Parameters
    ----------
    problem : PeriodicProblem
    scheme : AmScheme or int
    callback : callable, optional
        ``callback(state)`` after every step; returning True stops the run.
    bootstrap : bool
        Use Richardson-extrapolated AM2 starting values (else the exact
        solution, which must be available).
    solve_tol : float
        Relative residual for the node-wise scalar solves.

    Returns
    -------
    SolverState
    """
    if isinstance(scheme, int):
        scheme = AmScheme(scheme)
    s = scheme.order
    u0 = initial_grid(problem, eps, k)
    F = problem.forcing
    if s > 2:
        if bootstrap:
            starts = richardson_bootstrap(problem, s, dt, eps, fgt_eps, k, u0, adapt,
                                          solve_tol)
        else:
            if problem.exact is None:
                raise InvalidArgument("exact starting values need problem.exact")
            starts = [GridFunction.from_function(u0.tree, lambda a, b, j=j:
                                                 problem.exact(a, b, j * dt))
                      for j in range(1, s - 1 + 1)]
    else:
        starts = []
    # short runs end inside the starting values
    us = ([u0] + starts)[:max(n_steps, 0) + 1]
    hist = [_forcing_grid(F, u, j * dt) for j, u in enumerate(us)]
    keep = max(s - 1, 0)
    st = SolverState((len(us) - 1) * dt, len(us) - 1, us[-1], hist[::-1][:keep])
    for j, u in enumerate(us):
        st.log.append({"step": j, "time": j * dt, "leaves": len(u.tree.active),
                       "max_abs_u": u.max_abs(), "mu_norm2": "", "wall_far": 0.0,
                       "wall_near": 0.0, "wall_local": 0.0, "secant_iters": 0})
    if callback is not None:
        for j, u in enumerate(us):
            if callback(SolverState(j * dt, j, u, log=st.log)):
                return st
    for _ in range(st.n, n_steps):
        st = am_step(st, F, scheme, dt, eps, fgt_eps, adapt, solve_tol)
        if callback is not None and callback(st):
            break
    return st


def relative_l2_error(u, exact, t):
    """``||u - exact|| / ||exact||`` in L2 over the grid."""
    ex = GridFunction.from_function(u.tree, lambda a, b: exact(a, b, t))
    return (u - ex).l2_norm() / ex.l2_norm()

# }}}


# {{{ dirichlet marching

def boundary_tree(boundary, dt, k=8, center=(0.0, 0.0), halfwidth=None, periodic=False,
                  t=0.0, factor=1.0, tree=None):
    """Tree whose leaves near the boundary have side <= ``factor * sqrt(dt)``.

    Leaves within one side length of a boundary node are refined; the
    result is balanced.
    """
    fr = boundary.frame(t)
    x = fr.flat("nodes")
    if tree is None:
        if halfwidth is None:
            span = np.abs(x - np.asarray(center)).max()
            halfwidth = 2.0 ** math.ceil(math.log2(1.25 * span))
        tree = QuadTree.root(center, halfwidth, k, periodic)
    target = factor * math.sqrt(dt)
    while True:
        leaves = tree.leaves
        side = tree.side(tree.level[leaves])
        big = leaves[side > target]
        if len(big) == 0:
            break
        c = tree.box_center(big)
        hw = 0.5 * tree.side(tree.level[big])
        near = np.zeros(len(big), dtype=bool)
        for a in range(0, len(x), 4096):
            d = np.abs(x[None, a:a + 4096, :] - c[:, None, :]).max(axis=-1)
            near |= np.any(d <= 2.0 * hw[:, None], axis=1)
        if not near.any():
            break
        tree = tree.refined(big[near])
    return balance(tree)


@dataclass
class MarchSetup:
    """Objects shared by all steps of a Dirichlet march."""
    problem: BvpProblem
    evaluator: LayerEvaluator
    split: PotentialSplit
    scheme: str
    dt: float
    eps: float
    n_near_grid: int
    adapt: bool


def _volume_at(problem, state, t, points, eps):
    """``u_V(points, t)``: propagated initial data plus the volume potential."""
    if state.volume is not None:
        return state.volume(points)
    if problem.u0 is None:
        return np.zeros(len(points))
    if t <= 0:
        return problem.u0(points)
    return initial_potential_at(problem.u0, t, points, eps, problem.periodic)


def _advance_volume(problem, state, dt, eps):
    """March the grid volume field when there is a forcing term."""
    if problem.forcing is None:
        return None
    vol = state.volume
    tree = vol.tree
    nodes = tree.leaf_nodes()
    f_now = GridFunction(tree, problem.forcing(nodes[..., 0], nodes[..., 1], state.t + dt))
    f_prev = GridFunction(tree, problem.forcing(nodes[..., 0], nodes[..., 1], state.t))
    prop = initial_potential(vol, dt, eps, problem.periodic)
    return prop + volume_potential_local(f_now, f_prev, dt, eps, problem.periodic)


def _density_norm(frame, mu):
    return Density(mu).norm2(frame)


def dirichlet_march(problem, dt, steps, scheme="euler", split=None, eps=1e-10,
                    tree=None, k=8, n_near_grid=8, adapt=False, callback=None,
                    state=None, evaluator=None, extend=True):
    """March the Dirichlet problem ``u = f`` on the boundary.

    Parameters
    ----------
    problem : BvpProblem
    dt : float
        Time step; also the splitting parameter ``delta``.
    steps : int
    scheme : {"euler", "predictor-corrector"}
        Euler holds the density constant on ``[t_n, t_{n+1})``; the
        predictor-corrector re-evaluates with the linear profile through
        the Euler prediction.
    split : PotentialSplit, optional
        Defaults to ``PotentialSplit.for_tolerance(dt, eps)``.
    eps : float
        Gauss transform tolerance.
    tree : QuadTree, optional
        Grid for the far history and the volume field.  Built by
        :func:`boundary_tree` when omitted.
    extend : bool
        Embed the tree in a larger free-space box sized for ``steps * dt``.
    callback : callable, optional
        ``callback(state, setup)`` after every step; True stops the run.
    state : SolverState, optional
        Continue from a previous march.

    Returns
    -------
    state : SolverState
        ``state.density`` holds the density history, ``state.far`` the far
        history at ``state.t``.
    setup : MarchSetup
    """
    if problem.condition != "dirichlet":
        raise InvalidArgument("only Dirichlet problems are marched")
    if scheme not in ("euler", "predictor-corrector"):
        raise InvalidArgument(f"unknown scheme {scheme!r}")
    if dt <= 0 or steps < 0:
        raise InvalidArgument("need dt > 0 and steps >= 0")
    if dt > 1:
        warnings.warn("dt > 1 is outside the proven stability range")
    if split is None:
        split = PotentialSplit.for_tolerance(dt, max(eps, 1e-13))
    if abs(split.delta - dt) > 1e-14 * dt:
        raise InvalidArgument("the splitting delta must equal dt")
    bd = problem.boundary
    width = 2.0 * problem.box_halfwidth if problem.periodic else None
    if evaluator is None:
        evaluator = LayerEvaluator(bd, eps=min(eps, 1e-12), periodic_width=width)
    setup = MarchSetup(problem, evaluator, split, scheme, dt, eps, n_near_grid, adapt)
    if state is None:
        state = _initial_march_state(problem, dt, steps, scheme, eps, tree, k, extend)
    for _ in range(steps):
        state = dirichlet_step(state, setup)
        if callback is not None and callback(state, setup):
            break
    return state, setup


def _initial_march_state(problem, dt, steps, scheme, eps, tree, k, extend=True):
    bd = problem.boundary
    if tree is None:
        if problem.periodic:
            tree = boundary_tree(bd, dt, k, problem.box_center, problem.box_halfwidth, True)
        else:
            tree = boundary_tree(bd, dt, k)
    if not problem.periodic and tree.periodic:
        raise InvalidArgument("free-space problems need a non-periodic tree")
    if not problem.periodic and extend:
        # room for the far history to spread over the whole run
        tree = extend_free_space_grid(tree, max(steps, 1) * dt + dt, max(eps, 1e-14))
    tree = tree.with_empty(np.zeros(tree.n_boxes, dtype=bool))
    interp = "constant" if scheme == "euler" else "linear"
    hist = DensityHistory(0.0, dt, interp)
    vol = None
    if problem.forcing is not None:
        vol = (problem.u0 if problem.u0 is not None else GridFunction.zeros(tree))
        if vol.tree is not tree:
            vol = transfer(vol, tree)
    state = SolverState(0.0, 0, far=HistoryState.zeros(tree, 0.0), density=hist,
                        volume=vol)
    fr = bd.frame(0.0)
    x = fr.flat("nodes")
    ftil = problem.data(x[:, 0], x[:, 1], 0.0) - _volume_at(problem, state, 0.0, x, eps)
    # no layer potential yet: the condition alone fixes mu_0
    mu0 = (2.0 * problem.side * ftil).reshape(fr.n_panels, fr.k)
    hist.append(mu0)
    state.log.append(_march_row(0, 0.0, tree, fr, mu0, 0.0, 0.0, 0.0))
    state.ftilde = [float(np.sum(ftil.reshape(fr.n_panels, fr.k) ** 2 * fr.weights))]
    return state


def _march_row(n, t, tree, frame, mu, wf, wn, wl):
    return {"step": n, "time": t, "leaves": len(tree.active), "max_abs_u": "",
            "mu_norm2": _density_norm(frame, mu), "wall_far": wf, "wall_near": wn,
            "wall_local": wl, "secant_iters": ""}


def dirichlet_step(state, setup):
    """One marching step from ``state.t`` to ``state.t + dt``."""
    problem, dt, eps = setup.problem, setup.dt, setup.eps
    ev, split, hist = setup.evaluator, setup.split, state.density
    t_new = state.t + dt
    n_new = state.n + 1
    t0 = time.perf_counter()
    far = advance_far_history(state.far, ev, hist, dt, eps, kernels=("double",),
                              n_nodes=setup.n_near_grid, adapt=setup.adapt,
                              periodic=problem.periodic)
    vol = _advance_volume(problem, state, dt, eps)
    t1 = time.perf_counter()
    nxt = SolverState(t_new, n_new, far=far, density=hist, volume=vol, log=state.log)
    nxt.ftilde = getattr(state, "ftilde", [])
    fr = ev.frame(t_new)
    x = fr.flat("nodes")
    ftil = problem.data(x[:, 0], x[:, 1], t_new) - _volume_at(problem, nxt, t_new, x, eps)
    s = problem.side
    if setup.scheme == "euler":
        d = eval_layer_potential(far, ev, hist, split, t_new, kernel="double", on_surface=True)
        mu = 2.0 * s * (ftil - d)
        hist.append(mu.reshape(fr.n_panels, fr.k))
    else:
        # predictor: constant extension of the last slice reproduces Euler
        hist.append(hist.slices[-1].copy())
        d = eval_layer_potential(far, ev, hist, split, t_new, kernel="double", on_surface=True)
        hist.slices[-1] = (2.0 * s * (ftil - d)).reshape(fr.n_panels, fr.k)
        d = eval_layer_potential(far, ev, hist, split, t_new, kernel="double", on_surface=True)
        hist.slices[-1] = (2.0 * s * (ftil - d)).reshape(fr.n_panels, fr.k)
    t2 = time.perf_counter()
    nxt.ftilde.append(float(np.sum(ftil.reshape(fr.n_panels, fr.k) ** 2 * fr.weights)))
    nxt.log.append(_march_row(n_new, t_new, far.tree, fr, hist.slices[-1], t1 - t0,
                              0.0, t2 - t1))
    return nxt


def evaluate_solution(state, setup, targets, on_surface=False, tol=1e-12):
    """``u = u_V + D[mu]`` at ``state.t``.

    Parameters
    ----------
    state : SolverState
        From :func:`dirichlet_march`.
    setup : MarchSetup
    targets : ndarray, shape (m, 2)
        Points off the boundary.  With ``on_surface`` the boundary nodes are
        used and the limit from the solution domain is returned.

    Raises
    ------
    OutOfDomain
        A target lies on the boundary (ambiguous limit) without
        ``on_surface``.
    """
    problem, ev, split = setup.problem, setup.evaluator, setup.split
    t = state.t
    fr = ev.frame(t)
    hist = state.density
    if on_surface:
        x = fr.flat("nodes")
        d = eval_layer_potential(state.far, ev, hist, split, t, kernel="double",
                                 on_surface=True)
        mu = hist.at(t) if hist.interp != "constant" else hist.slices[-1]
        # limit from the solution side: D_pv + s mu / 2
        return _volume_at(problem, state, t, x, setup.eps) + d + 0.5 * problem.side * mu.ravel()
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    scale = max(1.0, float(np.abs(fr.flat("nodes")).max()))
    nb = nearest_boundary_points(fr, targets, 1e3 * tol * scale, ev.periodic_width)
    if len(nb.target) and np.any(np.abs(nb.offset) <= tol * scale):
        raise OutOfDomain("target on the boundary: the limit is ambiguous; "
                          "use on_surface=True")
    # the march stores the density at t on the step's right end
    d = eval_layer_potential(state.far, ev, hist, split, t, targets, kernel="double")
    return _volume_at(problem, state, t, targets, setup.eps) + d


def write_run_log(rows, path):
    """Write run-log rows (dicts with :data:`RUN_LOG_FIELDS`) as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUN_LOG_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def spacetime_norm(values, frame, dt):
    """Discrete L2 norm over boundary x time of a list of nodal slices."""
    return math.sqrt(dt * sum(float(np.sum(np.asarray(v).reshape(frame.weights.shape) ** 2
                                           * frame.weights)) for v in values))

# }}}
