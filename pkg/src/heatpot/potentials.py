"""Initial, volume and layer heat potentials.

Layer potentials at time ``t`` are split in time into a local part over
``[t - delta, t]``, a near history over ``[t - 2 delta, t - delta]`` and a far
history over ``[0, t - 2 delta]``.

* The local part is an asymptotic expansion over ``[t - eps, t]`` plus a
  Gauss-Legendre rule in ``u = -log(t - tau)`` over ``[t - delta, t - eps]``.
  Every node of that rule is a boundary Gauss transform with
  ``delta_g = 4 (t - tau)``.
* The near history uses the same graded rule over its own window.
* The far history is a grid field advanced by one initial potential per step:
  ``far(t + delta) = I[far(t) + near(., t)](delta)``.

Kernels are normalized so that ``G(x, t) = exp(-|x|^2/4t) / (4 pi t)``; the
double layer uses the outward normal ``nu_y``.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import sparse
from scipy.special import erfc

from .boundary import (_node_to_coeff, boundary_fgt_matrix, gauss_legendre,
                       nearest_boundary_points)
from .errors import InvalidArgument, InvalidState
from .fgt import fgt_apply, make_plan
from .treegrid import GridFunction, balance, coarsen_resolved, tail_error

SQRT_PI = math.sqrt(math.pi)
KERNELS = ("single", "double")
# |c| beyond which the off-surface asymptotic terms are below 1e-16
ASYMPTOTIC_REACH = 15.0
# exp(-GAUSS_EXPONENT) is treated as zero when truncating time windows
GAUSS_EXPONENT = 45.0


def _check_kernel(kernel):
    if kernel not in KERNELS:
        raise InvalidArgument(f"unknown kernel {kernel!r}")


# {{{ time rules

def graded_rule(a, b, n):
    """Gauss-Legendre rule in ``u = -log s`` for ``s`` in ``[b, a]``.

    Returns ``s_j`` and weights ``w_j`` with
    ``int_b^a g(s) ds / s ~ sum_j w_j g(s_j)``.
    """
    if not a > b > 0:
        raise InvalidArgument("graded rule needs a > b > 0")
    x, w = gauss_legendre(n)
    lo, hi = -math.log(a), -math.log(b)
    u = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x
    return np.exp(-u), 0.5 * (hi - lo) * w


@dataclass(frozen=True)
class PotentialSplit:
    """Time splitting of layer potentials.

    Parameters
    ----------
    delta : float
        Marching step; the local window is ``[t - delta, t]``.
    eps_asym : float
        Length of the window ``[t - eps_asym, t]`` treated asymptotically.
    n_loc : int
        Nodes of the graded rule on ``[t - delta, t - eps_asym]``.
    n_near : int
        Nodes of the graded rule on the near-history window.
    """
    delta: float
    eps_asym: float
    n_loc: int = 24
    n_near: int = 8

    def __post_init__(self):
        if not 0 < self.eps_asym < self.delta:
            raise InvalidArgument("need 0 < eps_asym < delta")
        if self.n_loc < 1 or self.n_near < 1:
            raise InvalidArgument("node counts must be positive")

    @classmethod
    def for_tolerance(cls, delta, tol, n_loc=24, n_near=8):
        """Asymptotic window whose neglected on-surface term is below ``tol``."""
        if delta <= 0 or tol <= 0:
            raise InvalidArgument("delta and tol must be positive")
        eps = min((tol * 3.0 * SQRT_PI) ** (2.0 / 3.0), delta / 10.0)
        return cls(float(delta), float(eps), n_loc, n_near)

    @property
    def local_rule(self):
        return graded_rule(self.delta, self.eps_asym, self.n_loc)

    @property
    def nodes(self):
        """Mapped nodes ``u_j`` on ``[-log delta, -log eps_asym]``."""
        return -np.log(self.local_rule[0])

    @property
    def weights(self):
        return self.local_rule[1]

# }}}


# {{{ density history

class DensityHistory:
    """Layer densities at ``t0 + i dt`` with a rule for values in between.

    Parameters
    ----------
    t0, dt : float
        Time of the first slice and the spacing.
    interp : {"constant", "linear", "lagrange"}
        ``constant`` holds slice ``i`` on ``[t_i, t_{i+1})``; ``linear``
        joins neighbouring slices; ``lagrange`` uses ``order`` slices
        centered on the query time.
    order : int
        Stencil size for ``lagrange``.

    Densities vanish before ``t0``.
    """

    def __init__(self, t0=0.0, dt=1.0, interp="constant", order=4):
        if dt <= 0:
            raise InvalidArgument("dt must be positive")
        if interp not in ("constant", "linear", "lagrange"):
            raise InvalidArgument(f"unknown interpolation {interp!r}")
        if interp == "lagrange" and order < 2:
            raise InvalidArgument("lagrange order must be >= 2")
        self.t0 = float(t0)
        self.dt = float(dt)
        self.interp = interp
        self.order = int(order)
        self.slices = []

    def __len__(self):
        return len(self.slices)

    def append(self, values):
        values = np.array(values, dtype=float)
        if self.slices and values.shape != self.slices[0].shape:
            raise InvalidArgument("density shape changed")
        self.slices.append(values)

    def time(self, i):
        return self.t0 + i * self.dt

    @property
    def last_time(self):
        return self.time(len(self.slices) - 1)

    def weights(self, tau, pending=False):
        """``[(slice index, weight)]`` reproducing the density at ``tau``.

        With ``pending`` the index ``len(self)`` may appear; it stands for
        the slice that is about to be appended.
        """
        n = len(self.slices) + (1 if pending else 0)
        x = (tau - self.t0) / self.dt
        if x < -1e-9:
            return []
        if n == 0:
            raise InvalidState("empty density history")
        i = int(math.floor(x + 1e-9))
        frac = max(x - i, 0.0)
        if self.interp == "constant" or frac <= 1e-12 and i < n:
            if i >= n:
                raise InvalidState(f"no density at t={tau:g}")
            return [(i, 1.0)]
        if self.interp == "linear":
            if i + 1 >= n:
                raise InvalidState(f"no density at t={tau:g}")
            return [(i, 1.0 - frac), (i + 1, frac)]
        q = min(self.order, n)
        start = int(round(x)) - q // 2
        start = min(max(start, 0), n - q)
        if x > n - 1 + 1e-9:
            raise InvalidState(f"no density at t={tau:g}")
        idx = np.arange(start, start + q)
        w = np.ones(q)
        for a in range(q):
            for b in range(q):
                if a != b:
                    w[a] *= (x - idx[b]) / (idx[a] - idx[b])
        return list(zip(idx.tolist(), w.tolist()))

    def derivative_weights(self, tau):
        """Weights of the time derivative of the interpolant at ``tau``."""
        n = len(self.slices)
        if n < 2:
            return []
        x = (tau - self.t0) / self.dt
        q = min(max(self.order, 2), n) if self.interp == "lagrange" else 2
        start = min(max(int(round(x)) - q // 2, 0), n - q)
        idx = np.arange(start, start + q)
        w = np.zeros(q)
        for a in range(q):
            for c in range(q):
                if c == a:
                    continue
                term = 1.0 / (idx[a] - idx[c])
                for b in range(q):
                    if b != a and b != c:
                        term *= (x - idx[b]) / (idx[a] - idx[b])
                w[a] += term
        return list(zip(idx.tolist(), (w / self.dt).tolist()))

    def combine(self, weights):
        out = np.zeros_like(self.slices[0])
        for i, c in weights:
            out += c * self.slices[i]
        return out

    def at(self, tau):
        w = self.weights(tau)
        if not w:
            return np.zeros_like(self.slices[0])
        return self.combine(w)

# }}}


# {{{ local asymptotics

def e32(x):
    """Exponential integral of order 3/2, ``int_1^inf exp(-x t) t^(-3/2) dt``."""
    x = np.asarray(x, dtype=float)
    r = np.sqrt(x)
    return 2.0 * np.exp(-x) - 2.0 * SQRT_PI * r * erfc(r)


def layer_local_asymptotic(density, eps, kernel, curvature, normal_velocity,
                           offset=0.0, on_surface=False, density_t=None,
                           density_ss=None):
    """Asymptotic value of the layer potential over ``[t - eps, t]``.

    Parameters
    ----------
    density : array_like
        Density at the closest boundary point, at time ``t``.
    eps : float
        Window length.
    kernel : {"single", "double"}
    curvature, normal_velocity : array_like
        Geometry at the closest boundary point; velocity along the outward
        normal.
    offset : array_like
        Signed distance of the target along the inward normal.  Ignored
        with ``on_surface``, which gives the principal value on the boundary.
    density_t, density_ss : array_like, optional
        Time and arc-length second derivatives, used by the on-surface
        single layer.  The correction is skipped when either is missing.

    Returns
    -------
    ndarray
    """
    _check_kernel(kernel)
    if curvature is None or normal_velocity is None:
        raise InvalidState("curvature and normal velocity are required")
    if eps <= 0:
        raise InvalidArgument("eps must be positive")
    dens = np.asarray(density, dtype=float)
    g = np.asarray(curvature, dtype=float) - np.asarray(normal_velocity, dtype=float)
    root = math.sqrt(eps / math.pi)
    if on_surface:
        if kernel == "double":
            return -root * 0.5 * g * dens
        v = np.asarray(normal_velocity, dtype=float)
        # motion adds -v^2/(6 sqrt(pi)) to the eps^(3/2) coefficient
        out = root * dens + eps ** 1.5 * (g * g - 2.0 * v * v) * dens / (12.0 * SQRT_PI)
        if density_t is not None and density_ss is not None:
            # density(t - s) = density - s density_t; checked against a Bessel-series oracle
            out = out + eps ** 1.5 * (np.asarray(density_ss) - np.asarray(density_t)) / (3.0 * SQRT_PI)
        return out
    c = np.asarray(offset, dtype=float) / math.sqrt(eps)
    lin = 1.0 + 0.5 * g * c * math.sqrt(eps)
    if kernel == "single":
        return 0.5 * root * e32(0.25 * c * c) * lin * dens
    return (-root * e32(0.25 * c * c) * 0.25 * g * dens
            - 0.5 * np.sign(c) * erfc(0.5 * np.abs(c)) * lin * dens)


def arc_second_derivative(frame, values):
    """``d^2 f / ds^2`` in arc length of nodal values ``(M, k)`` on ``frame``."""
    k = frame.k
    x, _ = gauss_legendre(k)
    c = np.asarray(values, dtype=float) @ _node_to_coeff(k).T
    V = npleg.legvander(x, k - 1)
    f1 = npleg.legder(c, axis=1)
    f2 = npleg.legder(f1, axis=1)
    d1 = np.einsum("qn,mn->mq", V[:, :k - 1], f1)
    d2 = (np.einsum("qn,mn->mq", V[:, :k - 2], f2) if k > 2 else np.zeros_like(d1))
    c1, c2 = frame.derivs
    dx = np.einsum("qn,mnd->mqd", V, c1)
    ddx = np.einsum("qn,mnd->mqd", V, c2)
    sp = frame.speed
    dsp = (dx * ddx).sum(-1) / sp
    return (d2 * sp - d1 * dsp) / sp ** 3


def on_surface_asymptotic_matrix(frame, eps, kernel):
    """Sparse operator for the on-surface asymptotic term without ``sigma_t``.

    The single layer includes the ``-sigma_ss`` part of the correction.
    """
    _check_kernel(kernel)
    g = (frame.curvature - frame.normal_velocity).ravel()
    root = math.sqrt(eps / math.pi)
    if kernel == "double":
        return sparse.diags(-0.5 * root * g).tocsr()
    v = frame.normal_velocity.ravel()
    diag = sparse.diags(root + eps ** 1.5 * (g * g - 2.0 * v * v) / (12.0 * SQRT_PI))
    n, k = frame.n_nodes, frame.k
    eye = np.eye(k)
    # arc-length second derivative acting on each panel's nodal block
    blocks = np.stack([arc_second_derivative(frame, np.broadcast_to(e, (frame.n_panels, k)))
                       for e in eye], axis=-1)
    base = np.arange(frame.n_panels)[:, None, None] * k
    rows = np.broadcast_to(base + np.arange(k)[None, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(base + np.arange(k)[None, None, :], blocks.shape).ravel()
    dss = sparse.csr_matrix((blocks.ravel(), (rows, cols)), shape=(n, n))
    return (diag - eps ** 1.5 / (3.0 * SQRT_PI) * dss).tocsr()

# }}}


# {{{ layer potentials by graded quadrature

class LayerEvaluator:
    """Graded-rule layer potentials of a density history on a boundary.

    For stationary boundaries the per-node transform matrices, and their
    combinations at step-aligned times, are cached under a caller-supplied
    target key.

    Parameters
    ----------
    boundary : Boundary
    eps : float
        Gaussian cutoff of the boundary transforms.
    periodic_width : float, optional
        Period of the boundary image lattice.
    """

    def __init__(self, boundary, eps=1e-12, periodic_width=None):
        self.boundary = boundary
        self.eps = eps
        self.periodic_width = periodic_width
        self._mats = {}
        self._combined = {}

    def frame(self, t):
        return self.boundary.frame(t)

    def _matrix(self, tau, s, targets, kernel, key, store=True):
        cache = store and key is not None and self.boundary.stationary
        ck = (kernel, float(s), key)
        if cache and ck in self._mats:
            return self._mats[ck]
        m = boundary_fgt_matrix(self.frame(tau), 4.0 * s, targets, self.eps, kernel,
                                self.periodic_width) * (1.0 / (4.0 * math.pi))
        if cache:
            self._mats[ck] = m
        return m

    def slices(self, t, a, b, n, kernel, targets, history, key=None, pending=False):
        """Quadrature over ``[t - a, t - b]`` as ``{slice index: matrix}``.

        The potential is ``sum_i M_i @ density_i.ravel()``.
        """
        _check_kernel(kernel)
        if b >= a:
            return {}
        s, w = graded_rule(a, b, n)
        node_w = [history.weights(t - sj, pending) for sj in s]
        base = int(round((t - history.t0) / history.dt))
        aligned = abs((t - history.t0) / history.dt - base) < 1e-9
        ck = None
        if key is not None and self.boundary.stationary and aligned:
            sig = tuple(tuple((i - base, round(c, 13)) for i, c in nw) for nw in node_w)
            ck = (kernel, float(a), float(b), n, key, sig)
            hit = self._combined.get(ck)
            if hit is not None:
                return {i + base: m for i, m in hit.items()}
        out = {}
        for sj, wj, nw in zip(s, w, node_w):
            if not nw:
                continue
            # combined sums are cached instead of per-node matrices when possible
            m = self._matrix(t - sj, sj, targets, kernel, key, store=ck is None)
            for i, c in nw:
                term = (wj * c) * m
                out[i] = term if i not in out else out[i] + term
        if ck is not None:
            self._combined[ck] = {i - base: m for i, m in out.items()}
        return out

    def apply(self, t, a, b, n, kernel, targets, history, key=None):
        out = np.zeros(len(targets))
        for i, m in self.slices(t, a, b, n, kernel, targets, history, key).items():
            out += m @ history.slices[i].ravel()
        return out


def layer_local_quadrature(evaluator, history, t, a, b, n, kernel, targets, key=None):
    """Graded Gauss-Legendre rule for the layer potential over ``[t - a, t - b]``.

    Parameters
    ----------
    evaluator : LayerEvaluator
    history : DensityHistory
    t : float
    a, b : float
        Window ``[t - a, t - b]``; ``a`` is ``delta`` for the local part and
        ``2 delta`` when the near history is folded in.
    n : int
        Node count.
    kernel : {"single", "double"}
    targets : ndarray, shape (m, 2)
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    return evaluator.apply(t, a, b, n, kernel, targets, history, key)

# }}}


# {{{ grid potentials

def _check_free_space(gf, eps):
    tree = gf.tree
    act = tree.active
    if len(act) == 0:
        return
    h = tree.side(tree.level[act])
    lo = tree.lower_left + np.stack([tree.ix[act] * h, tree.iy[act] * h], -1)
    width = 2.0 * tree.halfwidth
    edge = np.any(lo <= tree.lower_left + 1e-12 * width, axis=1) | np.any(
        lo + h[:, None] >= tree.lower_left + width * (1 - 1e-12), axis=1)
    scale = gf.max_abs()
    if scale > 0 and edge.any() and np.abs(gf.values[edge]).max() > 1e-3 * scale:
        raise InvalidState("free-space mode needs data that vanishes at the root "
                           "boundary; extend the grid first")


def _gauss_grid(u0, dt, eps, periodic, target_tree=None, points=None):
    if dt <= 0:
        raise InvalidArgument("dt must be positive")
    periodic = u0.tree.periodic if periodic is None else bool(periodic)
    if not periodic:
        _check_free_space(u0, eps)
    plan = make_plan(u0.tree, 4.0 * dt, eps, periodic)
    if points is None and target_tree is None:
        target_tree = u0.tree
    grid, vals = fgt_apply(plan, density=u0, target_tree=target_tree, points=points)
    scale = 1.0 / (4.0 * math.pi * dt)
    if grid is not None:
        grid = grid * scale
    if vals is not None:
        vals = vals * scale
    return grid, vals


def initial_potential(u0, dt, eps=1e-10, periodic=None, target_tree=None):
    """``I[u0](x, dt) = int G(x - y, dt) u0(y) dy`` on a tree.

    Parameters
    ----------
    u0 : GridFunction
    dt : float
    eps : float
        Gauss transform tolerance.
    periodic : bool, optional
        Defaults to the tree's flag; periodic mode uses the lattice sum.
    target_tree : QuadTree, optional
        Output tree; defaults to ``u0.tree``.

    Raises
    ------
    InvalidState
        Free-space mode with data that does not vanish at the root boundary.
    """
    return _gauss_grid(u0, dt, eps, periodic, target_tree)[0]


def initial_potential_at(u0, dt, points, eps=1e-10, periodic=None):
    """``I[u0](., dt)`` at arbitrary points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return _gauss_grid(u0, dt, eps, periodic, points=pts)[1]


def volume_potential_local(F_now, F_prev, dt, eps=1e-10, periodic=None):
    """Trapezoidal local volume potential ``dt/2 (F(t) + I[F(t - dt)](dt))``."""
    if not (F_now.tree is F_prev.tree or F_now.tree.same_boxes(F_prev.tree)):
        raise InvalidArgument("forcing grids live on incompatible trees")
    prop = initial_potential(F_prev, dt, eps, periodic, target_tree=F_now.tree)
    return (F_now + prop) * (0.5 * dt)


@dataclass
class HistoryState:
    """Far-history fields of the single and double layer at ``time``."""
    u_fh: GridFunction
    v_fh: GridFunction
    time: float = 0.0
    index: int = 0
    log: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u_fh._check(self.v_fh)

    @classmethod
    def zeros(cls, tree, time=0.0):
        z = GridFunction.zeros(tree)
        return cls(z, z, time, 0)

    @property
    def tree(self):
        return self.u_fh.tree


def near_history_on_grid(evaluator, history, tree, t, dt, kernel, n_nodes=8,
                         eps=1e-10, periodic=None):
    """Near-history potential over ``[t - 2dt, t - dt]`` at the nodes of ``tree``.

    The boundary integral at each time node uses the panels' own
    Gauss-Legendre points, so panels should be no longer than a few
    ``sqrt(dt)``.
    """
    _check_kernel(kernel)
    periodic = tree.periodic if periodic is None else bool(periodic)
    vals = np.zeros((len(tree.active), tree.k, tree.k))
    s, w = graded_rule(2.0 * dt, dt, n_nodes)
    for sj, wj in zip(s, w):
        nw = history.weights(t - sj)
        if not nw:
            continue
        dens = history.combine(nw)
        if not np.any(dens):
            continue
        frame = evaluator.frame(t - sj)
        pts = frame.flat("nodes")
        if periodic:
            pts = tree.wrap(pts)
        q = (dens * frame.weights).ravel()
        plan = make_plan(tree, 4.0 * sj, eps, periodic)
        if kernel == "single":
            g, _ = fgt_apply(plan, charges=pts, strengths=q, target_tree=tree)
        else:
            g, _ = fgt_apply(plan, dipoles=pts, moments=q[:, None] * frame.flat("normal"),
                             target_tree=tree)
        vals += (wj / (4.0 * math.pi)) * g.values
    return GridFunction(tree, vals)


def far_history_update(state, increment_u=None, increment_v=None, dt=None, eps=1e-10,
                       adapt=True, periodic=None, max_rounds=4):
    """Advance the far history by ``dt``: ``far <- I[far + near](dt)``.

    Parameters
    ----------
    state : HistoryState
    increment_u, increment_v : GridFunction, optional
        Near-history potentials of the single and double layer at
        ``state.time``, sampled on ``state.tree``.
    dt : float
    eps : float
        Gauss transform tolerance; also the per-leaf resolution target,
        relative to the field's maximum.
    adapt : bool
        Refine leaves whose trailing Chebyshev coefficients exceed the
        target (recomputing the transform there), then merge siblings the
        parent reproduces.

    Returns
    -------
    HistoryState
    """
    if dt is None or dt <= 0:
        raise InvalidArgument("dt must be positive")
    src_u = state.u_fh if increment_u is None else state.u_fh + increment_u
    src_v = state.v_fh if increment_v is None else state.v_fh + increment_v
    srcs = [src_u, src_v]
    live = [bool(np.any(g.values)) for g in srcs]
    tree = state.tree
    rounds = 0
    while True:
        outs = [initial_potential(g, dt, eps, periodic, target_tree=tree) if on
                else GridFunction.zeros(tree) for g, on in zip(srcs, live)]
        if not adapt or rounds >= max_rounds:
            break
        bad = np.zeros(len(tree.active), dtype=bool)
        for g in outs:
            if g.max_abs() > 0:
                bad |= tail_error(g) > eps * g.max_abs()
        if not bad.any():
            break
        tree = balance(tree.refined(tree.active[bad]))
        rounds += 1
    if adapt:
        scale = max(g.max_abs() for g in outs)
        if scale > 0:
            outs = coarsen_resolved(outs, eps * scale)
    new = HistoryState(outs[0], outs[1], state.time + dt, state.index + 1)
    new.log = {"refine_rounds": rounds, "leaves": len(outs[0].tree.active)}
    return new


def advance_far_history(state, evaluator, history, dt, eps=1e-10, kernels=("double",),
                        n_nodes=8, adapt=False, periodic=None):
    """One bootstrap step: sample the near history at ``state.time`` and propagate."""
    inc = {}
    for kern in kernels:
        inc[kern] = near_history_on_grid(evaluator, history, state.tree, state.time, dt,
                                         kern, n_nodes, eps, periodic)
    return far_history_update(state, inc.get("single"), inc.get("double"), dt, eps,
                              adapt, periodic)

# }}}


# {{{ full layer potentials

def _local_off_surface(evaluator, history, split, t, targets, kernel, frame):
    """Graded rule per target group, truncated where the Gaussian is negligible.

    A target at distance ``d`` from the boundary sees ``exp(-d^2 / 4s)``, so
    ``s < d^2 / (4 GAUSS_EXPONENT)`` contributes nothing; each group of
    targets uses ``[t - delta, t - b]`` with ``b`` a power-of-two multiple of
    ``eps_asym`` below that bound.  The cutoff sharpens the integrand in
    ``u``, so these groups use ``2 n_loc`` nodes.
    """
    delta, eps_a = split.delta, split.eps_asym
    out = np.zeros(len(targets))
    reach = math.sqrt(4.0 * GAUSS_EXPONENT * delta)
    vmax = float(np.abs(frame.normal_velocity).max())
    nb = nearest_boundary_points(frame, targets, reach + vmax * delta,
                                 evaluator.periodic_width)
    if len(nb.target) == 0:
        return out
    d = np.maximum(np.abs(nb.offset) - vmax * delta, 0.0)
    b = np.maximum(d * d / (4.0 * GAUSS_EXPONENT), eps_a)
    level = np.floor(np.log2(b / eps_a)).astype(int)
    for lev in np.unique(level):
        lo = eps_a * 2.0 ** lev
        if lo >= delta:
            continue
        sel = nb.target[level == lev]
        out[sel] = evaluator.apply(t, delta, lo, 2 * split.n_loc, kernel, targets[sel],
                                   history)
    return out


def eval_layer_potential(state, evaluator, history, split, t, targets=None, kernel="double",
                         on_surface=False, key=None):
    """Full layer potential at time ``t``: far + near history + local part.

    Parameters
    ----------
    state : HistoryState
        Far history at time ``t`` (may be None when ``t <= 2 delta``).
    evaluator : LayerEvaluator
    history : DensityHistory
        Must hold the density at ``t``.
    split : PotentialSplit
    targets : ndarray, shape (m, 2), optional
        Off-surface targets.  With ``on_surface`` the targets are the boundary
        nodes at ``t`` and the value is the principal value.
    kernel : {"single", "double"}

    Returns
    -------
    ndarray
    """
    _check_kernel(kernel)
    delta, eps_a = split.delta, split.eps_asym
    frame = evaluator.frame(t)
    if on_surface:
        targets = frame.flat("nodes")
        key = key or "nodes"
    else:
        if targets is None:
            raise InvalidArgument("targets are required off the surface")
        targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if state is not None:
        if abs(state.time - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidState(f"far history is at t={state.time:g}, not {t:g}")
        far = (state.u_fh if kernel == "single" else state.v_fh)(targets)
    elif t > 2.0 * delta * (1 + 1e-9) + history.t0:
        raise InvalidState("far history required beyond t0 + 2 delta")
    else:
        far = np.zeros(len(targets))
    near = evaluator.apply(t, 2.0 * delta, delta, split.n_near, kernel, targets, history, key)
    if on_surface:
        loc = evaluator.apply(t, delta, eps_a, split.n_loc, kernel, targets, history, key)
    else:
        loc = _local_off_surface(evaluator, history, split, t, targets, kernel, frame)
    # left limit: a piecewise-constant history holds the previous slice on [t - eps, t)
    dens = history.at(t - 0.5 * eps_a)
    if on_surface:
        dt_dens = None
        if kernel == "single":
            dw = history.derivative_weights(t)
            if dw:
                dt_dens = history.combine(dw)
        asym = layer_local_asymptotic(
            dens, eps_a, kernel, frame.curvature, frame.normal_velocity, on_surface=True,
            density_t=dt_dens,
            density_ss=arc_second_derivative(frame, dens) if dt_dens is not None else None)
        asym = np.ravel(asym)
    else:
        asym = np.zeros(len(targets))
        nb = nearest_boundary_points(frame, targets, ASYMPTOTIC_REACH * math.sqrt(eps_a),
                                     evaluator.periodic_width)
        if len(nb.target):
            d0 = nb.interp @ dens.ravel()
            asym[nb.target] = layer_local_asymptotic(
                d0, eps_a, kernel, nb.curvature, nb.normal_velocity, offset=nb.offset)
    return far + near + loc + asym

# }}}
