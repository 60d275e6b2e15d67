"""Time-dependent boundaries as Legendre panels, and boundary Gauss transforms.

A boundary is a union of closed curves, each split into panels.  Every panel
is a pair of degree ``k-1`` Legendre series over ``s`` in ``[-1, 1]``
sampled at ``k`` Gauss-Legendre nodes.  Curves are oriented counterclockwise,
so the stored normal ``(x2', -x1')/|x'|`` points out of the region each
curve encloses.

Boundary Gauss transforms compute, for targets ``x``,

    single:  int_Gamma exp(-|x - y|^2/delta) sigma(y) ds_y
    double:  int_Gamma d/dnu_y exp(-|x - y|^2/delta) mu(y) ds_y

with the native ``k``-node rule when ``delta >= |Gamma_j|^2`` and with a
corrected rule otherwise: the subinterval of the panel on which the Gaussian
exceeds the tolerance is located by bisection, the density is interpolated to
``k_c = 20`` Gauss-Legendre nodes per piece of length ``<= 6 sqrt(delta)``
and integrated there.
"""

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import ConfigError, GeometryFailure, InvalidArgument

K_CORRECT = 20
PIECE_WIDTH = 6.0


@lru_cache(maxsize=None)
def gauss_legendre(n):
    return npleg.leggauss(n)


@lru_cache(maxsize=None)
def _node_to_coeff(k):
    """Matrix mapping values at k Gauss-Legendre nodes to Legendre coefficients."""
    x, _ = gauss_legendre(k)
    return np.linalg.inv(npleg.legvander(x, k - 1))


def legendre_coeffs(values):
    """Legendre coefficients from samples at Gauss-Legendre nodes (last axis)."""
    values = np.asarray(values, dtype=float)
    return values @ _node_to_coeff(values.shape[-1]).T


# {{{ curves

@dataclass
class Curve:
    """A closed parametric curve with optional rigid motion.

    Parameters
    ----------
    kind : {"circle", "ellipse", "fourier"}
    center : (2,) array_like
    radius : float
        Circle radius.
    axes : (a, b)
        Ellipse semi-axes.
    angle : float
        Ellipse rotation.
    cos_coeffs, sin_coeffs : sequence of float
        Fourier radius ``r(theta) = cos_coeffs[0] + sum_n cos_coeffs[n] cos(n theta)
        + sin_coeffs[n-1] sin(n theta)``.
    motion : {"none", "velocity", "rotation"}
    velocity : (2,) array_like
    rate : float
        Angular velocity for ``motion="rotation"`` (about ``center``).
    panels : int
    """
    kind: str = "circle"
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    axes: tuple = (1.0, 1.0)
    angle: float = 0.0
    cos_coeffs: tuple = (1.0,)
    sin_coeffs: tuple = ()
    motion: str = "none"
    velocity: tuple = (0.0, 0.0)
    rate: float = 0.0
    panels: int = 16

    def __post_init__(self):
        if self.kind not in ("circle", "ellipse", "fourier"):
            raise InvalidArgument(f"unknown curve type {self.kind!r}")
        if self.motion not in ("none", "velocity", "rotation"):
            raise InvalidArgument(f"unknown motion {self.motion!r}")
        self.center = tuple(float(c) for c in self.center)
        self.velocity = tuple(float(c) for c in self.velocity)
        self.axes = tuple(float(c) for c in self.axes)
        self.cos_coeffs = tuple(float(c) for c in self.cos_coeffs)
        self.sin_coeffs = tuple(float(c) for c in self.sin_coeffs)
        if self.panels < 1:
            raise InvalidArgument("panels must be positive")

    @property
    def stationary(self):
        return self.motion == "none" or (
            self.motion == "velocity" and self.velocity == (0.0, 0.0)) or (
            self.motion == "rotation" and self.rate == 0.0)

    def _shape(self, theta):
        """Points of the reference shape relative to the center."""
        c, s = np.cos(theta), np.sin(theta)
        if self.kind == "circle":
            return self.radius * np.stack([c, s], axis=-1)
        if self.kind == "ellipse":
            a, b = self.axes
            ca, sa = math.cos(self.angle), math.sin(self.angle)
            px, py = a * c, b * s
            return np.stack([ca * px - sa * py, sa * px + ca * py], axis=-1)
        r = np.full_like(theta, self.cos_coeffs[0])
        for n, an in enumerate(self.cos_coeffs[1:], start=1):
            r = r + an * np.cos(n * theta)
        for n, bn in enumerate(self.sin_coeffs, start=1):
            r = r + bn * np.sin(n * theta)
        return r[..., None] * np.stack([c, s], axis=-1)

    def center_at(self, t):
        c = np.asarray(self.center)
        if self.motion == "velocity":
            c = c + t * np.asarray(self.velocity)
        return c

    def position(self, theta, t=0.0):
        rel = self._shape(np.asarray(theta, dtype=float))
        if self.motion == "rotation":
            a = self.rate * t
            ca, sa = math.cos(a), math.sin(a)
            rel = np.stack([ca * rel[..., 0] - sa * rel[..., 1],
                            sa * rel[..., 0] + ca * rel[..., 1]], axis=-1)
        return self.center_at(t) + rel

    def point_velocity(self, theta, t=0.0):
        theta = np.asarray(theta, dtype=float)
        out = np.zeros(theta.shape + (2,))
        if self.motion == "velocity":
            out[...] = self.velocity
        elif self.motion == "rotation":
            rel = self.position(theta, t) - self.center_at(t)
            out[..., 0] = -self.rate * rel[..., 1]
            out[..., 1] = self.rate * rel[..., 0]
        return out

    def to_record(self):
        lines = [f"type = {self.kind}", f"center = {self.center[0]!r}, {self.center[1]!r}"]
        if self.kind == "circle":
            lines.append(f"radius = {self.radius!r}")
        elif self.kind == "ellipse":
            lines.append(f"axes = {self.axes[0]!r}, {self.axes[1]!r}")
            lines.append(f"angle = {self.angle!r}")
        else:
            lines.append("cos = " + ", ".join(repr(c) for c in self.cos_coeffs))
            if self.sin_coeffs:
                lines.append("sin = " + ", ".join(repr(c) for c in self.sin_coeffs))
        lines.append(f"motion = {self.motion}")
        if self.motion == "velocity":
            lines.append(f"velocity = {self.velocity[0]!r}, {self.velocity[1]!r}")
        elif self.motion == "rotation":
            lines.append(f"rate = {self.rate!r}")
        lines.append(f"panels = {self.panels}")
        return "\n".join(lines)


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def parse_curves(text):
    """Parse a curve descriptor file.

    Records are blocks of ``key = value`` lines separated by blank lines or
    ``[curve]`` headers; ``#`` starts a comment.
    """
    records, cur = [], {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or line.lower() == "[curve]":
            if cur:
                records.append(cur)
                cur = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in cur:
            raise ConfigError(f"duplicate key {key!r} in curve record")
        cur[key] = val
    if cur:
        records.append(cur)
    curves = []
    for rec in records:
        try:
            kw = dict(kind=rec.pop("type"))
            if "center" in rec:
                kw["center"] = _floats(rec.pop("center"))
            if "radius" in rec:
                kw["radius"] = float(rec.pop("radius"))
            if "axes" in rec:
                kw["axes"] = _floats(rec.pop("axes"))
            if "angle" in rec:
                kw["angle"] = float(rec.pop("angle"))
            if "cos" in rec:
                kw["cos_coeffs"] = _floats(rec.pop("cos"))
            if "sin" in rec:
                kw["sin_coeffs"] = _floats(rec.pop("sin"))
            if "motion" in rec:
                kw["motion"] = rec.pop("motion")
            if "velocity" in rec:
                kw["velocity"] = _floats(rec.pop("velocity"))
            if "rate" in rec:
                kw["rate"] = float(rec.pop("rate"))
            if "panels" in rec:
                kw["panels"] = int(rec.pop("panels"))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad curve record: {exc}") from exc
        if rec:
            raise ConfigError(f"unknown curve keys {sorted(rec)}")
        try:
            curves.append(Curve(**kw))
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
    return curves


def format_curves(curves):
    return "\n\n".join(c.to_record() for c in curves) + "\n"

# }}}


# {{{ frames

@dataclass
class Panel:
    """One boundary panel: Legendre coefficients of both coordinates."""
    coeffs_x1: np.ndarray
    coeffs_x2: np.ndarray
    time: float = 0.0

    def __call__(self, s):
        return np.stack([npleg.legval(s, self.coeffs_x1),
                         npleg.legval(s, self.coeffs_x2)], axis=-1)


@dataclass
class BoundaryFrame:
    """Boundary geometry at one time instant.

    Arrays are indexed ``[panel, node]``; ``coeffs`` has shape ``(M, k, 2)``.
    """
    time: float
    coeffs: np.ndarray
    nodes: np.ndarray
    tangent: np.ndarray
    normal: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    weights: np.ndarray
    normal_velocity: np.ndarray
    curve_id: np.ndarray
    _derivs: tuple = field(default=None, repr=False)

    @property
    def k(self):
        return self.coeffs.shape[1]

    @property
    def n_panels(self):
        return self.coeffs.shape[0]

    @property
    def n_nodes(self):
        return self.coeffs.shape[0] * self.coeffs.shape[1]

    @property
    def panels(self):
        return [Panel(c[:, 0], c[:, 1], self.time) for c in self.coeffs]

    @property
    def panel_length(self):
        return self.weights.sum(axis=1)

    @property
    def length(self):
        return float(self.weights.sum())

    @property
    def centers(self):
        return self.coeffs[:, 0, :]

    @property
    def panel_radius(self):
        """Radius of a disk about ``centers`` containing each panel."""
        s = np.linspace(-1, 1, 4 * self.k + 1)
        pts = np.einsum("qn,mnd->mqd", npleg.legvander(s, self.k - 1), self.coeffs)
        return np.linalg.norm(pts - self.centers[:, None, :], axis=-1).max(axis=1) * 1.01

    @property
    def derivs(self):
        if self._derivs is None:
            d1 = npleg.legder(self.coeffs, axis=1)
            d2 = npleg.legder(d1, axis=1)
            k = self.k
            pad1 = np.zeros_like(self.coeffs)
            pad1[:, :k - 1] = d1
            pad2 = np.zeros_like(self.coeffs)
            if k > 2:
                pad2[:, :k - 2] = d2
            self._derivs = (pad1, pad2)
        return self._derivs

    def area(self):
        """Signed area enclosed, summed over curves (divergence theorem)."""
        x = self.nodes
        return 0.5 * float(np.sum((x * self.normal).sum(-1) * self.weights))

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def _frame_from_coeffs(coeffs, t, velocity, curve_id):
    k = coeffs.shape[1]
    s, w = gauss_legendre(k)
    V = npleg.legvander(s, k - 1)
    d1 = npleg.legder(coeffs, axis=1)
    d2 = npleg.legder(d1, axis=1)
    x = np.einsum("qn,mnd->mqd", V, coeffs)
    dx = np.einsum("qn,mnd->mqd", V[:, :k - 1], d1)
    ddx = (np.einsum("qn,mnd->mqd", V[:, :k - 2], d2) if k > 2
           else np.zeros_like(dx))
    speed = np.linalg.norm(dx, axis=-1)
    if np.any(speed <= 1e-14 * max(1.0, np.abs(x).max())):
        raise GeometryFailure("irregular parametrization: zero speed at a node")
    tan = dx / speed[..., None]
    nrm = np.stack([tan[..., 1], -tan[..., 0]], axis=-1)
    kappa = (dx[..., 0] * ddx[..., 1] - dx[..., 1] * ddx[..., 0]) / speed ** 3
    vn = (velocity * nrm).sum(-1)
    return BoundaryFrame(t, coeffs, x, tan, nrm, kappa, speed, speed * w, vn, curve_id)


def _curve_coeffs(curve, n_panels, k, t):
    s, _ = gauss_legendre(k)
    edges = np.linspace(0.0, 2 * math.pi, n_panels + 1)
    theta = 0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * s
    pts = curve.position(theta, t)
    coeffs = np.einsum("nq,mqd->mnd", _node_to_coeff(k), pts)
    return coeffs, theta, edges


def _check_resolution(curve, coeffs, edges, k, t):
    s = np.cos(np.pi * (np.arange(2 * k) + 0.5) / (2 * k))
    theta = 0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * np.diff(edges)[:, None] * s
    exact = curve.position(theta, t)
    approx = np.einsum("qn,mnd->mqd", npleg.legvander(s, k - 1), coeffs)
    diam = np.ptp(exact.reshape(-1, 2), axis=0).max()
    return np.abs(exact - approx).max() / diam


def build_boundary(curves, panels_per_curve=None, k=16, t=0.0, tol=1e-10,
                   max_doublings=6):
    """Discretize curves at time ``t``.

    Panels are uniform in the curve parameter.  A curve whose interpolant
    misses ``tol * diameter`` at ``2k`` check nodes per panel has its panel
    count doubled, up to ``max_doublings`` times.

    Returns
    -------
    BoundaryFrame
    """
    if k < 4:
        raise InvalidArgument("panel order k must be >= 4")
    if isinstance(curves, Curve):
        curves = [curves]
    if panels_per_curve is None:
        panels_per_curve = [c.panels for c in curves]
    elif np.isscalar(panels_per_curve):
        panels_per_curve = [int(panels_per_curve)] * len(curves)
    all_c, all_v, ids = [], [], []
    for cid, (curve, m) in enumerate(zip(curves, panels_per_curve)):
        for _ in range(max_doublings + 1):
            coeffs, theta, edges = _curve_coeffs(curve, m, k, t)
            if _check_resolution(curve, coeffs, edges, k, t) <= tol:
                break
            m *= 2
        else:
            raise GeometryFailure(f"curve {cid} not resolved with {m // 2} panels")
        all_c.append(coeffs)
        all_v.append(curve.point_velocity(theta, t))
        ids.append(np.full(m, cid))
    return _frame_from_coeffs(np.concatenate(all_c), t, np.concatenate(all_v),
                              np.concatenate(ids))


class Boundary:
    """Curves plus discretization; hands out frames at any time."""

    def __init__(self, curves, k=16, panels_per_curve=None, tol=1e-10):
        self.curves = [curves] if isinstance(curves, Curve) else list(curves)
        self.k = k
        self.tol = tol
        ref = build_boundary(self.curves, panels_per_curve, k, 0.0, tol)
        self.panels_per_curve = [int(np.sum(ref.curve_id == i)) for i in range(len(self.curves))]
        self._ref = ref
        self._cache = {}

    @property
    def stationary(self):
        return all(c.stationary for c in self.curves)

    def frame(self, t=0.0):
        if self.stationary:
            return self._ref
        key = float(t)
        fr = self._cache.get(key)
        if fr is None:
            fr = build_boundary(self.curves, self.panels_per_curve, self.k, t, tol=np.inf)
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = fr
        return fr

# }}}


# {{{ densities

class Density:
    """Nodal values of a layer density on a frame, shape ``(M, k)``."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("density values must be (panels, k)")

    @classmethod
    def from_function(cls, frame, f):
        return cls(f(frame.nodes[..., 0], frame.nodes[..., 1]))

    @classmethod
    def from_coeffs(cls, coeffs):
        coeffs = np.asarray(coeffs, dtype=float)
        s, _ = gauss_legendre(coeffs.shape[1])
        return cls(coeffs @ npleg.legvander(s, coeffs.shape[1] - 1).T)

    @property
    def coeffs(self):
        return legendre_coeffs(self.values)

    def norm2(self, frame):
        return float(np.sqrt(np.sum(self.values ** 2 * frame.weights)))


def interp_density(coeffs, a, b, k_c=K_CORRECT):
    """Values of a Legendre series at ``k_c`` Gauss-Legendre nodes of ``[a, b]``."""
    if not b > a:
        raise InvalidArgument("degenerate subinterval")
    x, _ = gauss_legendre(k_c)
    return npleg.legval(0.5 * (a + b) + 0.5 * (b - a) * x, np.asarray(coeffs, float))

# }}}


# {{{ boundary Gauss transform

def _image_shifts(width, reach):
    if width is None:
        return np.zeros((1, 2))
    j = int(math.ceil(reach / width))
    r = np.arange(-j, j + 1) * width
    return np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2)


def _near_pairs(frame, targets, reach, periodic_width):
    """(target, panel, shift) triples with the panel's disk within ``reach``."""
    centers = frame.centers
    prad = frame.panel_radius
    rmax = prad.max() + reach
    kc = cKDTree(centers)
    ts, ps, ss = [], [], []
    shifts = _image_shifts(periodic_width, rmax)
    for n, sh in enumerate(shifts):
        kt = cKDTree(targets - sh)
        m = kt.sparse_distance_matrix(kc, rmax, output_type="coo_matrix")
        i, j = m.row, m.col
        d = np.linalg.norm(targets[i] - sh - centers[j], axis=1)
        keep = d <= prad[j] + reach
        ts.append(i[keep])
        ps.append(j[keep])
        ss.append(np.full(int(keep.sum()), n))
    return (np.concatenate(ts).astype(np.int64), np.concatenate(ps).astype(np.int64),
            shifts[np.concatenate(ss).astype(np.int64)])


def _series(coeffs, s):
    """Evaluate per-pair series: coeffs (n, k, 2), s (n, q) -> (n, q, 2)."""
    k = coeffs.shape[1]
    V = npleg.legvander(s, k - 1)
    return np.einsum("nqk,nkd->nqd", V, coeffs)


def _closest_param(frame, pan, x):
    """Panel parameter of the point nearest to ``x`` (Newton, clipped)."""
    k = frame.k
    c0 = frame.coeffs[pan]
    d1, d2 = frame.derivs
    c1, c2 = d1[pan], d2[pan]
    samp = np.linspace(-1, 1, 2 * k + 1)
    pts = np.einsum("qn,mnd->mqd", npleg.legvander(samp, k - 1), c0)
    dist = np.linalg.norm(pts - x[:, None, :], axis=-1)
    s = samp[np.argmin(dist, axis=1)]
    for _ in range(8):
        sv = s[:, None]
        y = _series(c0, sv)[:, 0]
        dy = _series(c1, sv)[:, 0]
        ddy = _series(c2, sv)[:, 0]
        r = y - x
        f = (r * dy).sum(-1)
        fp = (dy * dy).sum(-1) + (r * ddy).sum(-1)
        step = np.where(fp > 0, f / np.where(fp > 0, fp, 1.0), 0.0)
        s = np.clip(s - step, -1.0, 1.0)
    return s


@dataclass
class NearestPoints:
    """Closest boundary points for the targets that lie within reach.

    ``target`` indexes the input targets; ``offset`` is the signed distance
    along the inward normal (positive inside the enclosing curve).
    ``interp`` maps flattened nodal densities to values at ``point``.
    """
    target: np.ndarray
    panel: np.ndarray
    param: np.ndarray
    point: np.ndarray
    offset: np.ndarray
    curvature: np.ndarray
    normal_velocity: np.ndarray
    interp: sparse.csr_matrix


def nearest_boundary_points(frame, targets, reach, periodic_width=None):
    """Closest points on ``frame`` for targets within ``reach`` of it."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    k = frame.k
    ti, pj, sh = _near_pairs(frame, targets, reach, periodic_width)
    if len(ti) == 0:
        z = np.zeros(0)
        return NearestPoints(np.zeros(0, int), np.zeros(0, int), z, np.zeros((0, 2)),
                             z, z, z, sparse.csr_matrix((0, frame.n_nodes)))
    x = targets[ti] - sh
    s = _closest_param(frame, pj, x)
    y = _series(frame.coeffs[pj], s[:, None])[:, 0]
    d2 = ((y - x) ** 2).sum(-1)
    order = np.lexsort((d2, ti))
    first = np.ones(len(order), dtype=bool)
    first[1:] = ti[order][1:] != ti[order][:-1]
    pick = order[first]
    pick = pick[d2[pick] <= reach * reach]
    ti, pj, s, x, y = ti[pick], pj[pick], s[pick], x[pick], y[pick]
    d1, dd = frame.derivs
    dy = _series(d1[pj], s[:, None])[:, 0]
    ddy = _series(dd[pj], s[:, None])[:, 0]
    sp = np.linalg.norm(dy, axis=-1)
    nrm = np.stack([dy[:, 1], -dy[:, 0]], -1) / sp[:, None]
    kappa = (dy[:, 0] * ddy[:, 1] - dy[:, 1] * ddy[:, 0]) / sp ** 3
    rows = npleg.legvander(s, k - 1) @ _node_to_coeff(k)
    vn = (rows * frame.normal_velocity[pj]).sum(-1)
    offset = -((x - y) * nrm).sum(-1)
    n = len(ti)
    interp = sparse.csr_matrix(
        (rows.ravel(), (np.repeat(np.arange(n), k), (pj[:, None] * k + np.arange(k)).ravel())),
        shape=(n, frame.n_nodes))
    return NearestPoints(ti, pj, s, y + sh[pick], offset, kappa, vn, interp)


def _edge_param(c0, x, s_in, s_out, rho2, iters=52):
    """Bisection for ``|y(s) - x|^2 = rho2`` between ``s_in`` (inside) and ``s_out``."""
    lo, hi = s_in.copy(), s_out.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        y = _series(c0, mid[:, None])[:, 0]
        inside = ((y - x) ** 2).sum(-1) <= rho2
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return hi


def _kernel(r, nrm, delta, kernel):
    g = np.exp(-(r * r).sum(-1) / delta)
    if kernel == "single":
        return g
    # d/dnu_y exp(-|x-y|^2/delta) with r = x - y
    return g * 2.0 * (r * nrm).sum(-1) / delta


def boundary_fgt_matrix(frame, delta, targets, eps=1e-12, kernel="single",
                        periodic_width=None, k_c=K_CORRECT):
    """Sparse matrix mapping nodal densities to boundary Gauss transform values.

    Returns a ``(n_targets, frame.n_nodes)`` CSR matrix.
    """
    if delta <= 0:
        raise InvalidArgument("delta must be positive")
    if kernel not in ("single", "double"):
        raise InvalidArgument(f"unknown kernel {kernel!r}")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    k = frame.k
    nt = len(targets)
    rows, cols, vals = [], [], []
    rho2 = delta * (math.log(1.0 / eps) + 3.0)
    ti, pj, sh = _near_pairs(frame, targets, math.sqrt(rho2), periodic_width)
    if len(ti):
        x = targets[ti] - sh
        length = frame.panel_length[pj]
        native = delta >= length ** 2
        if native.any():
            a = np.flatnonzero(native)
            r = x[a, None, :] - frame.nodes[pj[a]]
            v = _kernel(r, frame.normal[pj[a]], delta, kernel) * frame.weights[pj[a]]
            rows.append(np.repeat(ti[a], k))
            cols.append((pj[a, None] * k + np.arange(k)).ravel())
            vals.append(v.ravel())
        if (~native).any():
            b = np.flatnonzero(~native)
            out = _corrected(frame, x[b], pj[b], delta, rho2, kernel, k_c)
            if out is not None:
                pair, w = out
                rows.append(np.repeat(ti[b][pair], k))
                cols.append((pj[b][pair, None] * k + np.arange(k)).ravel())
                vals.append(w.ravel())
    if rows:
        rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    else:
        rows = cols = np.zeros(0, int)
        vals = np.zeros(0)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(nt, frame.n_nodes))


def _corrected(frame, x, pan, delta, rho2, kernel, k_c):
    """Per-pair weights on the panel's k nodal values, or None if all negligible."""
    k = frame.k
    c0 = frame.coeffs[pan]
    s_star = _closest_param(frame, pan, x)
    y_star = _series(c0, s_star[:, None])[:, 0]
    live = ((y_star - x) ** 2).sum(-1) < rho2
    if not live.any():
        return None
    idx = np.flatnonzero(live)
    x, pan, c0, s_star = x[idx], pan[idx], c0[idx], s_star[idx]
    ends = np.ones(len(idx))

    def dist2(s):
        return ((_series(c0, s[:, None])[:, 0] - x) ** 2).sum(-1)

    a = np.where(dist2(-ends) <= rho2, -ends, _edge_param(c0, x, s_star, -ends, rho2))
    b = np.where(dist2(ends) <= rho2, ends, _edge_param(c0, x, s_star, ends, rho2))
    a = np.minimum(a, s_star)
    b = np.maximum(b, s_star)
    vmax = frame.speed[pan].max(axis=1) * 1.05
    arc = vmax * (b - a)
    pieces = np.maximum(1, np.ceil(arc / (PIECE_WIDTH * math.sqrt(delta)))).astype(int)
    owner = np.repeat(np.arange(len(idx)), pieces)
    first = np.repeat(np.cumsum(pieces) - pieces, pieces)
    j = np.arange(len(owner)) - first
    h = (b - a)[owner] / pieces[owner]
    lo = a[owner] + j * h
    t, w = gauss_legendre(k_c)
    s = lo[:, None] + 0.5 * h[:, None] * (t + 1.0)
    d1, _ = frame.derivs
    po = pan[owner]
    y = _series(c0[owner], s)
    dy = _series(d1[po], s)
    sp = np.linalg.norm(dy, axis=-1)
    nrm = np.stack([dy[..., 1], -dy[..., 0]], -1) / sp[..., None]
    r = x[owner, None, :] - y
    ker = _kernel(r, nrm, delta, kernel) * sp * (0.5 * h[:, None] * w)
    # density interpolation: nodal values -> values at s
    interp = npleg.legvander(s, k - 1) @ _node_to_coeff(k)
    wts = np.einsum("pq,pqn->pn", ker, interp)
    out = np.zeros((len(idx), k))
    np.add.at(out, owner, wts)
    return idx, out


def boundary_fgt(frame, density, delta, targets, eps=1e-12, kernel="single",
                 periodic_width=None):
    """Boundary Gauss transform of ``density`` at ``targets``.

    Parameters
    ----------
    frame : BoundaryFrame
    density : Density or ndarray, shape (M, k)
    delta : float
    targets : ndarray, shape (n, 2)
    eps : float
        Gaussian cutoff tolerance.
    kernel : {"single", "double"}
    periodic_width : float, optional
        Period of the lattice of boundary images, if any.
    """
    vals = density.values if isinstance(density, Density) else np.asarray(density, float)
    mat = boundary_fgt_matrix(frame, delta, targets, eps, kernel, periodic_width)
    return mat @ vals.ravel()


def check_commensurate(frame, tree):
    """Warn when a panel is longer than twice the leaf containing its center."""
    centers = frame.centers
    if tree.periodic:
        centers = tree.wrap(centers)
    inside = np.all(np.abs(centers - tree.center) <= tree.halfwidth, axis=1)
    if not inside.any():
        return []
    leaf = tree.locate(centers[inside])
    side = tree.side(tree.level[leaf])
    bad = np.flatnonzero(inside)[frame.panel_length[inside] > 2 * side]
    if len(bad):
        warnings.warn(f"{len(bad)} boundary panels exceed twice their leaf size",
                      RuntimeWarning, stacklevel=2)
    return list(bad)

# }}}
