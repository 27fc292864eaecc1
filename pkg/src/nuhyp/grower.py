"""Local unstable manifolds by iterating disks along an orbit.

A disk is stored as a graph over a base subspace (usually E at the disk's
center): node ``i`` sits at chart offset ``xi_i @ frame.T + eta_i @ normal.T``
from the center, where ``xi_i`` runs over a regular square grid and ``eta_i``
is the graph value. Offsets are kept relative to the orbit point so that
small disks retain full relative precision. Each push maps the nodes by the
system, re-expresses them over the bundle at the image point and
re-interpolates onto a regular grid (a discrete graph transform).

Backward iterates of a disk that was itself produced by pushing are known to
lie on the earlier pushed disks; backward checks snap onto that stored
history after every inverse step, which removes the exponential growth of
rounding errors transverse to the disk.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.interpolate import LinearNDInterpolator, RegularGridInterpolator

from .bundle import SplittingField, cone_width, mini_norm
from .phase import Point, SmoothSystem, is_torus, wrap
from .times import TimeSet

F2_SLACK = 1e-2
# tangent distances below this are round-off in unit frames, not misalignment
ALIGN_FLOOR = 1e-13
RANDOM_PAIRS = 1000
ALL_PAIRS_MAX_NODES = 64


class GrowerError(RuntimeError):
    def __init__(self, message: str, report: Optional[dict] = None):
        super().__init__(message)
        self.report = report or {}


class ConeViolation(GrowerError):
    pass


class FoldOver(GrowerError):
    pass


class CutError(GrowerError):
    pass


class NoHyperbolicTimes(GrowerError):
    pass


class NonConvergence(GrowerError):
    pass


class CertificateError(GrowerError):
    pass


class CalibrationError(GrowerError):
    pass


class PreconditionError(GrowerError):
    pass


class NestingError(GrowerError):
    pass


@dataclass(frozen=True)
class GrowerParams:
    sigma1: float
    sigma2: float
    a: float
    r: float
    h: float
    chi: float
    T_cap: float = 10.0
    N_max: int = 1000
    tol_c1: float = 1e-6
    cert_depth: int = 30

    def validate(self):
        if not (self.sigma1 > 1 and self.sigma2 > 1):
            raise ValueError("sigma1 and sigma2 must exceed 1")
        if not 0 < self.h < self.r:
            raise ValueError("need 0 < h < r")
        if self.a < 0:
            raise ValueError("cone width must be non-negative")
        if self.chi <= 1:
            raise ValueError("certificate rate chi must exceed 1")
        _n_half(self.r, self.h)


def _n_half(radius: float, h: float) -> int:
    q = radius / h
    n = int(round(q))
    if n < 1 or abs(q - n) > 1e-9 * max(1.0, q):
        raise ValueError(f"mesh spacing h={h} must divide the radius {radius}")
    return n


def _grid_index(n_half: int, k: int) -> np.ndarray:
    ax = range(-n_half, n_half + 1)
    return np.array(list(itertools.product(ax, repeat=k)), dtype=np.int64).reshape(-1, k)


def _complement(frame: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(frame, mode="complete")
    C = Q[:, frame.shape[1]:]
    return C


@dataclass(frozen=True, eq=False)
class DiskMesh:
    base: Point
    j: int
    bundle: str
    frame: np.ndarray
    normal: np.ndarray
    radius: float
    n_half: int
    graph: np.ndarray
    slopes: np.ndarray
    interp_residual: float = 0.0

    @property
    def k(self) -> int:
        return self.frame.shape[1]

    @property
    def spacing(self) -> float:
        return self.radius / self.n_half

    @property
    def grid_index(self) -> np.ndarray:
        return _grid_index(self.n_half, self.k)

    @property
    def xi(self) -> np.ndarray:
        return self.grid_index * self.spacing

    @property
    def n_nodes(self) -> int:
        return self.graph.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return self.xi @ self.frame.T + self.graph @ self.normal.T

    @property
    def positions(self) -> np.ndarray:
        return wrap(self.base.coords + self.offsets, self.base.space)

    @property
    def tangents(self) -> np.ndarray:
        """Orthonormal tangent frames, shape (n_nodes, d, k)."""
        T = self.frame[None] + self.normal[None] @ self.slopes
        Q, R = np.linalg.qr(T)
        return Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]

    def graph_at(self, xi: np.ndarray) -> np.ndarray:
        return _grid_eval(self, self.graph, xi)

    def snap(self, offsets: np.ndarray) -> np.ndarray:
        """Project chart offsets along the normal directions onto the graph."""
        xi = offsets @ self.frame
        return xi @ self.frame.T + self.graph_at(xi) @ self.normal.T


def _grid_eval(mesh: DiskMesh, values: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of node values, extrapolating linearly."""
    n, sp = mesh.n_half, mesh.spacing
    flat = values.reshape(values.shape[0], -1)
    q = np.asarray(query, dtype=float).reshape(-1, mesh.k)
    if mesh.k == 1:
        u = q[:, 0] / sp + n
        i = np.clip(np.floor(u).astype(np.int64), 0, 2 * n - 1)
        w = (u - i)[:, None]
        out = flat[i] * (1 - w) + flat[i + 1] * w
    else:
        ax = (np.arange(-n, n + 1) * sp,) * mesh.k
        grid_vals = flat.reshape((2 * n + 1,) * mesh.k + (flat.shape[1],))
        out = RegularGridInterpolator(ax, grid_vals, bounds_error=False, fill_value=None)(q)
    return out.reshape((q.shape[0],) + values.shape[1:])


def _scatter_to_grid(xi: np.ndarray, vals: np.ndarray, query: np.ndarray, n_half: int,
                     check_fold: bool = True) -> np.ndarray:
    k = xi.shape[1]
    flat = vals.reshape(vals.shape[0], -1)
    if k == 1:
        x = xi[:, 0]
        dx = np.diff(x)
        if check_fold and not (np.all(dx > 0) or np.all(dx < 0)):
            bad = int(np.flatnonzero(np.sign(dx) != np.sign(dx[0]))[0]) + 1
            raise FoldOver(f"pushed disk is not a graph near node {bad}", {"node": bad})
        order = np.argsort(x)
        xs, fs = x[order], flat[order]
        out = np.column_stack([np.interp(query[:, 0], xs, fs[:, c]) for c in range(fs.shape[1])])
    else:
        if check_fold:
            _check_orientation(xi, n_half)
        out = LinearNDInterpolator(xi, flat)(query)
        if np.isnan(out).any():
            raise CutError("re-interpolation grid leaves the pushed disk")
    return out.reshape((query.shape[0],) + vals.shape[1:])


def _cross2(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _check_orientation(xi: np.ndarray, n_half: int):
    if xi.shape[1] != 2:
        return
    m = 2 * n_half + 1
    P = xi.reshape(m, m, 2)
    a, b, c = P[:-1, :-1], P[1:, :-1], P[:-1, 1:]
    d = P[1:, 1:]
    s1 = _cross2(b - a, c - a)
    s2 = _cross2(c - d, b - d)
    s = np.concatenate([s1.ravel(), s2.ravel()])
    if not (np.all(s > 0) or np.all(s < 0)):
        bad = int(np.flatnonzero(np.sign(s) != np.sign(s[0]))[0])
        raise FoldOver(f"pushed disk folds over (cell {bad})", {"cell": bad})


def _inscribed_radius(xi: np.ndarray, n_half: int, cap: Optional[float]) -> float:
    k = xi.shape[1]
    if k == 1:
        return float(min(-xi[:, 0].min(), xi[:, 0].max()))
    idx = _grid_index(n_half, k)
    ring = np.any(np.abs(idx) == n_half, axis=1)
    R = float(np.min(np.max(np.abs(xi[ring]), axis=1)))
    if cap is not None:
        R = min(R, cap)
    interp = LinearNDInterpolator(xi, np.zeros(len(xi)))
    grid = _grid_index(n_half, k)
    for _ in range(200):
        if not np.isnan(interp(grid * (R / n_half))).any():
            return R
        R *= 0.995
    raise CutError("pushed disk does not contain a centred square")


def seed_disk(system: SmoothSystem, split: SplittingField, j: int = 0, radius: float = 0.05,
              a: float = 0.0, h: float = 0.005, bundle: str = "E", tilt: float = 0.0) -> DiskMesh:
    """Flat disk through x_j over the bundle, optionally tilted by ``tilt``
    along the first normal direction (slope), as a regular grid of spacing h."""
    if is_torus(system.space) and radius > 0.25:
        raise ValueError(f"radius {radius} exceeds the torus chart scale 0.25")
    if h >= radius:
        raise ValueError("mesh spacing must be smaller than the radius")
    n_half = _n_half(radius, h)
    B = split.frame(bundle, j)
    C = _complement(B)
    k = B.shape[1]
    base = split.orbit.point(j)
    xi = _grid_index(n_half, k) * (radius / n_half)
    S = np.zeros((C.shape[1], k))
    if tilt and C.shape[1]:
        S[0, 0] = tilt
    graph = xi @ S.T
    slopes = np.broadcast_to(S, (xi.shape[0],) + S.shape).copy()
    return DiskMesh(base, j, bundle, B, C, float(radius), n_half, graph, slopes)


def cone_widths(E: np.ndarray, F: np.ndarray, Ts: np.ndarray) -> np.ndarray:
    """Batched ``cone_width`` for tangent frames Ts of shape (n, d, k)."""
    k = E.shape[1]
    C = np.linalg.solve(np.hstack([E, F]), Ts)
    CE, CF = C[:, :k], C[:, k:]
    if CF.shape[1] == 0:
        return np.zeros(len(Ts))
    out = np.full(len(Ts), np.inf)
    ok = np.linalg.svd(CE, compute_uv=False)[:, -1] > 1e-14
    if ok.any():
        out[ok] = np.linalg.norm(CF[ok] @ np.linalg.inv(CE[ok]), ord=2, axis=(1, 2))
    return out


def disk_cone_widths(disk: DiskMesh, split: SplittingField) -> np.ndarray:
    Ff = split.frame(split.complement_name(disk.bundle), disk.j)
    return cone_widths(disk.frame, Ff, disk.tangents)


def push_disk(system: SmoothSystem, split: SplittingField, disk: DiskMesh, a: float,
              max_radius: Optional[float] = None) -> DiskMesh:
    j = disk.j
    orbit = split.orbit
    w0 = disk_cone_widths(disk, split)
    over = np.flatnonzero(w0 > a + 1e-12)
    if over.size:
        i = int(over[0])
        raise ConeViolation(
            f"node {i} of the input disk lies outside the cone of width {a}: width {w0[i]:.6g}",
            {"node": i, "width": float(w0[i]), "a": a, "j": j,
             "center_width": float(w0[len(w0) // 2])})
    x = orbit.coords(j)
    idx = orbit.start_index + j
    v = disk.offsets
    v1 = np.asarray(system.forward_offset(x, v, idx), dtype=float)
    Df = np.asarray(system.tangent(wrap(x + v, system.space), idx), dtype=float)
    DT = Df @ (disk.frame[None] + disk.normal[None] @ disk.slopes)
    B1 = split.frame(disk.bundle, j + 1)
    C1 = _complement(B1)
    Fc = split.frame(split.complement_name(disk.bundle), j + 1)
    widths = cone_widths(B1, Fc, DT)
    over = np.flatnonzero(widths > a + 1e-12)
    if over.size:
        i = int(over[0])
        raise ConeViolation(
            f"node {i} leaves the cone of width {a}: width {widths[i]:.6g}",
            {"node": i, "width": float(widths[i]), "a": a, "j": j + 1,
             "center_width": float(widths[len(widths) // 2])})
    xi1 = v1 @ B1
    eta1 = v1 @ C1
    slopes1 = (C1.T @ DT) @ np.linalg.inv(B1.T @ DT)
    R = _inscribed_radius(xi1, disk.n_half, max_radius)
    if max_radius is not None:
        if R >= max_radius * (1 - 1e-12):
            R = float(max_radius)
        R = min(R, float(max_radius))
    if R <= 0:
        raise CutError("pushed disk collapsed", {"j": j + 1})
    grid = _grid_index(disk.n_half, disk.k) * (R / disk.n_half)
    n_nodes = grid.shape[0]
    vals = np.concatenate([eta1, slopes1.reshape(n_nodes, -1)], axis=1)
    new = _scatter_to_grid(xi1, vals, grid, disk.n_half)
    p = eta1.shape[1]
    graph = new[:, :p]
    slopes = new[:, p:].reshape(slopes1.shape)
    out = DiskMesh(orbit.point(j + 1), j + 1, disk.bundle, B1, C1, float(R), disk.n_half,
                   graph, slopes)
    inside = np.max(np.abs(xi1), axis=1) <= R
    resid = float(np.max(np.abs(eta1[inside] - out.graph_at(xi1[inside])), initial=0.0)) if p else 0.0
    return replace(out, interp_residual=resid)


def cut_ball(disk: DiskMesh, center: Optional[Point] = None, r: Optional[float] = None) -> DiskMesh:
    """Restrict the disk to the radius-r ball (sup norm in graph coordinates) about its center."""
    if r is None:
        raise ValueError("cut radius r is required")
    if center is not None:
        d = center.coords - disk.base.coords
        if center.space != disk.base.space or np.max(np.abs(wrap(d, center.space) if is_torus(center.space) else d)) > 1e-12:
            raise ValueError("cut_ball only cuts around the disk's own center")
    if disk.radius < r * (1 - 1e-12):
        raise CutError(
            f"disk of radius {disk.radius:.6g} does not contain a ball of radius {r}: "
            "not a hyperbolic time at this scale", {"radius": disk.radius, "r": r})
    if disk.radius == r:
        return disk
    grid = _grid_index(disk.n_half, disk.k) * (r / disk.n_half)
    return replace(disk, radius=float(r), graph=_grid_eval(disk, disk.graph, grid),
                   slopes=_grid_eval(disk, disk.slopes, grid), interp_residual=0.0)


def node_bundles(system: SmoothSystem, split: SplittingField, disk: DiskMesh,
                 history: Optional[dict] = None, depth: int = 30,
                 bundle: Optional[str] = None) -> np.ndarray:
    """Bundle frames at the disk nodes, shape (n_nodes, d, k).

    The splitting is only known along the center orbit. Each node is iterated
    backward (snapping onto ``history``) up to ``depth`` steps, and the center
    bundle at that earlier time is pushed forward along the node's own orbit
    with re-orthonormalization. When the offset map is linear the tangent map
    does not depend on the node and the center bundle is exact.
    """
    name = bundle or disk.bundle
    E = split.frame(name, disk.j)
    n = disk.n_nodes
    if system.offset_linear or history is None:
        return np.broadcast_to(E, (n,) + E.shape).copy()
    orbit = split.orbit
    m = 0
    while m < depth and (disk.j - m - 1) in history and disk.j - m - 1 >= split.lo:
        m += 1
    if m == 0:
        return np.broadcast_to(E, (n,) + E.shape).copy()
    V = disk.offsets
    trail = []
    for i in range(m):
        t = disk.j - i
        V = np.asarray(system.backward_offset(orbit.coords(t), V, orbit.start_index + t), dtype=float)
        V = history[t - 1].snap(V)
        trail.append(V)
    t0 = disk.j - m
    Q = np.broadcast_to(split.frame(name, t0), (n,) + E.shape).copy()
    for i in range(m):
        t = t0 + i
        pos = wrap(orbit.coords(t) + trail[m - 1 - i], system.space)
        Df = np.asarray(system.tangent(pos, orbit.start_index + t), dtype=float)
        Q, R = np.linalg.qr(Df @ Q)
        Q = Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]
    return Q


def tangent_alignment(disk: DiskMesh, split: SplittingField, bundle: Optional[str] = None,
                      system: Optional[SmoothSystem] = None, history: Optional[dict] = None,
                      depth: int = 30) -> float:
    """Max over nodes of the Grassmann distance between node tangent and node bundle.

    Without ``system`` every node is compared with the bundle at the disk's center.
    """
    if system is None:
        E = split.frame(bundle or disk.bundle, disk.j)[None]
    else:
        E = node_bundles(system, split, disk, history, depth, bundle)
    T = disk.tangents
    R = T - E @ (np.swapaxes(E, 1, 2) @ T)
    return float(min(1.0, np.max(np.linalg.norm(R, ord=2, axis=(1, 2)), initial=0.0)))


def check_tangent_alignment(disk: DiskMesh, split: SplittingField, sigma2: float, a: float,
                            k: int, system: Optional[SmoothSystem] = None,
                            history: Optional[dict] = None) -> dict:
    value = tangent_alignment(disk, split, system=system, history=history)
    bound = sigma2 ** (-k) * a
    return {"passed": bool(value <= bound + ALIGN_FLOOR), "max_distance": value, "bound": bound,
            "k": k}


def _align_ratio(value: float, sigma2: float, k: int, a: float) -> float:
    """value / (sigma2^-k a), with round-off below ALIGN_FLOOR counted as exact alignment."""
    if a <= 0:
        return 0.0
    return max(0.0, value - ALIGN_FLOOR) * sigma2 ** k / a


# ---------------------------------------------------------------------------
# backward checks


def _pairs(m: int, offsets: np.ndarray, r: Optional[float], seed: int = 0) -> np.ndarray:
    if m <= ALL_PAIRS_MAX_NODES:
        i, j = np.triu_indices(m, 1)
        P = np.column_stack([i, j])
    else:
        center = m // 2
        rng = np.random.default_rng(seed)
        a = rng.integers(0, m, RANDOM_PAIRS)
        b = rng.integers(0, m, RANDOM_PAIRS)
        P = np.vstack([np.column_stack([np.full(m, center), np.arange(m)]),
                       np.column_stack([a, b])])
        P = P[P[:, 0] != P[:, 1]]
    d0 = np.linalg.norm(offsets[P[:, 0]] - offsets[P[:, 1]], axis=1)
    keep = d0 > 0
    if r is not None:
        keep &= d0 <= r * (1 + 1e-12)
    return P[keep]


def backward_ratios(system: SmoothSystem, groups, rate: float, depths=None, history=None,
                    orbit=None, r: Optional[float] = None) -> list[dict]:
    """For each group (n, offsets) iterate the disk backward and record
    max over pairs and 0 <= k <= depth of d(f^-k y, f^-k z) * rate^k / d(y, z).

    All groups share the node count. ``history`` maps orbit index -> DiskMesh
    and is used both for the base orbit and for snapping; without it the base
    orbit comes from ``orbit`` (or from iterating the system backward).
    """
    if not groups:
        return []
    ns = np.array([g[0] for g in groups], dtype=np.int64)
    V = np.stack([np.asarray(g[1], dtype=float) for g in groups])
    G, m, d = V.shape
    depths = ns - ns.min() if depths is None else np.asarray(depths, dtype=np.int64)
    if depths.shape != ns.shape:
        depths = np.broadcast_to(depths, ns.shape).copy()
    pairs = _pairs(m, V[0], r)
    d0 = np.linalg.norm(V[:, pairs[:, 0]] - V[:, pairs[:, 1]], axis=2)
    log_d0 = np.log(d0)
    log_scale = np.zeros(G)
    best = np.ones(G)
    worst = [(0, int(pairs[0, 0]) if len(pairs) else 0, int(pairs[0, 1]) if len(pairs) else 0)] * G
    linear = bool(getattr(system, "offset_linear", False))
    t_hi, t_lo = int(ns.max()), int((ns - depths).min())
    base_cache = {}

    def base(t):
        if history is not None and t in history:
            return history[t].base.coords
        if orbit is not None:
            return orbit.coords(t)
        if t not in base_cache:
            nxt = base(t + 1)
            base_cache[t] = wrap(np.asarray(system.backward(nxt, start + t + 1), dtype=float), system.space)
        return base_cache[t]

    start = orbit.start_index if orbit is not None else (
        next(iter(history.values())).base.index - next(iter(history.values())).j if history else 0)
    if history is None and orbit is None:
        anchor = groups[int(np.argmax(ns))]
        if len(anchor) < 3:
            raise ValueError("groups need a base point when neither history nor orbit is given")
        base_cache[t_hi] = anchor[2]
    log_rate = np.log(rate)
    for t in range(t_hi - 1, t_lo - 1, -1):
        act = (ns > t) & (ns - t <= depths)
        if not act.any():
            continue
        Va = V[act].reshape(-1, d)
        Va = np.asarray(system.backward_offset(base(t + 1), Va, start + t + 1), dtype=float)
        if history is not None and t in history:
            Va = history[t].snap(Va)
        Va = Va.reshape(-1, m, d)
        if linear:
            s = np.max(np.abs(Va), axis=(1, 2))
            s[s == 0] = 1.0
            Va /= s[:, None, None]
            log_scale[act] += np.log(s)
        V[act] = Va
        dist = np.linalg.norm(Va[:, pairs[:, 0]] - Va[:, pairs[:, 1]], axis=2)
        with np.errstate(divide="ignore"):
            logq = np.log(dist) + log_scale[act][:, None] + (ns[act] - t)[:, None] * log_rate - log_d0[act]
        q = np.exp(logq)
        amax = np.argmax(q, axis=1)
        qv = q[np.arange(len(q)), amax]
        gidx = np.flatnonzero(act)
        for gi in np.flatnonzero(qv > best[gidx]):
            g = gidx[gi]
            best[g] = qv[gi]
            p = pairs[amax[gi]]
            worst[g] = (int(ns[g] - t), int(p[0]), int(p[1]))
    return [{"n": int(n), "depth": int(dp), "max_q": float(b), "worst": w}
            for n, dp, b, w in zip(ns, depths, best, worst)]


def check_backward_contraction(system: SmoothSystem, disk: DiskMesh, n: int, sigma1: float,
                               r: float, history: Optional[dict] = None, orbit=None) -> dict:
    """d(f^-k y, f^-k z) <= sigma1^-k d(y, z) (1 + slack) for node pairs within r, 0 <= k <= n."""
    if n == 0:
        return {"passed": True, "max_ratio": 1.0 / (1 + F2_SLACK), "worst": None, "n": 0}
    res = backward_ratios(system, [(disk.j, disk.offsets, disk.base.coords)], sigma1,
                          depths=[n], history=history, orbit=orbit, r=r)[0]
    ratio = res["max_q"] / (1 + F2_SLACK)
    return {"passed": bool(ratio <= 1.0), "max_ratio": ratio, "worst": res["worst"], "n": n}


# ---------------------------------------------------------------------------
# growth


@dataclass(eq=False)
class LocalManifold:
    mesh: DiskMesh
    chi: float
    T: float
    r: float
    convergence_log: list
    hyperbolic_times_used: TimeSet
    depth: int
    history: dict = field(repr=False, default_factory=dict)
    checks: list = field(default_factory=list)
    C_formula: Optional[float] = None
    converged: bool = True

    def certificate(self) -> dict:
        return {
            "chi": self.chi, "T": self.T, "r": self.r, "depth": self.depth,
            "bundle": self.mesh.bundle, "center_index": self.mesh.j,
            "center": self.mesh.base.coords.tolist(),
            "gaps": [[g["n"], g["c0"], g["c1"]] for g in self.convergence_log],
            "times_used": self.hyperbolic_times_used.times.tolist(),
            "horizon": int(self.hyperbolic_times_used.horizon),
            "C_min_mini_norm": self.C_formula, "converged": self.converged,
        }


def cauchy_gaps(prev: DiskMesh, cur: DiskMesh) -> tuple[float, float]:
    """C0/C1 gaps after re-expressing ``prev`` (about its own center) over the
    frame of ``cur``; compared on the part of cur's grid covered by prev."""
    v = prev.offsets
    xi = v @ cur.frame
    eta = v @ cur.normal
    Tp = prev.tangents
    grid = cur.xi
    if cur.k == 1:
        lo, hi = xi[:, 0].min(), xi[:, 0].max()
        inside = (grid[:, 0] >= lo - 1e-15) & (grid[:, 0] <= hi + 1e-15)
    else:
        inside = ~np.isnan(LinearNDInterpolator(xi, np.zeros(len(xi)))(grid))
    if not inside.any():
        return np.inf, np.inf
    q = grid[inside]
    vals = np.concatenate([eta, Tp.reshape(len(Tp), -1)], axis=1)
    got = _scatter_to_grid(xi, vals, q, prev.n_half, check_fold=False)
    p = eta.shape[1]
    c0 = float(np.max(np.abs(got[:, :p] - cur.graph[inside]), initial=0.0)) if p else 0.0
    Tq = got[:, p:].reshape((-1,) + Tp.shape[1:])
    Qp, _ = np.linalg.qr(Tq)
    Tc = cur.tangents[inside]
    R = Qp - Tc @ (np.swapaxes(Tc, 1, 2) @ Qp)
    c1 = float(min(1.0, np.max(np.linalg.norm(R, ord=2, axis=(1, 2)), initial=0.0)))
    return c0, c1


def min_mini_norm(split: SplittingField, bundle: str, lo: int, hi: int) -> float:
    orbit = split.orbit
    return float(min(mini_norm(orbit.jacobian(j), split.frame(bundle, j)) for j in range(lo, hi)))


def grow_unstable(system: SmoothSystem, split: SplittingField, params: GrowerParams, hd: TimeSet,
                  j0: int = 0, bundle: str = "E", full_run: bool = False, tilt: float = 0.0,
                  seed_mesh: Optional[DiskMesh] = None) -> LocalManifold:
    """Push a disk from x_{j0}, cut radius-r balls at hyperbolic times and
    stop once consecutive cuts agree in C0 and C1 for three hyperbolic times.

    With ``full_run`` the loop continues through every hyperbolic time up to
    N_max, recording the checks at each one.
    """
    params.validate()
    if len(hd) == 0:
        raise NoHyperbolicTimes("no hyperbolic times at this rate")
    disk = seed_mesh or seed_disk(system, split, j0, params.r, params.a, params.h, bundle, tilt)
    history = {j0: disk}
    worst_align = _align_ratio(tangent_alignment(disk, split, system=system, history=history),
                               params.sigma2, 0, params.a)
    t_end = min(int(hd.times[-1]), params.N_max, split.hi - j0)
    cuts, log, checks, used = [], [], [], []
    streak = 0
    converged = False
    for t in range(1, t_end + 1):
        disk = push_disk(system, split, disk, params.a, max_radius=params.r)
        history[j0 + t] = disk
        if params.a > 0:
            al = tangent_alignment(disk, split, system=system, history=history)
            worst_align = max(worst_align, _align_ratio(al, params.sigma2, t, params.a))
        if t not in hd:
            continue
        rec = {"n": t, "F3": bool(worst_align <= 1 + 1e-12), "F3_ratio": float(worst_align),
               "residual": disk.interp_residual}
        try:
            cut = cut_ball(disk, None, params.r)
            rec["F1"] = True
        except CutError:
            rec["F1"] = False
            checks.append(rec)
            continue
        checks.append(rec)
        used.append(t)
        if cuts:
            c0, c1 = cauchy_gaps(cuts[-1][1], cut)
            log.append({"n": t, "c0": c0, "c1": c1})
            streak = streak + 1 if (c0 < params.tol_c1 and c1 < params.tol_c1) else 0
        cuts.append((t, cut))
        if streak >= 3 and t >= params.cert_depth:
            converged = True
            if not full_run:
                break
    if not cuts:
        raise CutError("no hyperbolic time produced a disk of radius r",
                       {"checks": checks})
    if full_run:
        converged = streak >= 3
    hist_abs = history
    f2 = backward_ratios(system, [(j0 + t, c.offsets) for t, c in cuts], params.sigma1,
                         depths=[t for t, _ in cuts], history=hist_abs, r=params.r)
    by_n = {res["n"] - j0: res for res in f2}
    for rec in checks:
        if rec["n"] in by_n:
            res = by_n[rec["n"]]
            rec["F2_ratio"] = res["max_q"] / (1 + F2_SLACK)
            rec["F2"] = bool(rec["F2_ratio"] <= 1.0)
    t_last, final = cuts[-1]
    report = {"gaps": log, "checks": checks, "t_last": t_last}
    if not converged:
        raise NonConvergence(
            f"Cauchy criterion (tol {params.tol_c1:g}, 3 consecutive times) not met "
            f"within {t_end} steps", report)
    depth = min(t_last, params.cert_depth)
    cert = backward_ratios(system, [(j0 + t_last, final.offsets)], params.chi, depths=[depth],
                           history=hist_abs, r=None)[0]
    T = max(1.0, cert["max_q"])
    keep = {j: history[j] for j in range(j0 + t_last - depth, j0 + t_last + 1)}
    try:
        C = min_mini_norm(split, bundle, j0, j0 + t_last)
    except Exception:
        C = None
    m = LocalManifold(final, params.chi, T, params.r, log, TimeSet(np.array(used), hd.horizon, hd.params),
                      depth, keep, checks, C, converged)
    if T > params.T_cap:
        raise CertificateError(f"measured certificate constant T={T:.4g} exceeds T_cap={params.T_cap}",
                               {**report, "T": T, "manifold": m})
    return m


def verify_local_manifold(system: SmoothSystem, m: LocalManifold, n_depth: int) -> dict:
    """Re-check d(f^-n y, f^-n z) <= T chi^-n d(y, z) for 1 <= n <= n_depth."""
    if n_depth == 0:
        return {"passed": True, "max_ratio": 0.0, "n_depth": 0}
    if n_depth > m.depth:
        raise ValueError(f"n_depth={n_depth} exceeds the recorded backward budget {m.depth}")
    res = backward_ratios(system, [(m.mesh.j, m.mesh.offsets)], m.chi, depths=[n_depth],
                          history=m.history, r=None)[0]
    ratio = res["max_q"] / m.T
    return {"passed": bool(ratio <= 1.0 + 1e-12), "max_ratio": ratio, "worst": res["worst"],
            "n_depth": n_depth}


def graph_deviation(outer: LocalManifold, inner: LocalManifold) -> float:
    """Max distance (along the normal of ``outer``) from inner's nodes to outer's graph."""
    if outer.mesh.j != inner.mesh.j:
        raise ValueError("manifolds are centred at different orbit points")
    v = inner.mesh.offsets
    xi = v @ outer.mesh.frame
    eta = v @ outer.mesh.normal
    return float(np.max(np.linalg.norm(eta - outer.mesh.graph_at(xi), axis=1), initial=0.0))


def grow_nested(system: SmoothSystem, split: SplittingField, params: GrowerParams,
                log_lambda1: float, log_lambda2: float, j0: int = 0,
                n_window: Optional[int] = None, check_exponents: bool = True):
    """W^{E,u} inside W^{E+F,u} on the shared hyperbolic times of both splittings."""
    from .bundle import lyapunov_estimates
    from .times import hd_times, step_logs

    if split.names != ("E", "F", "G"):
        raise PreconditionError("nested growth needs a three-bundle splitting E + F + G")
    avail = split.hi - j0
    n = min(params.N_max, avail) if n_window is None else n_window
    est = lyapunov_estimates(split.orbit, split, n, start=j0)
    exps = {"chi_E_minus": float(est.chi_E_minus), "chi_F_plus": float(est.chi_F_plus),
            "chi_F_minus": float(est.chi_F_minus), "chi_G_plus": float(est.chi_G_plus)}
    ordered = est.chi_E_minus > est.chi_F_plus >= est.chi_F_minus - 1e-12 and est.chi_F_minus > est.chi_G_plus
    if check_exponents and not (ordered and est.chi_F_minus > 0):
        raise PreconditionError(
            "exponents must satisfy chi_E^- > chi_F^+ >= chi_F^- > chi_G^+ with chi_F^- > 0; "
            f"estimated {exps}", {"exponents": exps})
    o = split.orbit
    aE = step_logs(o, split, "log-mini-E", 1, n, j0, expanding="E", contracting="FG")
    rE = step_logs(o, split, "log-ratio", 1, n, j0, expanding="E", contracting="FG")
    aEF = step_logs(o, split, "log-mini-E", 1, n, j0, expanding="EF", contracting="G")
    rEF = step_logs(o, split, "log-ratio", 1, n, j0, expanding="EF", contracting="G")
    h1 = hd_times(aE, rE, log_lambda1, log_lambda2)
    h2 = hd_times(aEF, rEF, log_lambda1, log_lambda2)
    common = np.intersect1d(h1.times, h2.times)
    if common.size == 0:
        raise NoHyperbolicTimes("the two hyperbolic-time sets do not intersect",
                                {"exponents": exps, "hd_E": len(h1), "hd_EF": len(h2)})
    hd = TimeSet(common, n, {"op": "hd_intersection", "log_lambda1": log_lambda1,
                             "log_lambda2": log_lambda2})
    outer = grow_unstable(system, split, params, hd, j0, bundle="EF")
    inner = grow_unstable(system, split, params, hd, j0, bundle="E")
    if outer.mesh.j != inner.mesh.j:
        # stop times can differ by convergence; regrow the earlier one to the later time
        t = max(outer.mesh.j, inner.mesh.j) - j0
        hd_t = TimeSet(common[common <= t], n, hd.params)
        p2 = replace(params, cert_depth=max(params.cert_depth, t))
        outer = grow_unstable(system, split, p2, hd_t, j0, bundle="EF")
        inner = grow_unstable(system, split, p2, hd_t, j0, bundle="E")
    dev = graph_deviation(outer, inner)
    report = {"inclusion_deviation": dev, "exponents": exps, "times": len(hd),
              "tangency_E": tangent_alignment(inner.mesh, split),
              "tangency_EF": tangent_alignment(outer.mesh, split)}
    if dev > params.tol_c1:
        raise NestingError(f"inclusion deviation {dev:.3e} exceeds tol_c1={params.tol_c1:g}", report)
    return outer, inner, report


def calibrate_a_r(system: SmoothSystem, split: SplittingField, sigma1: float, sigma2: float,
                  log_lambda1: float, log_lambda2: float, hd: TimeSet, j0: int = 0,
                  bundle: str = "E", n_half: int = 10, a0: float = 0.5, r0: float = 0.1,
                  floor: float = 1e-4, probe: int = 5) -> tuple[float, float, list]:
    """Halve a (alignment/cone failures) or r (cut/contraction failures) until the
    first ``probe`` hyperbolic times pass with a disk tilted to the cone boundary."""
    if len(hd) == 0:
        raise PreconditionError("calibration needs a nonempty hyperbolic-time set")
    if not (1 < sigma1 < np.exp(log_lambda1) and 1 < sigma2 < np.exp(log_lambda2)):
        raise ValueError("need 1 < sigma1 < lambda1 and 1 < sigma2 < lambda2")
    times = hd.times[:probe]
    a, r = a0, r0
    trace = []
    while True:
        failure = _probe(system, split, j0, bundle, a, r, n_half, sigma1, sigma2, times)
        trace.append({"a": a, "r": r, "failure": failure})
        if failure is None:
            return a, r, trace
        if failure == "a":
            a /= 2
        else:
            r /= 2
        if a < floor or r < floor:
            raise CalibrationError(f"calibration reached the floor (a={a:g}, r={r:g})",
                                   {"trace": trace})


def _probe(system, split, j0, bundle, a, r, n_half, sigma1, sigma2, times) -> Optional[str]:
    h = r / n_half
    disk = seed_disk(system, split, j0, r, a, h, bundle)
    Ff = split.frame(split.complement_name(bundle), j0)
    if disk.normal.shape[1]:
        # tilt so that the seed sits just inside the cone boundary
        unit = replace(disk, slopes=np.broadcast_to(np.eye(disk.normal.shape[1], disk.k)[None], disk.slopes.shape).copy())
        w = cone_width(disk.frame, Ff, unit.tangents[0])
        tilt = a * (1 - 1e-9) / w if w > 0 else a
        disk = seed_disk(system, split, j0, r, a, h, bundle, tilt=tilt)
    history = {j0: disk}
    worst = _align_ratio(tangent_alignment(disk, split, system=system, history=history), sigma2, 0, a)
    groups = []
    for t in range(1, int(times[-1]) + 1):
        try:
            disk = push_disk(system, split, disk, a, max_radius=r)
        except ConeViolation as exc:
            # at the center the bundle is exact; elsewhere a violation reflects curvature
            return "a" if exc.report["center_width"] > a + 1e-12 else "r"
        except FoldOver:
            return "r"
        except CutError:
            return "r"
        history[j0 + t] = disk
        al = tangent_alignment(disk, split, system=system, history=history)
        worst = max(worst, _align_ratio(al, sigma2, t, a))
        if t in times:
            if worst > 1 + 1e-12:
                return "a"
            try:
                cut = cut_ball(disk, None, r)
            except CutError:
                return "r"
            groups.append((j0 + t, cut.offsets))
    res = backward_ratios(system, groups, sigma1, depths=[g[0] - j0 for g in groups],
                          history=history, r=r)
    if any(x["max_q"] > 1 + F2_SLACK for x in res):
        return "r"
    return None
