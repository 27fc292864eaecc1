"""Invertible smooth systems, built-in examples and orbit generation.

Points carry an integer time index alongside their chart coordinates.
Autonomous systems ignore it; skew products use it to look up the base
point in a stored driving window, which keeps their inverses exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

TOL_INV = 1e-12
NEWTON_MAX_ITER = 50

Evaluator = Callable[[np.ndarray, int], np.ndarray]


class PhaseError(ValueError):
    """Raised on dimension/space mismatches or failed inversions."""


@dataclass(frozen=True, eq=False)
class Point:
    coords: np.ndarray
    space: str
    index: int = 0

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float).reshape(-1)
        object.__setattr__(self, "coords", c)

    @property
    def dim(self) -> int:
        return self.coords.shape[0]

    def __repr__(self):
        return f"Point({self.coords.tolist()}, {self.space!r}, index={self.index})"


def space_dim(space: str) -> int:
    try:
        return int(space.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        raise PhaseError(f"malformed space tag {space!r}") from None


def is_torus(space: str) -> bool:
    return space.startswith("torus-")


def wrap(coords: np.ndarray, space: str) -> np.ndarray:
    """Reduce torus coordinates into [0, 1); identity elsewhere."""
    if not is_torus(space):
        return coords
    out = coords - np.floor(coords)
    # x - floor(x) rounds to 1.0 for tiny negative x
    out[out >= 1.0] = 0.0
    return out


def min_image(delta: np.ndarray, space: str) -> np.ndarray:
    if not is_torus(space):
        return delta
    return delta - np.round(delta)


@dataclass(eq=False)
class SmoothSystem:
    """An invertible map with tangent maps, evaluated on batches of coordinates.

    Every evaluator has signature ``f(coords, index)`` where ``coords`` has
    shape ``(..., dim)`` and ``index`` is the time index of the input.
    ``forward_offset(base, v, index)`` returns ``f(base + v) - f(base)`` in
    chart coordinates; linear systems override it with an exact version so
    that small disks keep full relative precision.
    """

    name: str
    dim: int
    space: str
    forward: Evaluator
    backward: Evaluator
    tangent: Evaluator
    tangent_backward: Optional[Evaluator] = None
    forward_offset: Optional[Callable[[np.ndarray, np.ndarray, int], np.ndarray]] = None
    backward_offset: Optional[Callable[[np.ndarray, np.ndarray, int], np.ndarray]] = None
    params: dict = field(default_factory=dict)
    index_range: tuple[float, float] = (-np.inf, np.inf)
    offset_linear: bool = False

    def __post_init__(self):
        if space_dim(self.space) != self.dim:
            raise PhaseError(f"space {self.space!r} does not match dim={self.dim}")
        if self.tangent_backward is None:
            self.tangent_backward = self._tangent_backward_by_inversion
        if self.forward_offset is None:
            self.forward_offset = self._offset_via_positions(self.forward)
        if self.backward_offset is None:
            self.backward_offset = self._offset_via_positions(self.backward)

    def _tangent_backward_by_inversion(self, c, j):
        return np.linalg.inv(self.tangent(self.backward(c, j), j - 1))

    def _offset_via_positions(self, f):
        space = self.space

        def offset(base, v, j):
            base = np.asarray(base, dtype=float)
            fb = f(base, j)
            fv = f(wrap(base + v, space), j)
            return min_image(fv - fb, space)

        return offset

    def check_point(self, x: Point):
        if x.dim != self.dim or x.space != self.space:
            raise PhaseError(
                f"point in {x.space!r} (dim {x.dim}) given to system on {self.space!r}"
            )

    def inverse(self) -> "SmoothSystem":
        """The system generated by the inverse map, with time running backward.

        Time index ``j`` of the inverse corresponds to index ``-j`` of the
        original, so orbits of the inverse read the stored window in reverse.
        """
        fwd, bwd = self.forward, self.backward
        tan, tanb = self.tangent, self.tangent_backward
        fo, bo = self.forward_offset, self.backward_offset
        lo, hi = self.index_range
        return SmoothSystem(
            name=f"inverse({self.name})",
            dim=self.dim,
            space=self.space,
            forward=lambda c, j: bwd(c, -j),
            backward=lambda c, j: fwd(c, -j),
            tangent=lambda c, j: tanb(c, -j),
            tangent_backward=lambda c, j: tan(c, -j),
            forward_offset=lambda b, v, j: bo(b, v, -j),
            backward_offset=lambda b, v, j: fo(b, v, -j),
            params={"inverse_of": self.name, **self.params},
            index_range=(-hi, -lo),
            offset_linear=self.offset_linear,
        )


def step(system: SmoothSystem, x: Point, direction: str = "forward") -> Point:
    system.check_point(x)
    if direction == "forward":
        c = system.forward(x.coords, x.index)
        j = x.index + 1
    elif direction == "backward":
        c = system.backward(x.coords, x.index)
        j = x.index - 1
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    return Point(wrap(np.asarray(c, dtype=float), system.space), system.space, j)


def tangent_at(system: SmoothSystem, x: Point) -> np.ndarray:
    system.check_point(x)
    return np.asarray(system.tangent(x.coords, x.index), dtype=float)


def chart_distance(space: str, y: Point, z: Point) -> float:
    if y.space != space or z.space != space:
        raise PhaseError(f"points in {y.space!r}/{z.space!r}, expected {space!r}")
    return float(np.linalg.norm(min_image(y.coords - z.coords, space)))


@dataclass(frozen=True, eq=False)
class OrbitSegment:
    """Points x_{-B}..x_N and tangent maps Df(x_j) for j in [-B, N-1]."""

    system_name: str
    space: str
    start_index: int
    points: np.ndarray
    jacobians: np.ndarray
    n_forward: int
    n_backward: int

    @property
    def base(self) -> Point:
        return self.point(0)

    def _row(self, j: int) -> int:
        if not -self.n_backward <= j <= self.n_forward:
            raise IndexError(f"orbit index {j} outside [-{self.n_backward}, {self.n_forward}]")
        return j + self.n_backward

    def point(self, j: int) -> Point:
        return Point(self.points[self._row(j)], self.space, self.start_index + j)

    def coords(self, j: int) -> np.ndarray:
        return self.points[self._row(j)]

    def jacobian(self, j: int) -> np.ndarray:
        if not -self.n_backward <= j < self.n_forward:
            raise IndexError(f"no tangent map cached for step {j}")
        return self.jacobians[j + self.n_backward]


def make_orbit(system: SmoothSystem, x0: Point, n_forward: int, n_backward: int = 0) -> OrbitSegment:
    if n_forward < 0 or n_backward < 0:
        raise ValueError("orbit lengths must be non-negative")
    system.check_point(x0)
    fwd = [x0.coords]
    x = x0
    for _ in range(n_forward):
        x = step(system, x, "forward")
        fwd.append(x.coords)
    bwd = []
    x = x0
    for _ in range(n_backward):
        x = step(system, x, "backward")
        bwd.append(x.coords)
    points = np.array(bwd[::-1] + fwd, dtype=float).reshape(n_backward + n_forward + 1, system.dim)
    idx = np.arange(-n_backward, n_forward) + x0.index
    if len(idx):
        jac = np.array([system.tangent(points[r], int(idx[r])) for r in range(len(idx))], dtype=float)
    else:
        jac = np.zeros((0, system.dim, system.dim))
    return OrbitSegment(system.name, system.space, x0.index, points, jac, n_forward, n_backward)


def newton_inverse(forward: Evaluator, tangent: Evaluator, space: str,
                   tol: float = TOL_INV, max_iter: int = NEWTON_MAX_ITER) -> Evaluator:
    """Backward evaluator obtained by Newton's method on ``forward(y) = x``.

    The initial guess is ``x`` itself; user systems close to the identity or
    with a good analytic guess should pass their own backward instead.
    """

    def backward(c, j):
        target = np.asarray(c, dtype=float)
        y = target.copy()
        for _ in range(max_iter):
            r = min_image(forward(y, j - 1) - target, space)
            if np.max(np.abs(r)) <= tol:
                return wrap(y, space)
            J = tangent(y, j - 1)
            y = y - np.linalg.solve(J, r[..., None])[..., 0]
        raise PhaseError(f"Newton inversion did not reach tol={tol} in {max_iter} iterations")

    return backward


def user_system(name: str, space: str, forward: Evaluator, tangent: Evaluator,
                backward: Optional[Evaluator] = None, **params) -> SmoothSystem:
    """Wrap user-supplied callables; without ``backward`` Newton inversion is used."""
    dim = space_dim(space)
    if backward is None:
        backward = newton_inverse(forward, tangent, space)
        params = {**params, "inversion": "newton"}
    return SmoothSystem(name, dim, space, forward, backward, tangent, params=params)


def linear_system(name: str, matrix, space: str) -> SmoothSystem:
    A = np.asarray(matrix, dtype=float)
    Ainv = np.linalg.inv(A)
    if is_torus(space):
        Ai = np.rint(Ainv)
        if not (np.allclose(A, np.rint(A)) and np.allclose(Ainv, Ai)):
            raise PhaseError("torus automorphisms need integer matrices with integer inverse")
        Ainv = Ai
    d = A.shape[0]

    def fwd(c, j):
        return wrap(np.asarray(c, dtype=float) @ A.T, space)

    def bwd(c, j):
        return wrap(np.asarray(c, dtype=float) @ Ainv.T, space)

    def tan(c, j):
        c = np.asarray(c)
        return np.broadcast_to(A, c.shape[:-1] + (d, d)).copy()

    def tanb(c, j):
        c = np.asarray(c)
        return np.broadcast_to(Ainv, c.shape[:-1] + (d, d)).copy()

    return SmoothSystem(
        name, d, space, fwd, bwd, tan, tanb,
        forward_offset=lambda b, v, j: np.asarray(v, dtype=float) @ A.T,
        backward_offset=lambda b, v, j: np.asarray(v, dtype=float) @ Ainv.T,
        params={"matrix": A.tolist()},
        offset_linear=True,
    )


def cat2() -> SmoothSystem:
    """Arnold's cat map [[2,1],[1,1]] on the 2-torus."""
    return linear_system("cat2", [[2, 1], [1, 1]], "torus-2")


def diag3() -> SmoothSystem:
    """diag(4, 2, 1/8) on R^3, a hyperbolic fixed point at the origin."""
    return linear_system("diag3", np.diag([4.0, 2.0, 0.125]), "euclidean-3")


# ---------------------------------------------------------------------------
# Skew products over the doubling map


def doubling_orbit(bits: np.ndarray) -> np.ndarray:
    """Base points theta_j = 0.b_j b_{j+1} ... b_{j+52} (binary).

    This realizes the doubling map theta -> 2 theta mod 1 on a Lebesgue-typical
    point without the 53-step collapse of floating-point doubling.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    n = len(bits) - 53
    if n <= 0:
        raise ValueError("need more than 53 bits")
    packed = np.packbits(np.concatenate([bits, np.zeros(64, dtype=np.uint8)]))
    win = np.lib.stride_tricks.sliding_window_view(packed, 8)
    words = np.zeros(len(win), dtype=np.uint64)
    for i in range(8):
        words |= win[:, i].astype(np.uint64) << np.uint64(56 - 8 * i)
    j = np.arange(n)
    w = words[j // 8] << (j % 8).astype(np.uint64)
    return (w >> np.uint64(11)).astype(np.float64) * 2.0**-53


PROFILE_KINDS = ("constant", "two_state", "doubling")


def make_profile(spec: dict) -> Callable[[np.ndarray], np.ndarray]:
    """Log-rate as a function of the base point.

    ``constant``: {"value"}; ``two_state``: {"high", "low", "freq"} giving
    ``high`` when theta < freq; ``doubling``: {"mean", "amplitude"} giving
    mean + amplitude * cos(2 pi theta).
    """
    kind = spec.get("kind", "constant")
    if kind == "constant":
        v = float(spec["value"])
        return lambda th: np.full(np.shape(th), v)
    if kind == "two_state":
        hi, lo, p = float(spec["high"]), float(spec["low"]), float(spec["freq"])
        if not 0.0 <= p <= 1.0:
            raise ValueError("two_state freq must lie in [0, 1]")
        return lambda th: np.where(np.asarray(th) < p, hi, lo)
    if kind == "doubling":
        m, amp = float(spec["mean"]), float(spec.get("amplitude", 0.0))
        return lambda th: m + amp * np.cos(2 * np.pi * np.asarray(th))
    raise ValueError(f"unknown profile kind {kind!r}; expected one of {PROFILE_KINDS}")


def profile_mean(spec: dict) -> float:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return float(spec["value"])
    if kind == "two_state":
        p = float(spec["freq"])
        return p * float(spec["high"]) + (1 - p) * float(spec["low"])
    return float(spec["mean"])


class SkewProduct(SmoothSystem):
    """Block-diagonal fiber cocycle over a stored doubling-map window.

    Fiber coordinates split into blocks; block ``b`` is scaled by
    ``exp(rate_b(theta_j))``. With ``coupling != 0`` later blocks receive a
    quadratic push from earlier ones,

        q_b' = exp(rate_b) * (q_b + coupling * |q_0..q_{b-1}|^2),

    which leaves the zero section invariant with block-diagonal tangent
    there, but bends the invariant manifolds off it.
    """

    def __init__(self, dims, profiles, coupling: float = 0.0, n_forward: int = 1000,
                 n_backward: int = 0, seed: int = 0, rng_bits: Optional[np.ndarray] = None,
                 name: str = "skew-nonuniform"):
        dims = tuple(int(k) for k in dims)
        if len(dims) != len(profiles):
            raise ValueError("one exponent profile per block")
        if any(k < 1 or k > 3 for k in dims):
            raise ValueError("block dimensions must lie in 1..3")
        self.dims = dims
        self.profile_specs = [dict(p) for p in profiles]
        self.rates = [make_profile(p) for p in self.profile_specs]
        self.coupling = float(coupling)
        self.n_fwd, self.n_bwd = int(n_forward), int(n_backward)
        total = self.n_fwd + self.n_bwd + 1
        if rng_bits is None:
            gen = np.random.Generator(np.random.Philox(seed))
            rng_bits = gen.integers(0, 2, size=total + 53, dtype=np.uint8)
        self.theta = doubling_orbit(rng_bits[: total + 53])
        # rows: block rates at window index j (row j + n_bwd)
        self.logs = np.stack([r(self.theta) for r in self.rates], axis=1)
        self.slices = []
        o = 0
        for k in dims:
            self.slices.append(slice(o, o + k))
            o += k
        d = o
        self.scale_vec = np.repeat(np.arange(len(dims)), dims)
        super().__init__(
            name=name,
            dim=d,
            space=f"euclidean-{d}",
            forward=self._fwd,
            backward=self._bwd,
            tangent=self._tan,
            tangent_backward=self._tanb,
            forward_offset=self._fwd_offset,
            backward_offset=self._bwd_offset,
            params={"dims": list(dims), "profiles": self.profile_specs,
                    "coupling": self.coupling, "seed": seed,
                    "window": [-self.n_bwd, self.n_fwd]},
            index_range=(-self.n_bwd, self.n_fwd),
            offset_linear=self.coupling == 0.0,
        )

    def _fwd_offset(self, b, v, j):
        if self.coupling == 0.0:
            return self._fwd(np.asarray(v, dtype=float), j)
        return self._fwd(np.asarray(b) + v, j) - self._fwd(b, j)

    def _bwd_offset(self, b, v, j):
        if self.coupling == 0.0:
            return self._bwd(np.asarray(v, dtype=float), j)
        return self._bwd(np.asarray(b) + v, j) - self._bwd(b, j)

    def _row(self, j: int) -> int:
        if not -self.n_bwd <= j <= self.n_fwd:
            raise PhaseError(
                f"base index {j} outside stored window [-{self.n_bwd}, {self.n_fwd}]")
        return j + self.n_bwd

    def block_logs(self, j: int) -> np.ndarray:
        return self.logs[self._row(j)]

    def window_logs(self, start: int, n: int) -> np.ndarray:
        """Per-step block log-rates for indices start..start+n-1, shape (n, blocks)."""
        r0 = self._row(start)
        self._row(start + n - 1)
        return self.logs[r0:r0 + n]

    def _scales(self, j):
        return np.exp(self.block_logs(j))[self.scale_vec]

    def _push(self, c):
        # quadratic term added to block b: coupling * sum of squares of blocks < b
        out = np.zeros_like(c)
        acc = np.zeros(c.shape[:-1])
        for s in self.slices:
            out[..., s] = acc[..., None]
            acc = acc + np.sum(c[..., s] ** 2, axis=-1)
        return self.coupling * out

    def _fwd(self, c, j):
        c = np.asarray(c, dtype=float)
        if self.coupling == 0.0:
            return c * self._scales(j)
        return (c + self._push(c)) * self._scales(j)

    def _bwd(self, c, j):
        c = np.asarray(c, dtype=float)
        y = c / self._scales(j - 1)
        if self.coupling == 0.0:
            return y
        # blocks are recovered in order; block b needs the already-recovered blocks < b
        out = np.empty_like(y)
        acc = np.zeros(y.shape[:-1])
        for s in self.slices:
            out[..., s] = y[..., s] - self.coupling * acc[..., None]
            acc = acc + np.sum(out[..., s] ** 2, axis=-1)
        return out

    def _tan(self, c, j):
        c = np.asarray(c, dtype=float)
        d = self.dim
        J = np.broadcast_to(np.eye(d), c.shape[:-1] + (d, d)).copy()
        if self.coupling != 0.0:
            prev = np.zeros(c.shape[:-1] + (d,))
            for s in self.slices:
                J[..., s, :] += self.coupling * 2.0 * prev[..., None, :]
                prev[..., s] = c[..., s]
        return self._scales(j)[:, None] * J

    def _tanb(self, c, j):
        return np.linalg.inv(self._tan(self._bwd(c, j), j - 1))


def skew_nonuniform(profile_E=None, profile_F=None, dims=(1, 1), coupling: float = 0.0,
                    n_forward: int = 1000, n_backward: int = 0, seed: int = 0) -> SkewProduct:
    """Default: two-state E-rate (1.5 w.p. 0.8, -0.5 w.p. 0.2; mean 1.1), F-rate -1.0."""
    if profile_E is None:
        profile_E = {"kind": "two_state", "high": 1.5, "low": -0.5, "freq": 0.8}
    if profile_F is None:
        profile_F = {"kind": "constant", "value": -1.0}
    return SkewProduct(dims, [profile_E, profile_F], coupling=coupling,
                       n_forward=n_forward, n_backward=n_backward, seed=seed)


BUILTINS = {"cat2": cat2, "diag3": diag3, "skew-nonuniform": skew_nonuniform}


def builtin(name: str, **kwargs) -> SmoothSystem:
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise PhaseError(f"unknown built-in system {name!r}; known: {sorted(BUILTINS)}") from None
    return factory(**kwargs)


def zero_point(system: SmoothSystem, index: int = 0) -> Point:
    return Point(np.zeros(system.dim), system.space, index)
