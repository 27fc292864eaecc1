"""Invariant splittings along orbits and the linear algebra around them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .phase import OrbitSegment, SmoothSystem

TOL_SPLIT = 1e-6
DEFAULT_SETTLE = 60


class SingularRestriction(ArithmeticError):
    pass


class SplittingError(RuntimeError):
    pass


def orthonormalize(vectors) -> np.ndarray:
    A = np.asarray(vectors, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    Q, R = np.linalg.qr(A)
    if np.min(np.abs(np.diag(R))) <= 1e-14 * max(1.0, np.max(np.abs(R))):
        raise SingularRestriction("vectors do not span a subspace of full rank")
    return Q * np.sign(np.diag(R))


@dataclass(frozen=True, eq=False)
class Subspace:
    frame: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.frame, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if not np.allclose(F.T @ F, np.eye(F.shape[1]), atol=1e-12, rtol=0):
            F = orthonormalize(F)
        object.__setattr__(self, "frame", F)

    @classmethod
    def span(cls, *vectors) -> "Subspace":
        return cls(orthonormalize(np.column_stack(vectors)))

    @classmethod
    def axes(cls, dim: int, *idx: int) -> "Subspace":
        return cls(np.eye(dim)[:, list(idx)])

    @property
    def ambient(self) -> int:
        return self.frame.shape[0]

    @property
    def dim(self) -> int:
        return self.frame.shape[1]

    def projector(self) -> np.ndarray:
        return self.frame @ self.frame.T

    def complement(self) -> "Subspace":
        Q, _ = np.linalg.qr(self.frame, mode="complete")
        return Subspace(Q[:, self.dim:])

    def __add__(self, other: "Subspace") -> "Subspace":
        return Subspace(orthonormalize(np.hstack([self.frame, other.frame])))


def _as_frame(U) -> np.ndarray:
    return U.frame if isinstance(U, Subspace) else np.asarray(U, dtype=float)


def _restricted_singulars(A, U) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    F = _as_frame(U)
    if A.shape[1] != F.shape[0]:
        raise ValueError(f"matrix of shape {A.shape} cannot act on a frame in R^{F.shape[0]}")
    return np.linalg.svd(A @ F, compute_uv=False)


def mini_norm(A, U) -> float:
    """Smallest singular value of A restricted to U."""
    s = _restricted_singulars(A, U)
    if s[-1] <= 1e-300 or s[-1] <= 1e-15 * s[0]:
        raise SingularRestriction("restriction of A to U is singular")
    return float(s[-1])


def restricted_norm(A, U) -> float:
    return float(_restricted_singulars(A, U)[0])


def grassmann_distance(U, V) -> float:
    """||P_U - P_V|| in operator norm, the sine of the largest principal angle."""
    Fu, Fv = _as_frame(U), _as_frame(V)
    if Fu.shape != Fv.shape:
        raise ValueError(f"subspaces of shapes {Fu.shape} and {Fv.shape} are not comparable")
    # for equal dimensions ||P_U - P_V|| = ||(I - P_V) F_U||
    R = Fu - Fv @ (Fv.T @ Fu)
    s = np.linalg.norm(R, 2) if R.size else 0.0
    return float(min(1.0, s))


def oblique_coefficients(E, F, v) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates (c_E, c_F) with v = E c_E + F c_F."""
    Fe, Ff = _as_frame(E), _as_frame(F)
    B = np.hstack([Fe, Ff])
    if B.shape[0] != B.shape[1]:
        raise ValueError("E and F must be complementary")
    if np.linalg.cond(B) > 1e12:
        raise SplittingError("degenerate splitting: E and F nearly intersect")
    c = np.linalg.solve(B, np.asarray(v, dtype=float))
    k = Fe.shape[1]
    return c[:k], c[k:]


def cone_contains(E, F, a: float, v) -> bool:
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise ValueError("zero vector has no direction")
    cE, cF = oblique_coefficients(E, F, v)
    return bool(np.linalg.norm(cF) <= a * np.linalg.norm(cE))


def cone_width(E, F, T) -> float:
    """Smallest a such that every vector of span(T) lies in the E-cone of width a."""
    Fe, Ff = _as_frame(E), _as_frame(F)
    B = np.hstack([Fe, Ff])
    C = np.linalg.solve(B, _as_frame(T))
    k = Fe.shape[1]
    CE, CF = C[:k], C[k:]
    if np.linalg.svd(CE, compute_uv=False)[-1] <= 1e-14:
        return np.inf
    return float(np.linalg.norm(CF @ np.linalg.inv(CE), 2))


BUNDLE_NAMES = ("E", "F", "G")


@dataclass(frozen=True, eq=False)
class SplittingField:
    """Frames of E, F (and G) at orbit indices lo..hi, stored as arrays (n, d, k)."""

    orbit: OrbitSegment
    lo: int
    hi: int
    frames: dict
    settle_used: int
    residual: dict

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n in BUNDLE_NAMES if n in self.frames)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.frames[n].shape[2] for n in self.names)

    def _row(self, j: int) -> int:
        if not self.lo <= j <= self.hi:
            raise IndexError(f"splitting known on [{self.lo}, {self.hi}], asked for {j}")
        return j - self.lo

    def frame(self, name: str, j: int) -> np.ndarray:
        """Frame of a bundle or a sum of consecutive bundles, e.g. 'E', 'FG', 'EF'."""
        parts = [self.frames[c][self._row(j)] for c in name]
        if len(parts) == 1:
            return parts[0]
        return orthonormalize(np.hstack(parts))

    def frames_window(self, name: str, start: int, n: int) -> np.ndarray:
        """Frames at indices start..start+n-1 as an (n, d, k) array."""
        r0 = self._row(start)
        self._row(start + n - 1)
        parts = [self.frames[c][r0:r0 + n] for c in name]
        if len(parts) == 1:
            return parts[0]
        Q, R = np.linalg.qr(np.concatenate(parts, axis=2))
        return Q * np.sign(np.diagonal(R, axis1=1, axis2=2))[:, None, :]

    def at(self, name: str, j: int) -> Subspace:
        return Subspace(self.frame(name, j))

    def complement_name(self, name: str) -> str:
        rest = "".join(n for n in self.names if n not in name)
        if not rest:
            raise ValueError(f"{name!r} has no complementary bundle in {self.names}")
        return rest

    @property
    def max_residual(self) -> float:
        return max(self.residual.values()) if self.residual else 0.0


def _generic_frame(d: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return orthonormalize(rng.standard_normal((d, k)))


def _forward_flags(orbit: OrbitSegment, k: int, seed: int) -> np.ndarray:
    """QR-propagated k-frames at every orbit point, pushed from x_{-B}."""
    d = orbit.points.shape[1]
    n_pts = orbit.points.shape[0]
    out = np.empty((n_pts, d, k))
    Q = _generic_frame(d, k, seed)
    out[0] = Q
    for r in range(n_pts - 1):
        Q = orthonormalize(orbit.jacobians[r] @ Q)
        out[r + 1] = Q
    return out


def _backward_flags(orbit: OrbitSegment, k: int, seed: int) -> np.ndarray:
    d = orbit.points.shape[1]
    n_pts = orbit.points.shape[0]
    out = np.empty((n_pts, d, k))
    Q = _generic_frame(d, k, seed)
    out[-1] = Q
    for r in range(n_pts - 2, -1, -1):
        Q = orthonormalize(np.linalg.solve(orbit.jacobians[r], Q))
        out[r] = Q
    return out


def _intersection(A: np.ndarray, B: np.ndarray, k: int) -> np.ndarray:
    U, s, _ = np.linalg.svd(A.T @ B)
    return orthonormalize(A @ U[:, :k])


def invariance_residual(orbit: OrbitSegment, frames: np.ndarray, lo: int) -> float:
    """max_j grassmann_distance(Df(x_j) frame_j, frame_{j+1}), batched over j."""
    n = frames.shape[0] - 1
    if n < 1:
        return 0.0
    r0 = lo + orbit.n_backward
    J = orbit.jacobians[r0:r0 + n]
    if r0 < 0 or J.shape[0] != n:
        raise IndexError(f"orbit has no Jacobians for steps {lo}..{lo + n - 1}")
    Q, R = np.linalg.qr(J @ frames[:-1])
    d = np.abs(np.diagonal(R, axis1=1, axis2=2))
    if np.any(d.min(axis=1) <= 1e-14 * np.maximum(1.0, np.abs(R).max(axis=(1, 2)))):
        raise SingularRestriction("cocycle collapses a bundle frame")
    nxt = frames[1:]
    res = Q - nxt @ (np.swapaxes(nxt, 1, 2) @ Q)
    return float(min(1.0, np.linalg.norm(res, 2, axis=(1, 2)).max()))


def estimate_splitting(system: SmoothSystem, orbit: OrbitSegment, dims: Sequence[int],
                       settle: int = DEFAULT_SETTLE, tol: float = TOL_SPLIT,
                       seed: int = 12345, check: bool = True) -> SplittingField:
    """Oseledec-type splitting along ``orbit`` by settled forward/backward frames.

    E is the most expanding ``dims[0]`` directions (forward flag), the last
    bundle the most contracting (backward flag); a middle bundle is the
    intersection of the forward flag of dimension dimE+dimF and the backward
    flag of dimension dimF+dimG. Frames are reported on orbit indices
    [-B + settle, N - settle].
    """
    dims = tuple(int(k) for k in dims)
    d = orbit.points.shape[1]
    if len(dims) not in (2, 3) or sum(dims) != d or min(dims) < 1:
        raise ValueError(f"bundle dimensions {dims} must be 2 or 3 positive parts summing to {d}")
    lo, hi = -orbit.n_backward + settle, orbit.n_forward - settle
    if lo > hi:
        raise SplittingError(
            f"settle={settle} leaves no reported window in an orbit of "
            f"[-{orbit.n_backward}, {orbit.n_forward}]")
    rows = slice(lo + orbit.n_backward, hi + orbit.n_backward + 1)
    frames = {}
    if len(dims) == 2:
        frames["E"] = _forward_flags(orbit, dims[0], seed)[rows]
        frames["F"] = _backward_flags(orbit, dims[1], seed + 1)[rows]
    else:
        kE, kF, kG = dims
        fE = _forward_flags(orbit, kE, seed)[rows]
        fEF = _forward_flags(orbit, kE + kF, seed + 2)[rows]
        bG = _backward_flags(orbit, kG, seed + 1)[rows]
        bFG = _backward_flags(orbit, kF + kG, seed + 3)[rows]
        frames["E"] = fE
        frames["F"] = np.array([_intersection(a, b, kF) for a, b in zip(fEF, bFG)])
        frames["G"] = bG
    residual = {n: invariance_residual(orbit, f, lo) for n, f in frames.items()}
    split = SplittingField(orbit, lo, hi, frames, settle, residual)
    if check and split.max_residual > tol:
        raise SplittingError(
            f"invariance residual {split.max_residual:.3e} exceeds tol={tol:g}: "
            "settle window too short or exponent gap too small")
    return split


def exact_splitting(orbit: OrbitSegment, subspaces: dict, lo: Optional[int] = None,
                    hi: Optional[int] = None) -> SplittingField:
    """SplittingField with constant, externally known bundles (e.g. coordinate axes)."""
    lo = -orbit.n_backward if lo is None else lo
    hi = orbit.n_forward if hi is None else hi
    n = hi - lo + 1
    frames = {k: np.repeat(_as_frame(v)[None], n, axis=0) for k, v in subspaces.items()}
    residual = {k: invariance_residual(orbit, f, lo) if n > 1 else 0.0 for k, f in frames.items()}
    return SplittingField(orbit, lo, hi, frames, 0, residual)


def restricted_cocycle(split: SplittingField, name: str, j: int) -> np.ndarray:
    """k x k matrix of Df(x_j): bundle(x_j) -> bundle(x_{j+1}) in the stored frames."""
    A = split.frame(name, j + 1).T @ split.orbit.jacobian(j) @ split.frame(name, j)
    return A


def block_log_norms(split: SplittingField, name: str, start: int, length: int) -> tuple[float, float]:
    """(log mini-norm, log norm) of Df^length restricted to the bundle at x_start.

    Products are rescaled every step so long blocks do not overflow.
    """
    Fr = split.frames_window(name, start, length + 1)
    r0 = start + split.orbit.n_backward
    J = split.orbit.jacobians[r0:r0 + length]
    if r0 < 0 or J.shape[0] != length:
        raise IndexError(f"orbit has no Jacobians for steps {start}..{start + length - 1}")
    A = np.einsum("nik,nij,njl->nkl", Fr[1:], J, Fr[:-1])
    if A.shape[1] == 1:
        a = np.abs(A[:, 0, 0])
        if np.any(a == 0.0):
            raise SingularRestriction(
                f"restricted cocycle vanishes at step {start + int(np.argmin(a))}")
        t = float(np.sum(np.log(a)))
        return t, t
    P = np.eye(A.shape[1])
    log_scale = 0.0
    for i, j in enumerate(range(start, start + length)):
        P = A[i] @ P
        s = np.linalg.norm(P, 2)
        if s == 0.0:
            raise SingularRestriction(f"restricted cocycle vanishes at step {j}")
        P /= s
        log_scale += np.log(s)
    sv = np.linalg.svd(P, compute_uv=False)
    if sv[-1] <= 0.0:
        raise SingularRestriction("restricted product is singular")
    return log_scale + float(np.log(sv[-1])), log_scale + float(np.log(sv[0]))


@dataclass(frozen=True)
class LyapunovEstimate:
    chi_E_minus: float
    chi_E_plus: float
    chi_F_minus: float
    chi_F_plus: float
    window: int
    chi_G_minus: Optional[float] = None
    chi_G_plus: Optional[float] = None


def lyapunov_estimates(orbit: OrbitSegment, split: SplittingField, N: int,
                       start: int = 0) -> LyapunovEstimate:
    if N < 1 or start + N > min(orbit.n_forward, split.hi):
        raise ValueError(f"window of {N} steps from {start} exceeds the splitting/orbit")
    vals = {}
    for name in split.names:
        lo_, hi_ = block_log_norms(split, name, start, N)
        vals[name] = (lo_ / N, hi_ / N)
    g = vals.get("G", (None, None))
    return LyapunovEstimate(vals["E"][0], vals["E"][1], vals["F"][0], vals["F"][1], N, g[0], g[1])
