"""Integer-time analytics along an orbit.

Every window condition "average of a_{n-k}..a_{n-1} compared with c for all
1 <= k <= n" is decided in O(N) through the shifted partial sums
P_n = sum_{i<n} (a_i - c): the window sum is P_n - P_{n-k}, so the condition
reduces to comparing P_n with the running max/min of P_0..P_{n-1}. Prefix
conditions ("for all k <= n, average of a_0..a_{k-1}") only need the sign of
P_k. Shifting by c before summing makes exact ties (a_i == c) exact zeros.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bundle import SplittingField, block_log_norms
from .phase import OrbitSegment

KINDS = ("log-mini-E", "log-norm-F", "log-ratio", "custom")


class TimesError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StepLogSequence:
    values: np.ndarray
    kind: str = "custom"
    ell: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.size == 0:
            raise TimesError("empty sequence")
        if not np.all(np.isfinite(v)):
            raise TimesError("step logs must be finite")
        if self.kind not in KINDS:
            raise TimesError(f"unknown kind {self.kind!r}")
        if self.ell < 1:
            raise TimesError("block length ell must be >= 1")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    def __neg__(self):
        return StepLogSequence(-self.values, "custom", self.ell)


@dataclass(frozen=True, eq=False)
class TimeSet:
    times: np.ndarray
    horizon: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.int64).reshape(-1)
        if t.size and (t[0] < 1 or t[-1] > self.horizon or np.any(np.diff(t) <= 0)):
            raise TimesError("times must be strictly increasing within [1, horizon]")
        object.__setattr__(self, "times", t)

    def __len__(self):
        return self.times.size

    def __iter__(self):
        return iter(int(t) for t in self.times)

    def __contains__(self, n):
        i = np.searchsorted(self.times, n)
        return bool(i < self.times.size and self.times[i] == n)

    def as_set(self) -> set[int]:
        return set(int(t) for t in self.times)

    def mask(self) -> np.ndarray:
        m = np.zeros(self.horizon + 1, dtype=bool)
        m[self.times] = True
        return m

    def to_json(self, profile: Optional[np.ndarray] = None) -> str:
        if profile is None:
            profile = prefix_profile(self)
        return json.dumps({"times": self.times.tolist(), "horizon": int(self.horizon),
                           "params": self.params, "profile": np.asarray(profile).tolist()},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TimeSet":
        d = json.loads(text)
        return cls(np.array(d["times"], dtype=np.int64), int(d["horizon"]), d.get("params", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "prefix_frequency"])
        for n, p in enumerate(prefix_profile(self), start=1):
            w.writerow([n, repr(float(p))])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class DensityStats:
    d_lower_est: float
    d_upper_est: float
    prefix_profile: np.ndarray
    n_min: int
    horizon: int


@dataclass(frozen=True)
class BlockVerdict:
    member_up_to: int
    required: int

    @property
    def is_member_truncated(self) -> bool:
        return self.member_up_to == self.required


# ---------------------------------------------------------------------------
# trace construction


def step_logs(orbit: OrbitSegment, split: SplittingField, kind: str, ell: int = 1,
              n_blocks: Optional[int] = None, start: int = 0,
              expanding: str = "E", contracting: Optional[str] = None) -> StepLogSequence:
    """Per-step logs of the restricted cocycle over blocks of ``ell`` steps.

    ``log-mini-E``: (1/ell) log m(Df^ell | E(f^{i ell} x)); ``log-norm-F``:
    (1/ell) log ||Df^ell | F||; ``log-ratio``: their difference. The bundle
    names may be overridden, e.g. expanding="EF", contracting="G".
    """
    if contracting is None:
        contracting = split.complement_name(expanding)
    avail = min(orbit.n_forward, split.hi) - start
    max_blocks = avail // ell
    if n_blocks is None:
        n_blocks = max_blocks
    if n_blocks < 1 or n_blocks > max_blocks:
        raise TimesError(f"orbit supports {max_blocks} blocks of length {ell}, asked for {n_blocks}")
    out = np.empty(n_blocks)
    for i in range(n_blocks):
        j = start + i * ell
        if kind == "log-mini-E":
            out[i] = block_log_norms(split, expanding, j, ell)[0]
        elif kind == "log-norm-F":
            out[i] = block_log_norms(split, contracting, j, ell)[1]
        elif kind == "log-ratio":
            out[i] = block_log_norms(split, expanding, j, ell)[0] - block_log_norms(split, contracting, j, ell)[1]
        else:
            raise TimesError(f"step_logs cannot build kind {kind!r}")
    return StepLogSequence(out / ell, kind, ell)


def _values(seq) -> np.ndarray:
    if isinstance(seq, StepLogSequence):
        return seq.values
    v = np.asarray(seq, dtype=float).reshape(-1)
    if v.size == 0:
        raise TimesError("empty sequence")
    return v


def _shifted_sums(a: np.ndarray, c: float) -> np.ndarray:
    """Array of P_0..P_N with P_n = sum_{i<n} (a_i - c). Works along the last axis."""
    P = np.cumsum(a - c, axis=-1)
    return np.concatenate([np.zeros(P.shape[:-1] + (1,)), P], axis=-1)


def _window_times(a: np.ndarray, c: float, sense: str) -> np.ndarray:
    """Boolean mask over n = 1..N of the all-windows condition ending at n.

    sense "ge": every window average >= c; "le": every window average <= c;
    "lt": every window average < c.
    """
    P = _shifted_sums(a, c)
    head, tail = P[..., :-1], P[..., 1:]
    if sense == "ge":
        return tail >= np.maximum.accumulate(head, axis=-1)
    best = np.minimum.accumulate(head, axis=-1)
    if sense == "le":
        return tail <= best
    if sense == "lt":
        return tail < best
    raise ValueError(sense)


def _to_timeset(mask: np.ndarray, params: dict) -> TimeSet:
    return TimeSet(np.flatnonzero(mask) + 1, mask.size, params)


def _prefix_length(a: np.ndarray, c: float, sense: str) -> int:
    """Largest n such that every prefix average over k <= n satisfies the sense."""
    P = _shifted_sums(a, c)[1:]
    bad = (P < 0) if sense == "ge" else (P > 0)
    hits = np.flatnonzero(bad)
    return int(hits[0]) if hits.size else int(P.size)


# ---------------------------------------------------------------------------
# time sets


def hyperbolic_times(seq, log_lambda1: float) -> TimeSet:
    """n such that (1/k) sum_{j=n-k}^{n-1} a_j >= log_lambda1 for all 1 <= k <= n."""
    a = _values(seq)
    return _to_timeset(_window_times(a, log_lambda1, "ge"),
                       {"op": "hyperbolic_times", "log_lambda1": log_lambda1})


def averaged_domination_prefix(seq_ratio, log_lambda2: float) -> int:
    """Largest n <= N with every prefix average of the ratio logs >= log_lambda2."""
    return _prefix_length(_values(seq_ratio), log_lambda2, "ge")


def hd_times(seqE, seqRatio, log_lambda1: float, log_lambda2: float) -> TimeSet:
    a, b = _values(seqE), _values(seqRatio)
    if a.size != b.size:
        raise TimesError(f"sequences of lengths {a.size} and {b.size} do not come from one orbit")
    for s in (seqE, seqRatio):
        if isinstance(s, StepLogSequence) and isinstance(seqE, StepLogSequence) and s.ell != seqE.ell:
            raise TimesError("sequences built with different block lengths")
    m = _window_times(a, log_lambda1, "ge")
    m[averaged_domination_prefix(b, log_lambda2):] = False
    return _to_timeset(m, {"op": "hd_times", "log_lambda1": log_lambda1,
                           "log_lambda2": log_lambda2})


def pliss_select(a, L: float, eta: float, zeta: float) -> TimeSet:
    """All n with (1/k) sum_{j=n-k}^{n-1} a_j < zeta for every 1 <= k <= n."""
    v = _values(a)
    if not eta < zeta < L:
        raise TimesError(f"need eta < zeta < L, got eta={eta}, zeta={zeta}, L={L}")
    over = np.flatnonzero(v > L)
    if over.size:
        raise TimesError(f"a[{int(over[0])}] = {v[over[0]]!r} exceeds the bound L={L}")
    return _to_timeset(_window_times(v, zeta, "lt"),
                       {"op": "pliss_select", "L": L, "eta": eta, "zeta": zeta})


def t_ell_times(trace, gamma: float) -> TimeSet:
    """n with (1/(k ell)) sum_{i=n-k}^{n-1} phi_ell(f^{i ell} x) <= gamma for all k <= n.

    ``trace`` holds phi_ell/ell per block, so the comparison is per step.
    """
    v = _values(trace)
    ell = trace.ell if isinstance(trace, StepLogSequence) else 1
    return _to_timeset(_window_times(v, gamma, "le"),
                       {"op": "t_ell_times", "gamma": gamma, "ell": ell})


def prefix_profile(ts: TimeSet) -> np.ndarray:
    """profile[n-1] = #{t in ts : t <= n} / n for n = 1..horizon."""
    m = ts.mask()[1:]
    return np.cumsum(m) / np.arange(1, ts.horizon + 1)


def density_window(horizon: int) -> int:
    return min(horizon, max(32, horizon // 4))


def density(ts: TimeSet, n_min: Optional[int] = None) -> DensityStats:
    """Lower/upper density estimates: min/max prefix frequency over n in [n_min, N]."""
    if ts.horizon < 1:
        raise TimesError("density needs horizon >= 1")
    prof = prefix_profile(ts)
    if n_min is None:
        n_min = density_window(ts.horizon)
    n_min = max(1, min(int(n_min), ts.horizon))
    tail = prof[n_min - 1:]
    return DensityStats(float(tail.min()), float(tail.max()), prof, n_min, ts.horizon)


# ---------------------------------------------------------------------------
# blocks


def block_H(trace, gamma: float) -> BlockVerdict:
    v = _values(trace)
    return BlockVerdict(_prefix_length(v, gamma, "le"), v.size)


def block_Lambda(seqE, seqF, gamma1: float, gamma2: float) -> BlockVerdict:
    a, b = _values(seqE), _values(seqF)
    if isinstance(seqE, StepLogSequence) and isinstance(seqF, StepLogSequence) and seqE.ell != seqF.ell:
        raise TimesError(f"block lengths differ: {seqE.ell} vs {seqF.ell}")
    if a.size != b.size:
        raise TimesError("traces of different length")
    m = min(_prefix_length(a, gamma1, "ge"), _prefix_length(b, gamma2, "le"))
    return BlockVerdict(m, a.size)


def block_to_domination_check(seqE, seqF, gamma1: float, gamma2: float,
                              N: Optional[int] = None) -> bool:
    """Every n verified in the Lambda block is also verified in Delta at rate gamma1 - gamma2."""
    if not gamma1 > gamma2:
        raise TimesError("need gamma1 > gamma2")
    a, b = _values(seqE), _values(seqF)
    if N is not None:
        a, b = a[:N], b[:N]
    m = block_Lambda(a, b, gamma1, gamma2).member_up_to
    if m == 0:
        return True
    return averaged_domination_prefix(a[:m] - b[:m], gamma1 - gamma2) >= m


def high_density_block(seqE, seqRatio, gamma1: float, gamma2: float, theta: float,
                       ell: Optional[int] = None) -> tuple[bool, DensityStats]:
    if not gamma1 > max(0.0, gamma2):
        raise TimesError("need gamma1 > max(0, gamma2)")
    if ell is not None:
        for s in (seqE, seqRatio):
            if isinstance(s, StepLogSequence) and s.ell != ell:
                raise TimesError(f"trace built with ell={s.ell}, expected {ell}")
    hd = hd_times(seqE, seqRatio, gamma1, gamma1 - gamma2)
    stats = density(hd)
    return stats.d_lower_est >= theta, stats


# ---------------------------------------------------------------------------
# batched variants used by the Monte Carlo estimators (rows are orbits)


def batch_prefix_lengths(a: np.ndarray, c: float, sense: str) -> np.ndarray:
    P = np.cumsum(np.asarray(a, dtype=float) - c, axis=-1)
    bad = (P < 0) if sense == "ge" else (P > 0)
    first = np.argmax(bad, axis=-1)
    return np.where(bad.any(axis=-1), first, P.shape[-1])


def batch_hd_lower_density(aE: np.ndarray, aR: np.ndarray, log_lambda1: float,
                           log_lambda2: float) -> np.ndarray:
    N = aE.shape[-1]
    m = _window_times(np.asarray(aE, dtype=float), log_lambda1, "ge")
    pre = batch_prefix_lengths(aR, log_lambda2, "ge")
    m &= np.arange(N)[None, :] < pre[:, None]
    prof = np.cumsum(m, axis=-1) / np.arange(1, N + 1)
    n_min = density_window(N)
    return prof[:, n_min - 1:].min(axis=-1)


# ---------------------------------------------------------------------------
# calibration of the Pliss-like constant


def calibrate_rho(L: float, eta: float, zeta: float, theta: float, N: int = 1000,
                  samples: int = 1000, seed: int = 0, iters: int = 14) -> dict:
    """Smallest rho (on a bisection grid) such that sampled sequences with
    small-value frequency > rho always give >= theta*N Pliss times.

    Samples are i.i.d. with small draws just below eta and large draws equal
    to L, the least favourable values the hypotheses allow.
    """
    if not eta < zeta < L:
        raise TimesError("need eta < zeta < L")
    small = np.nextafter(eta, -np.inf)
    root = np.random.SeedSequence(seed)

    def ok(rho: float, ss) -> bool:
        rng = np.random.Generator(np.random.Philox(ss))
        a = np.where(rng.random((samples, N)) < rho, small, L)
        freq = (a < eta).mean(axis=1)
        keep = freq > rho
        if not keep.any():
            return True
        counts = _window_times(a[keep], zeta, "lt").sum(axis=1)
        return bool(np.all(counts >= theta * N))

    lo, hi = 0.0, 1.0
    trace = []
    for ss in root.spawn(iters):
        mid = 0.5 * (lo + hi)
        good = ok(mid, ss)
        trace.append((mid, good))
        if good:
            hi = mid
        else:
            lo = mid
    return {"rho": hi, "trace": trace, "L": L, "eta": eta, "zeta": zeta, "theta": theta,
            "N": N, "samples": samples}
