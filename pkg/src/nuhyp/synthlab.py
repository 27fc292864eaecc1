"""Synthetic sequences and cocycles with prescribed statistics, plus the
literal O(N^2) oracles the fast time-set code is checked against."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .phase import PROFILE_KINDS, SkewProduct
from .times import TimeSet

BRUTE_FORCE_MAX_N = 4096
SENSES = ("strict-below", "nonstrict-below", "nonstrict-above")


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator; every synthetic object is a pure function of its seed."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@dataclass
class SequenceSpec:
    length: int
    bound: float
    small_value: float
    small_fraction: float
    big_value: float
    seed: int = 0

    def validate(self):
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ValueError(f"small_fraction={self.small_fraction} is not a probability")
        if not self.small_value < self.big_value <= self.bound:
            raise ValueError("need small_value < big_value <= bound")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SequenceSpec":
        return cls(**json.loads(text))


def gen_sequence(spec: SequenceSpec) -> np.ndarray:
    """i.i.d. draws: ``small_value`` with probability p, else ``big_value``."""
    spec.validate()
    rng = rng_for(spec.seed)
    u = rng.random(spec.length)
    return np.where(u < spec.small_fraction, spec.small_value, spec.big_value)


def sequence_csv(a) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "a"])
    for i, v in enumerate(np.asarray(a, dtype=float)):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


@dataclass
class CocycleSpec:
    dims: list
    processes: list
    coupling: float = 0.0
    n_forward: int = 1000
    n_backward: int = 0
    seed: int = 0

    def validate(self):
        if len(self.dims) not in (2, 3) or len(self.processes) != len(self.dims):
            raise ValueError("two or three blocks, one exponent process each")
        if any(int(k) > 3 or int(k) < 1 for k in self.dims):
            raise ValueError(f"block dimensions {self.dims} must lie in 1..3")
        for p in self.processes:
            if p.get("kind", "constant") not in PROFILE_KINDS:
                raise ValueError(f"unknown exponent process {p!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CocycleSpec":
        return cls(**json.loads(text))


def gen_cocycle(spec: CocycleSpec) -> SkewProduct:
    spec.validate()
    return SkewProduct(spec.dims, spec.processes, coupling=spec.coupling,
                       n_forward=spec.n_forward, n_backward=spec.n_backward, seed=spec.seed)


# ---------------------------------------------------------------------------
# oracles


def _window_ok(s: np.ndarray, sense: str) -> np.ndarray:
    if sense == "strict-below":
        return s < 0.0
    if sense == "nonstrict-below":
        return s <= 0.0
    if sense == "nonstrict-above":
        return s >= 0.0
    raise ValueError(f"sense must be one of {SENSES}")


def brute_force_times(a, threshold: float, sense: str) -> TimeSet:
    """Literal evaluation of the window condition over every (n, k).

    For each n the windows a[n-k:n] are summed from the right end outward,
    as sum(a_j - threshold) compared with 0 (the same tie convention as the
    fast path, but no shared partial sums).
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    N = a.size
    if N > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}")
    if sense not in SENSES:
        raise ValueError(f"sense must be one of {SENSES}")
    d = a - threshold
    out = [n for n in range(1, N + 1)
           if np.all(_window_ok(np.cumsum(d[n - 1::-1]), sense))]
    return TimeSet(np.array(out, dtype=np.int64), N, {"oracle": sense, "threshold": threshold})


def brute_force_prefix(a, threshold: float, sense: str) -> int:
    """Largest n with every prefix sum over k <= n passing, each summed directly."""
    d = np.asarray(a, dtype=float).reshape(-1) - threshold
    best = 0
    for n in range(1, d.size + 1):
        if not _window_ok(np.sum(d[:n]), sense):
            break
        best = n
    return best
