"""Experiment runner: analyses, Monte Carlo block measures and report bundles.

A run produces an in-memory bundle (file name -> text) that is then written
to disk by a single writer; nothing in it depends on wall-clock time, so an
identical config and seed give a byte-identical bundle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy
from scipy.stats import binomtest

from . import __version__
from .bundle import SplittingError, estimate_splitting
from .config import ConfigError, ExperimentConfig
from .grower import (GrowerError, GrowerParams, LocalManifold, calibrate_a_r, grow_nested,
                     grow_unstable, tangent_alignment, verify_local_manifold)
from .phase import (Point, PhaseError, SkewProduct, cat2, diag3, doubling_orbit,
                    make_orbit, skew_nonuniform, zero_point)
from .synthlab import CocycleSpec, SequenceSpec, gen_cocycle, gen_sequence, rng_for, sequence_csv
from .times import (TimesError, averaged_domination_prefix, batch_hd_lower_density,
                    batch_prefix_lengths, block_H, block_Lambda, block_to_domination_check,
                    density, hd_times, high_density_block, hyperbolic_times, pliss_select,
                    step_logs)

ANALYSIS_ERRORS = (GrowerError, TimesError, SplittingError, PhaseError, ArithmeticError,
                   ValueError, IndexError)
DEFAULT_DIMS = {"cat2": [1, 1], "diag3": [1, 1, 1]}


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrequencyEstimate:
    label: str
    ell: int
    estimate: float
    lo: float
    hi: float
    samples: int
    horizon: int

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.estimate <= self.hi <= 1.0):
            raise ValueError(f"inconsistent frequency estimate {self}")


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def frequency(label: str, ell: int, passed: np.ndarray, horizon: int) -> FrequencyEstimate:
    k, n = int(np.count_nonzero(passed)), int(np.size(passed))
    lo, hi = wilson_interval(k, n)
    p = k / n
    return FrequencyEstimate(label, int(ell), p, min(lo, p), max(hi, p), n, int(horizon))


# ---------------------------------------------------------------------------
# systems and orbits from a config


def build_system(cfg: ExperimentConfig, steps: int):
    """System and start point; skew products get a base window covering ``steps``."""
    s = cfg.system
    B = cfg.orbit.B
    if s.name == "cat2":
        system = cat2()
        x0 = Point(np.array(s.x0 or [0.1, 0.2]), system.space)
    elif s.name == "diag3":
        system = diag3()
        x0 = Point(np.array(s.x0 or [0.0, 0.0, 0.0]), system.space)
    else:
        dims = s.block_dims or [1, 1]
        profiles = s.profiles
        if s.name == "skew-nonuniform":
            kw = {}
            if profiles:
                kw["profile_E"] = profiles[0]
                if len(profiles) > 1:
                    kw["profile_F"] = profiles[1]
            system = skew_nonuniform(dims=tuple(dims), coupling=s.coupling, n_forward=steps,
                                     n_backward=B, seed=cfg.seed, **kw)
        else:
            if not profiles:
                raise ConfigError("cocycle systems need one profile per block", "system.profiles")
            system = gen_cocycle(CocycleSpec(dims, profiles, s.coupling, steps, B, cfg.seed))
        x0 = zero_point(system) if s.x0 is None else Point(np.array(s.x0), system.space)
    return system, x0


def split_dims(cfg: ExperimentConfig) -> list[int]:
    if cfg.splitting.dims:
        return cfg.splitting.dims
    if cfg.system.name in DEFAULT_DIMS:
        return DEFAULT_DIMS[cfg.system.name]
    return cfg.system.block_dims or [1, 1]


def orbit_and_splitting(cfg: ExperimentConfig, steps: int):
    """Orbit long enough for ``steps`` forward steps from the start index, with its splitting."""
    settle, B = cfg.splitting.settle, cfg.orbit.B
    lo = -B + settle
    start = lo if cfg.orbit.start is None else cfg.orbit.start
    if start < lo:
        raise ConfigError(f"start {start} precedes the settled window beginning at {lo}",
                          "orbit.start")
    n_fwd = start + steps + settle
    system, x0 = build_system(cfg, n_fwd)
    orbit = make_orbit(system, x0, n_fwd, B)
    split = estimate_splitting(system, orbit, split_dims(cfg), settle=settle)
    return system, orbit, split, start


def _traces(orbit, split, n, start, ell=1, expanding="E", contracting=None):
    aE = step_logs(orbit, split, "log-mini-E", ell, n, start, expanding, contracting)
    aF = step_logs(orbit, split, "log-norm-F", ell, n, start, expanding, contracting)
    aR = step_logs(orbit, split, "log-ratio", ell, n, start, expanding, contracting)
    return aE, aF, aR


# ---------------------------------------------------------------------------
# Monte Carlo


def _skew_block_traces(system: SkewProduct, bits_rng, n_steps: int, ells, N: int):
    """Per-step E/F block traces for one sampled base point, for each ell."""
    bits = bits_rng.integers(0, 2, size=n_steps + 53, dtype=np.uint8)
    theta = doubling_orbit(bits)
    logs = np.stack([r(theta) for r in system.rates], axis=1)
    out = {}
    for ell in ells:
        sums = logs[: N * ell].reshape(N, ell, -1).sum(axis=1) / ell
        out[ell] = (sums[:, 0], sums[:, 1:].max(axis=1))
    return out


def estimate_block_measure(cfg: ExperimentConfig) -> list[FrequencyEstimate]:
    """Fractions of sampled orbits passing the truncated Lambda, H and
    high-density block verdicts at horizon N (counted in ell-blocks)."""
    t = cfg.thresholds
    if not t.gamma1 > t.gamma2:
        raise ConfigError("need gamma1 > gamma2", "thresholds.gamma1")
    g1, g2, theta = t.gamma1, t.gamma2, t.theta
    N, S = cfg.orbit.N, cfg.samples
    ells = sorted(set(t.ells))
    rows = {ell: {"E": [], "F": []} for ell in ells}
    name = cfg.system.name
    if name in ("skew-nonuniform", "cocycle"):
        system, _ = build_system(cfg, 1)
        n_steps = N * ells[-1]
        for ss in np.random.SeedSequence(cfg.seed).spawn(S):
            tr = _skew_block_traces(system, np.random.Generator(np.random.Philox(ss)), n_steps, ells, N)
            for ell in ells:
                rows[ell]["E"].append(tr[ell][0])
                rows[ell]["F"].append(tr[ell][1])
    else:
        # constant cocycles (cat2, diag3): every sampled point carries the same traces
        starts = _sample_points(cfg, S)
        for ell in ells:
            sub = cfg.model_copy(deep=True)
            sub.orbit.start = None
            system, orbit, split, j0 = orbit_and_splitting(sub, N * ell)
            aE, aF, _ = _traces(orbit, split, N, j0, ell)
            rows[ell]["E"] = [aE.values] * len(starts)
            rows[ell]["F"] = [aF.values] * len(starts)
    out = []
    for ell in ells:
        E = np.array(rows[ell]["E"])
        F = np.array(rows[ell]["F"])
        lam = (batch_prefix_lengths(E, g1, "ge") >= N) & (batch_prefix_lengths(F, g2, "le") >= N)
        h = batch_prefix_lengths(F, g2, "le") >= N
        hd = batch_hd_lower_density(E, E - F, g1, g1 - g2) >= theta
        out.append(frequency("Lambda", ell, lam, N))
        out.append(frequency("H", ell, h, N))
        out.append(frequency("HD_theta", ell, hd, N))
    return out


def _sample_points(cfg: ExperimentConfig, S: int) -> np.ndarray:
    """Start points from the base invariant measure: uniform on the torus, the fixed point otherwise."""
    rng = rng_for(cfg.seed)
    if cfg.system.name == "cat2":
        return rng.random((S, 2))
    return np.zeros((S, 3))


def nondecreasing_within_ci(ests: list[FrequencyEstimate]) -> bool:
    return all(b.hi >= a.lo for a, b in zip(ests, ests[1:]))


def measure_csv(ests: list[FrequencyEstimate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "ell", "estimate", "lo", "hi", "samples", "horizon"])
    for e in ests:
        w.writerow([e.label, e.ell, repr(e.estimate), repr(e.lo), repr(e.hi), e.samples, e.horizon])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# manifold output


def emit_manifold(m: LocalManifold, format: str = "csv", path=None) -> str:
    """CSV of nodes (grid index, position, tangent frame) or the JSON certificate."""
    if format == "csv":
        mesh = m.mesh
        d, k = mesh.frame.shape
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"grid_index_{i}" for i in range(k)] + [f"position_{i}" for i in range(d)]
                   + [f"tangent_frame_{i}_{j}" for i in range(d) for j in range(k)])
        for gi, pos, T in zip(mesh.grid_index, mesh.positions, mesh.tangents):
            w.writerow([int(v) for v in gi] + [repr(float(v)) for v in pos]
                       + [repr(float(v)) for v in T.ravel()])
        text = buf.getvalue()
    elif format == "json":
        text = json.dumps(_jsonable(m.certificate()), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    return x


# ---------------------------------------------------------------------------
# analyses: each returns (metrics, artifacts)


def _times(cfg):
    N = cfg.orbit.N
    t = cfg.thresholds
    system, orbit, split, j0 = orbit_and_splitting(cfg, N)
    aE, aF, aR = _traces(orbit, split, N, j0)
    hyp = hyperbolic_times(aE, t.log_lambda1)
    pre = averaged_domination_prefix(aR, t.log_lambda2)
    hd = hd_times(aE, aR, t.log_lambda1, t.log_lambda2)
    ds = density(hd)
    metrics = {"times.horizon": N, "times.hyperbolic_count": len(hyp), "times.delta_prefix": pre,
               "times.hd_count": len(hd), "times.hd_density_lower": ds.d_lower_est,
               "times.hd_density_upper": ds.d_upper_est}
    arts = {"times_hyperbolic.csv": hyp.to_csv(), "times_hyperbolic.json": hyp.to_json(),
            "times_hd.csv": hd.to_csv(), "times_hd.json": hd.to_json(ds.prefix_profile)}
    return metrics, arts


def _blocks(cfg):
    N = cfg.orbit.N
    t = cfg.thresholds
    ells = sorted(set(t.ells))
    system, orbit, split, j0 = orbit_and_splitting(cfg, N * ells[-1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ell", "lambda_member_up_to", "h_member_up_to", "required", "hd_block",
                "hd_lower_density", "domination_ok"])
    metrics = {"blocks.horizon": N}
    all_ok = True
    for ell in ells:
        aE, aF, aR = _traces(orbit, split, N, j0, ell)
        lam = block_Lambda(aE, aF, t.gamma1, t.gamma2)
        hv = block_H(aF, t.gamma2)
        ok_hd, ds = high_density_block(aE, aR, t.gamma1, t.gamma2, t.theta, ell)
        dom = block_to_domination_check(aE, aF, t.gamma1, t.gamma2)
        all_ok &= dom
        w.writerow([ell, lam.member_up_to, hv.member_up_to, lam.required, int(ok_hd),
                    repr(ds.d_lower_est), int(dom)])
        metrics[f"blocks.ell={ell}.lambda_member_up_to"] = lam.member_up_to
        metrics[f"blocks.ell={ell}.hd_block"] = int(ok_hd)
    metrics["blocks.domination_all"] = int(all_ok)
    return metrics, {"blocks.csv": buf.getvalue()}


def _grower_params(cfg, a=None, r=None):
    g = cfg.grower
    a = g.a if a is None else a
    r = g.r if r is None else r
    h = r / round(g.r / g.h)
    return GrowerParams(g.sigma1, g.sigma2, a, r, h, g.chi, g.T_cap, g.N_max, g.tol_c1, g.cert_depth)


def _grow(cfg):
    N = cfg.orbit.N
    t, g = cfg.thresholds, cfg.grower
    system, orbit, split, j0 = orbit_and_splitting(cfg, N)
    aE, _, aR = _traces(orbit, split, N, j0)
    hd = hd_times(aE, aR, t.log_lambda1, t.log_lambda2)
    a, r, trace = g.a, g.r, []
    if g.calibrate:
        a, r, trace = calibrate_a_r(system, split, g.sigma1, g.sigma2, t.log_lambda1,
                                    t.log_lambda2, hd, j0=j0, n_half=int(round(g.r / g.h)))
    params = _grower_params(cfg, a, r)
    m = grow_unstable(system, split, params, hd, j0=j0, full_run=g.full_run)
    ver = verify_local_manifold(system, m, min(g.verify_depth, m.depth))
    violations = sum(not (c.get("F1") and c.get("F2") and c.get("F3")) for c in m.checks)
    metrics = {
        "grow.horizon": N, "grow.T": m.T, "grow.a": a, "grow.r": r, "grow.depth": m.depth,
        "grow.verify_max_ratio": ver["max_ratio"], "grow.verify_passed": int(ver["passed"]),
        "grow.c0_gap_last": m.convergence_log[-1]["c0"] if m.convergence_log else 0.0,
        "grow.c1_gap_last": m.convergence_log[-1]["c1"] if m.convergence_log else 0.0,
        "grow.violations": violations, "grow.times_used": len(m.hyperbolic_times_used),
        "grow.tangency": tangent_alignment(m.mesh, split, system=system, history=m.history),
        "grow.stop_index": m.mesh.j - j0,
    }
    cert = m.certificate()
    cert["verify"] = ver
    cert["calibration"] = trace
    cert["checks"] = m.checks
    arts = {"manifold.csv": emit_manifold(m, "csv"),
            "certificate.json": json.dumps(_jsonable(cert), indent=2, sort_keys=True) + "\n"}
    return metrics, arts


def _nested(cfg):
    N = cfg.orbit.N
    t = cfg.thresholds
    system, orbit, split, j0 = orbit_and_splitting(cfg, N)
    outer, inner, rep = grow_nested(system, split, _grower_params(cfg), t.log_lambda1,
                                    t.log_lambda2, j0=j0, n_window=N)
    metrics = {"nested.horizon": N, "nested.inclusion_deviation": rep["inclusion_deviation"],
               "nested.tangency_E": rep["tangency_E"], "nested.tangency_EF": rep["tangency_EF"],
               "nested.T_E": inner.T, "nested.T_EF": outer.T}
    arts = {"manifold_EF.csv": emit_manifold(outer, "csv"), "manifold_E.csv": emit_manifold(inner, "csv"),
            "nested.json": json.dumps(_jsonable(rep), indent=2, sort_keys=True) + "\n"}
    return metrics, arts


def _measure(cfg):
    ests = estimate_block_measure(cfg)
    metrics = {"measure.horizon": cfg.orbit.N, "measure.samples": cfg.samples}
    for e in ests:
        metrics[f"measure.{e.label}.ell={e.ell}"] = e.estimate
    for label in ("Lambda", "H", "HD_theta"):
        metrics[f"measure.{label}.nondecreasing"] = int(
            nondecreasing_within_ci([e for e in ests if e.label == label]))
    arts = {"measure.csv": measure_csv(ests),
            "measure.json": json.dumps([asdict(e) for e in ests], indent=2, sort_keys=True) + "\n"}
    return metrics, arts


def _synth(cfg):
    s = cfg.synth
    spec = SequenceSpec(s.length, s.bound, s.small_value, s.small_fraction, s.big_value, cfg.seed)
    a = gen_sequence(spec)
    metrics = {"synth.length": s.length,
               "synth.small_fraction": float(np.mean(a == s.small_value))}
    arts = {"sequence.csv": sequence_csv(a), "sequence_spec.json": spec.to_json() + "\n"}
    if s.zeta is not None:
        ts = pliss_select(a, s.bound, np.nextafter(s.small_value, np.inf), s.zeta)
        metrics["synth.pliss_count"] = len(ts)
        arts["sequence_pliss.csv"] = ts.to_csv()
    return metrics, arts


ANALYSIS_FUNCS = {"times": _times, "blocks": _blocks, "grow": _grow, "nested": _nested,
                  "measure-sweep": _measure, "synth": _synth}


# ---------------------------------------------------------------------------
# runner


@dataclass
class RunResult:
    exit_code: int
    metrics: dict
    expectations: list
    artifacts: dict = field(default_factory=dict)
    error: Optional[str] = None


_OPS = {"<=": np.less_equal, ">=": np.greater_equal, "==": np.equal, "<": np.less,
        ">": np.greater}


def evaluate_expectations(cfg: ExperimentConfig, metrics: dict) -> list[dict]:
    out = []
    for e in cfg.expectations:
        got = metrics.get(e.metric)
        ok = got is not None and bool(_OPS[e.op](got, e.value))
        out.append({"metric": e.metric, "op": e.op, "value": e.value, "observed": got, "passed": ok})
    return out


def versions() -> dict:
    return {"nuhyp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run every selected analysis and assemble the report bundle in memory.

    Exit codes: 0 all expectations pass, 1 an expectation failed,
    3 an analysis raised.
    """
    metrics, arts, error = {}, {}, None
    for name in cfg.analysis:
        try:
            m, a = ANALYSIS_FUNCS[name](cfg)
        except ConfigError:
            raise
        except ANALYSIS_ERRORS as exc:
            error = f"{name}: {type(exc).__name__}: {exc}"
            break
        metrics.update(m)
        arts.update(a)
    metrics = _jsonable(metrics)
    exps = evaluate_expectations(cfg, metrics) if error is None else []
    code = 3 if error else (0 if all(e["passed"] for e in exps) else 1)
    arts["summary.txt"] = _summary(cfg, metrics, exps, code, error)
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "versions": versions(),
        "exit_code": code,
        "error": error,
        "metrics": metrics,
        "artifacts": {k: hashlib.sha256(v.encode()).hexdigest() for k, v in sorted(arts.items())},
    }
    arts["manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    return RunResult(code, metrics, exps, dict(sorted(arts.items())), error)


def _horizon_line(cfg) -> str:
    N = cfg.orbit.N
    unit = "ell-blocks" if "measure-sweep" in cfg.analysis or "blocks" in cfg.analysis else "steps"
    return f"HORIZON N = {N} {unit}: every 'for all n' verdict below is truncated at N"


def _summary(cfg, metrics, exps, code, error) -> str:
    lines = [_horizon_line(cfg), f"analyses: {', '.join(cfg.analysis) or '(none)'}",
             f"seed: {cfg.seed}", ""]
    if error:
        lines += [f"ERROR {error}", ""]
    if metrics:
        lines.append("metrics:")
        lines += [f"  {k} = {v!r}" for k, v in sorted(metrics.items())]
        lines.append("")
    if exps:
        lines.append("expectations:")
        for e in exps:
            tag = "PASS" if e["passed"] else "FAIL"
            lines.append(f"  {tag} {e['metric']} {e['op']} {e['value']!r} (observed {e['observed']!r})")
        lines.append("")
    lines.append(f"result: {'PASS' if code == 0 else 'FAIL'} (exit {code})")
    return "\n".join(lines) + "\n"


def write_bundle(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in result.artifacts.items():
        (out / name).write_text(text)
    return out
