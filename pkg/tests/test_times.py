import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import LOG_LAMBDA_PLUS
from nuhyp.synthlab import SequenceSpec, brute_force_prefix, brute_force_times, gen_sequence
from nuhyp.times import (BlockVerdict, StepLogSequence, TimeSet, TimesError,
                         averaged_domination_prefix, batch_hd_lower_density, block_H,
                         block_Lambda, block_to_domination_check, calibrate_rho, density,
                         hd_times, high_density_block, hyperbolic_times, pliss_select,
                         step_logs, t_ell_times)

# multiples of 1/8 keep every partial sum exact, so boundary ties are real ties
dyadic = st.integers(-24, 24).map(lambda k: k / 8.0)
dyadic_seqs = st.lists(dyadic, min_size=1, max_size=64)


def full(N):
    return set(range(1, N + 1))


@pytest.fixture(scope="module")
def cat_traces(cat_setup):
    _, orbit, split = cat_setup
    kw = dict(n_blocks=200, start=0)
    return (step_logs(orbit, split, "log-mini-E", **kw), step_logs(orbit, split, "log-norm-F", **kw),
            step_logs(orbit, split, "log-ratio", **kw))


@pytest.fixture(scope="module")
def diag_traces(diag_setup):
    _, orbit, split = diag_setup
    kw = dict(n_blocks=100, start=0)
    E = step_logs(orbit, split, "log-mini-E", **kw)
    F = step_logs(orbit, split, "log-norm-F", expanding="E", contracting="F", **kw)
    G = step_logs(orbit, split, "log-norm-F", expanding="E", contracting="G", **kw)
    R = StepLogSequence(E.values - F.values, "log-ratio")
    return E, F, G, R


# ---------------------------------------------------------------------------
# traces


def test_cat_step_logs(cat_traces):
    E, F, R = cat_traces
    np.testing.assert_allclose(E.values, LOG_LAMBDA_PLUS, atol=1e-9)
    np.testing.assert_allclose(R.values, 2 * LOG_LAMBDA_PLUS, atol=1e-9)
    assert R.values[0] == pytest.approx(1.9248473, abs=1e-7)


def test_diag_step_logs(diag_traces):
    E, F, G, _ = diag_traces
    assert np.all(E.values == np.log(4))
    assert np.all(F.values == np.log(2))
    assert np.all(G.values == -np.log(8))


def test_step_logs_block_length(cat_setup):
    _, orbit, split = cat_setup
    s = step_logs(orbit, split, "log-mini-E", ell=4, n_blocks=10, start=0)
    assert s.ell == 4 and len(s) == 10
    np.testing.assert_allclose(s.values, LOG_LAMBDA_PLUS, atol=1e-9)
    with pytest.raises(TimesError):
        step_logs(orbit, split, "log-mini-E", ell=4, n_blocks=10_000)


def test_sequence_validation():
    with pytest.raises(TimesError):
        StepLogSequence([])
    with pytest.raises(TimesError):
        StepLogSequence([1.0, np.inf])
    with pytest.raises(TimesError):
        hyperbolic_times([], 0.0)


# ---------------------------------------------------------------------------
# time sets: examples


def test_hyperbolic_examples():
    assert hyperbolic_times(np.full(100, 0.9624), 0.9).as_set() == full(100)
    assert hyperbolic_times([1, -1, 1, 1], 0.0).as_set() == {1, 3, 4}
    assert brute_force_times(np.array([1.0, -1, 1, 1]), 0.0, "nonstrict-above").as_set() == {1, 3, 4}
    assert hyperbolic_times(np.full(50, 0.7), 0.7).as_set() == full(50)


def test_domination_prefix_examples(cat_traces):
    _, _, R = cat_traces
    assert averaged_domination_prefix(R, 1.9) == len(R)
    assert averaged_domination_prefix(R, 2.0) == 0
    a = np.log([2, 0.5, 2, 2])
    assert averaged_domination_prefix(a, 0.0) == 4
    assert brute_force_prefix(a, 0.0, "nonstrict-above") == 4


def test_hd_examples(cat_traces, diag_traces):
    E, _, R = cat_traces
    assert hd_times(E, R, 0.9, 1.9).as_set() == full(len(E))
    assert len(hd_times(E, R, 0.9, 2.0)) == 0
    dE, _, _, dR = diag_traces
    assert hd_times(dE, dR, 1.0, 0.5).as_set() == full(len(dE))
    with pytest.raises(TimesError):
        hd_times(E.values, R.values[:-1], 0.9, 1.9)


def test_pliss_examples():
    assert pliss_select([0, 2, 0, 0], 2.0, -0.5, 1.0).as_set() == {1, 4}
    assert pliss_select(np.full(30, 0.1), 2.0, 0.1, 0.5).as_set() == full(30)
    assert len(pliss_select(np.full(30, 1.0), 2.0, 0.0, 1.0 - 1e-9)) == 0
    assert len(pliss_select(np.full(30, 1.5), 2.0, 0.0, 1.0)) == 0


def test_pliss_preconditions():
    with pytest.raises(TimesError, match=r"a\[2\]"):
        pliss_select([0, 1, 3, 0], 2.0, 0.0, 1.0)
    with pytest.raises(TimesError):
        pliss_select([0, 1], 2.0, 1.0, 0.5)


def test_t_ell_examples(cat_traces):
    E, _, _ = cat_traces
    assert t_ell_times(-E, -0.9).as_set() == full(len(E))
    assert t_ell_times(np.full(40, -0.3), -0.3).as_set() == full(40)
    assert t_ell_times([0, 2, 0, 0], 1.0).as_set() == {1, 3, 4}


# ---------------------------------------------------------------------------
# oracle equivalence and properties


def test_oracle_equivalence_on_random_sequences():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        N = int(rng.integers(1, 513))
        a = rng.normal(0.3, 1.0, N)
        c = float(rng.normal(0.3, 0.5))
        assert np.array_equal(hyperbolic_times(a, c).times,
                              brute_force_times(a, c, "nonstrict-above").times)
        assert np.array_equal(t_ell_times(a, c).times,
                              brute_force_times(a, c, "nonstrict-below").times)
        L = max(float(a.max()), c) + 1.0
        assert np.array_equal(pliss_select(a, L, c - 1.0, c).times,
                              brute_force_times(a, c, "strict-below").times)
        assert averaged_domination_prefix(a, c) == brute_force_prefix(a, c, "nonstrict-above")


@given(dyadic_seqs, st.integers(-24, 23).map(lambda k: k / 8.0))
def test_oracle_equivalence_with_exact_ties(a, c):
    a = np.array(a)
    assert np.array_equal(hyperbolic_times(a, c).times,
                          brute_force_times(a, c, "nonstrict-above").times)
    assert np.array_equal(t_ell_times(a, c).times, brute_force_times(a, c, "nonstrict-below").times)
    assert np.array_equal(pliss_select(a, 4.0, c - 1.0, c).times,
                          brute_force_times(a, c, "strict-below").times)
    assert averaged_domination_prefix(a, c) == brute_force_prefix(a, c, "nonstrict-above")


@given(dyadic_seqs, dyadic, dyadic)
def test_monotonicity(a, c1, c2):
    lo, hi = min(c1, c2), max(c1, c2)
    assert hyperbolic_times(a, hi).as_set() <= hyperbolic_times(a, lo).as_set()
    assert t_ell_times(a, lo).as_set() <= t_ell_times(a, hi).as_set()


@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=64),
       st.floats(-5, 5, allow_nan=False))
def test_mirror_identity(a, g):
    seq = StepLogSequence(a)
    assert np.array_equal(t_ell_times(seq, g).times, hyperbolic_times(-seq, -g).times)


# ---------------------------------------------------------------------------
# density


def test_density_examples():
    N = 10_000
    even = TimeSet(np.arange(2, N + 1, 2), N)
    st_ = density(even)
    assert abs(st_.d_lower_est - 0.5) <= 1 / st_.n_min
    assert abs(st_.d_upper_est - 0.5) <= 1 / st_.n_min
    st_ = density(TimeSet(np.arange(1, N + 1), N))
    assert st_.d_lower_est == st_.d_upper_est == 1.0
    sq = TimeSet(np.arange(1, 101) ** 2, N)
    st_ = density(sq)
    assert st_.d_lower_est <= 0.02 and st_.d_upper_est <= 0.02


@given(st.sets(st.integers(1, 300)), st.integers(1, 300))
def test_density_bounds(times, N):
    ts = TimeSet(np.array(sorted(t for t in times if t <= N), dtype=np.int64), N)
    d = density(ts)
    assert 0.0 <= d.d_lower_est <= d.d_upper_est <= 1.0
    # oracle: direct counting for the last prefix
    assert d.prefix_profile[-1] == pytest.approx(len(ts) / N)


def test_timeset_serialization_roundtrip():
    ts = TimeSet(np.array([1, 3, 4]), 5, {"op": "x"})
    back = TimeSet.from_json(ts.to_json())
    assert back.as_set() == {1, 3, 4} and back.horizon == 5 and back.params == {"op": "x"}
    assert json.loads(ts.to_json())["profile"] == pytest.approx([1, 0.5, 2 / 3, 0.75, 0.6])
    lines = ts.to_csv().splitlines()
    assert lines[0] == "n,prefix_frequency" and len(lines) == 6
    with pytest.raises(TimesError):
        TimeSet(np.array([3, 2]), 5)
    with pytest.raises(TimesError):
        TimeSet(np.array([0, 2]), 5)


# ---------------------------------------------------------------------------
# blocks


def test_block_H_examples():
    assert block_H(np.full(50, -1.0), -0.5) == BlockVerdict(50, 50)
    assert block_H(np.r_[1.0, np.full(20, -5.0)], 0.0).member_up_to == 0
    alt = np.tile([-1.0, 1.0], 25)
    v = block_H(alt, 0.0)
    assert v.member_up_to == 50 and v.is_member_truncated


def test_block_Lambda_examples(cat_traces, diag_traces):
    E, F, _ = cat_traces
    assert block_Lambda(E, F, 0.9, -0.9).is_member_truncated
    assert block_Lambda(E, F, 1.0, -0.9).member_up_to == 0
    dE, _, dG, _ = diag_traces
    assert block_Lambda(dE, dG, 1.0, -2.0).member_up_to == len(dE)
    with pytest.raises(TimesError):
        block_Lambda(StepLogSequence([1.0], ell=2), StepLogSequence([1.0], ell=1), 0.5, 0.0)


def test_block_to_domination_examples(cat_traces):
    E, F, _ = cat_traces
    assert block_to_domination_check(E, F, 0.9, -0.9)
    assert block_to_domination_check([-1.0, 5.0], [0.0, 0.0], 0.5, -0.5)
    with pytest.raises(TimesError):
        block_to_domination_check(E, F, 0.0, 0.5)


def test_block_to_domination_on_random_traces():
    rng = np.random.default_rng(7)
    hits = 0
    while hits < 1000:
        N = int(rng.integers(1, 200))
        g1 = float(rng.uniform(0.1, 1.0))
        g2 = float(rng.uniform(-1.0, g1))
        a = g1 + np.abs(rng.normal(0, 0.5, N)) - 0.05 * rng.random(N)
        b = g2 - np.abs(rng.normal(0, 0.5, N)) + 0.05 * rng.random(N)
        if block_Lambda(a, b, g1, g2).member_up_to == 0:
            continue
        hits += 1
        assert block_to_domination_check(a, b, g1, g2)


@given(st.lists(st.tuples(dyadic, dyadic), min_size=1, max_size=64), dyadic, dyadic)
def test_block_to_domination_theorem_instance(pairs, g1, g2):
    if not g1 > g2:
        return
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    assert block_to_domination_check(a, b, g1, g2)


def test_high_density_block_examples(cat_traces, diag_traces):
    E, _, R = cat_traces
    ok, stats = high_density_block(E, R, 0.9, -0.9, 0.99, ell=1)
    assert ok and stats.d_lower_est == 1.0
    # sparse profile: expansion only every fourth step
    sparse = np.tile([3.0, -1.0, -1.0, -1.0], 100)
    ok, stats = high_density_block(sparse, np.full(400, 5.0), 0.5, -0.5, 0.5)
    assert not ok and stats.d_lower_est < 0.5
    dE, _, _, dR = diag_traces
    for theta in (0.1, 0.5, 1.0):
        assert high_density_block(dE, dR, 1.0, 0.5, theta, ell=1)[0]
    with pytest.raises(TimesError):
        high_density_block(E, R, 0.5, 0.6, 0.5)
    with pytest.raises(TimesError):
        high_density_block(E, R, 0.9, -0.9, 0.5, ell=2)


def test_batch_density_matches_single():
    rng = np.random.default_rng(3)
    aE = rng.normal(1.0, 1.0, (20, 300))
    aR = rng.normal(2.0, 1.0, (20, 300))
    batch = batch_hd_lower_density(aE, aR, 0.5, 1.0)
    for i in range(20):
        assert batch[i] == density(hd_times(aE[i], aR[i], 0.5, 1.0)).d_lower_est


# ---------------------------------------------------------------------------
# Pliss-like constant


def test_calibrate_rho_and_selection_count():
    L, eta, zeta, theta, N = 2.0, 0.0, 0.5, 0.5, 1000
    cal = calibrate_rho(L, eta, zeta, theta, N=N, samples=200, seed=1)
    rho = cal["rho"]
    assert 0.0 < rho < 1.0
    # analytic sanity: with fraction p of zeros and L otherwise, the long-run
    # average p*0 + (1-p)*L drops below zeta only once p > 1 - zeta/L
    assert rho >= 1 - zeta / L - 0.05
    for seed in range(20):
        a = gen_sequence(SequenceSpec(N, L, np.nextafter(eta, -1), min(1.0, rho + 0.02), L, seed))
        if (a < eta).mean() > rho:
            assert len(pliss_select(a, L, eta, zeta)) >= theta * N
    with pytest.raises(TimesError):
        calibrate_rho(L, 0.6, zeta, theta)
