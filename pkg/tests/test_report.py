import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from nuhyp import cli
from nuhyp.config import SCHEMA_PATH, ConfigError, json_schema, load_config
from nuhyp.grower import GrowerParams, grow_unstable
from nuhyp.report import (FrequencyEstimate, emit_manifold, estimate_block_measure,
                          nondecreasing_within_ci, run_experiment, wilson_interval, write_bundle)
from nuhyp.service import app
from nuhyp.times import hd_times, step_logs

FIX = Path(__file__).parent / "fixtures"
LAMBDA_PLUS = (3 + np.sqrt(5)) / 2


def run_cli(*args):
    return cli.main([str(a) for a in args])


# ---------------------------------------------------------------------------
# config


def test_schema_file_is_current():
    assert json.loads(SCHEMA_PATH.read_text()) == json_schema()


def test_config_defaults_and_overrides():
    cfg = load_config(None, {"orbit.N": 77, "analysis": ["times"]})
    assert cfg.orbit.N == 77 and cfg.system.name == "cat2" and cfg.analysis == ["times"]
    raw = {"orbit": {"N": 5}}
    load_config(raw, {"orbit.N": 9})
    assert raw == {"orbit": {"N": 5}}


@pytest.mark.parametrize("data, pointer", [
    ({"analysis": ["blocks"], "thresholds": {"gamma1": 0.1, "gamma2": 0.2}}, "thresholds.gamma1"),
    ({"analysis": ["grow"], "grower": {"sigma1": 5.0}}, "grower.sigma1"),
    ({"analysis": ["grow"], "grower": {"h": 0.1, "r": 0.05}}, "grower.h"),
    ({"analysis": ["synth"], "synth": {"small_value": 3.0}}, "synth.big_value"),
    ({"analysis": ["times"], "expectations": [{"metric": "grow.T", "op": "<=", "value": 1}]},
     "expectations[0].metric"),
    ({"orbit": {"N": 0}}, "orbit.N"),
    ({"bogus": 1}, "bogus"),
])
def test_config_errors_carry_pointers(data, pointer):
    with pytest.raises(ConfigError) as exc:
        load_config(data)
    assert exc.value.pointer == pointer


def test_config_file_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# ---------------------------------------------------------------------------
# exit-code contract


def test_exit_0_grow_fixture(tmp_path, capsys):
    assert run_cli("grow", "--config", FIX / "grow_cat2.json", "--out", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"manifest.json", "summary.txt", "manifold.csv", "certificate.json"} <= names
    summary = (tmp_path / "summary.txt").read_text()
    assert summary.startswith("HORIZON N = 200")
    assert "result: PASS (exit 0)" in summary
    assert summary == capsys.readouterr().out
    rows = (tmp_path / "manifold.csv").read_text().splitlines()
    assert len(rows) == 22


def test_exit_1_expectation_failure(tmp_path):
    assert run_cli("analyze-times", "--config", FIX / "expectation_fails.json", "--out", tmp_path) == 1
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_code"] == 1 and man["metrics"]["times.hd_density_lower"] == 1.0


def test_exit_2_schema_error(tmp_path, capsys):
    assert run_cli("blocks", "--config", FIX / "bad_gamma.json", "--out", tmp_path) == 2
    assert "thresholds.gamma1" in capsys.readouterr().err
    assert not (tmp_path / "manifest.json").exists()


def test_exit_3_runtime_error(tmp_path, capsys):
    assert run_cli("grow", "--config", FIX / "runtime_error.json", "--out", tmp_path) == 3
    assert "no hyperbolic times at this rate" in capsys.readouterr().err
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_code"] == 3 and "NoHyperbolicTimes" in man["error"]


def test_empty_analysis_gives_manifest_only():
    res = run_experiment(load_config({}))
    assert res.exit_code == 0
    assert set(res.artifacts) == {"manifest.json", "summary.txt"}
    man = json.loads(res.artifacts["manifest.json"])
    assert man["metrics"] == {} and man["seed"] == 0 and "numpy" in man["versions"]


def test_flags_override_config(tmp_path):
    assert run_cli("synth", "--seed", 4, "--horizon", 300, "--out", tmp_path) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"]["seed"] == 4 and man["config"]["synth"]["length"] == 300
    assert len((tmp_path / "sequence.csv").read_text().splitlines()) == 301


def test_unwritable_output_is_a_runtime_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run_cli("synth", "--out", blocker / "sub") == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nuhyp", "synth", "--out", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0 and "HORIZON N" in proc.stdout


# ---------------------------------------------------------------------------
# determinism and artifacts


def test_bundle_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run_cli("grow", "--config", FIX / "grow_cat2.json", "--out", tmp_path / d) == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


@pytest.fixture(scope="module")
def cat_manifold(cat_setup):
    system, orbit, split = cat_setup
    E = step_logs(orbit, split, "log-mini-E", n_blocks=200)
    R = step_logs(orbit, split, "log-ratio", n_blocks=200)
    p = GrowerParams(np.exp(0.5), np.exp(1.5), 0.5, 0.05, 0.005, LAMBDA_PLUS)
    return grow_unstable(system, split, p, hd_times(E, R, 0.9, 1.9))


def test_emit_manifold_csv(cat_manifold, tmp_path):
    text = emit_manifold(cat_manifold, "csv", tmp_path / "m.csv")
    rows = text.splitlines()
    assert rows[0] == ("grid_index_0,position_0,position_1,"
                       "tangent_frame_0_0,tangent_frame_1_0")
    assert len(rows) == 22
    assert (tmp_path / "m.csv").read_text() == text == emit_manifold(cat_manifold, "csv")
    with pytest.raises(ValueError):
        emit_manifold(cat_manifold, "xml")
    with pytest.raises(OSError):
        emit_manifold(cat_manifold, "csv", tmp_path / "no" / "such" / "dir.csv")


def test_emit_manifold_json_roundtrip(cat_manifold):
    cert = json.loads(emit_manifold(cat_manifold, "json"))
    ref = cat_manifold.certificate()
    for key in ("chi", "T", "r", "depth", "bundle", "center_index", "times_used", "horizon"):
        assert cert[key] == ref[key]


# ---------------------------------------------------------------------------
# Monte Carlo estimates


def test_frequency_estimate_validation():
    with pytest.raises(ValueError):
        FrequencyEstimate("x", 1, 0.5, 0.6, 0.9, 10, 10)
    lo, hi = wilson_interval(0, 50)
    assert lo == 0.0 and 0 < hi < 0.1


def test_wilson_width_scales_as_inverse_root_s():
    widths = []
    for S in (100, 1000, 10_000):
        lo, hi = wilson_interval(int(0.3 * S), S)
        widths.append((hi - lo) * np.sqrt(S))
    assert max(widths) / min(widths) <= 1.05


def test_estimate_ci_widths_shrink_on_fixed_scenario():
    base = {"system": {"name": "skew-nonuniform"}, "orbit": {"N": 100},
            "analysis": ["measure-sweep"], "thresholds": {"ells": [4]}}
    widths = {}
    for S in (100, 1000, 10_000):
        ests = estimate_block_measure(load_config(base, {"samples": S}))
        lam = [e for e in ests if e.label == "Lambda"][0]
        assert 0.0 <= lam.lo <= lam.estimate <= lam.hi <= 1.0
        widths[S] = lam.hi - lam.lo
    assert widths[1000] / widths[100] == pytest.approx(10**-0.5, rel=0.35)
    assert widths[10_000] / widths[1000] == pytest.approx(10**-0.5, rel=0.35)


def test_cat_lambda_sweep_is_one():
    cfg = load_config({"system": {"name": "cat2"}, "orbit": {"N": 100},
                       "analysis": ["measure-sweep"], "samples": 50,
                       "thresholds": {"gamma1": 0.9, "gamma2": -0.9,
                                      "ells": [1, 2, 3, 4, 5, 6, 7, 8]}})
    ests = [e for e in estimate_block_measure(cfg) if e.label == "Lambda"]
    assert [e.ell for e in ests] == list(range(1, 9))
    assert all(e.estimate == 1.0 for e in ests)


def test_nondecreasing_within_ci():
    mk = lambda p, lo, hi: FrequencyEstimate("L", 1, p, lo, hi, 100, 10)
    assert nondecreasing_within_ci([mk(0.5, 0.4, 0.6), mk(0.45, 0.35, 0.55), mk(0.9, 0.8, 0.95)])
    assert not nondecreasing_within_ci([mk(0.9, 0.85, 0.95), mk(0.5, 0.4, 0.6)])


def test_write_bundle_creates_directory(tmp_path):
    res = run_experiment(load_config({"analysis": ["synth"]}))
    out = write_bundle(res, tmp_path / "x" / "y")
    assert (out / "manifest.json").exists()
    man = json.loads((out / "manifest.json").read_text())
    import hashlib

    for name, digest in man["artifacts"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


# ---------------------------------------------------------------------------
# service


@pytest.fixture(scope="module")
def client():
    return TestClient(app)


def test_service_health_and_schema(client):
    assert client.get("/health").json()["status"] == "ok"
    assert client.get("/schema").json() == json_schema()


def test_service_runs_experiments(client):
    body = json.loads((FIX / "grow_cat2.json").read_text())
    r = client.post("/experiments", json=body)
    assert r.status_code == 200
    data = r.json()
    assert data["exit_code"] == 0
    local = run_experiment(load_config(body))
    assert data["artifacts"] == local.artifacts


def test_service_rejects_bad_configs(client):
    r = client.post("/experiments", json=json.loads((FIX / "bad_gamma.json").read_text()))
    assert r.status_code == 422
    assert client.post("/experiments", json={"nope": 1}).status_code == 422


def test_service_sequence_times(client):
    r = client.post("/sequences/times", json={"values": [1, -1, 1, 1], "threshold": 0.0})
    assert r.json()["times"] == [1, 3, 4]
    r = client.post("/sequences/times", json={"values": [0, 2, 0, 0], "threshold": 1.0,
                                              "op": "pliss", "bound": 2.0, "eta": 0.0})
    assert r.json()["times"] == [1, 4]
    r = client.post("/sequences/times", json={"values": [0.693, -0.693, 0.693, 0.693],
                                              "threshold": 0.0, "op": "domination_prefix"})
    assert r.json()["prefix"] == 4
    r = client.post("/sequences/times", json={"values": [0, 3], "threshold": 1.0,
                                              "op": "pliss", "bound": 2.0, "eta": 0.0})
    assert r.status_code == 422


def test_cli_remote_mode(tmp_path, monkeypatch, client):
    import httpx

    def fake_post(url, json=None, timeout=None):
        assert url == "http://svc/experiments"
        r = client.post("/experiments", json=json)
        return httpx.Response(r.status_code, json=r.json(), request=httpx.Request("POST", url))

    monkeypatch.setattr(httpx, "post", fake_post)
    assert run_cli("synth", "--server", "http://svc/", "--out", tmp_path) == 0
    assert (tmp_path / "sequence.csv").exists()
    assert run_cli("blocks", "--config", FIX / "bad_gamma.json", "--server", "http://svc") == 2
