import json
import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from nlsstab import cli, harness
from nlsstab.config import ExperimentConfig, dump_config, load_config, parse_config_text
from nlsstab.evolution import parse_probe, run_with_tracking
from nlsstab.fitting import DecayRecord, FitResult
from nlsstab.grid import load_field
from nlsstab.nonlinearity import cubic, from_name

SMALL = """
name: small
grid: {n: 64, L: 12.0}
branch: {a_min: 1.0e-3, a_max: 0.2, ratio: 1.5}
run:
  a0: 0.1
  T: 1.0
  dt: 0.05
  sample_every: 0.1
  checkpoint_every: 0.5
  probes: ["lp:2", "lp:4", "w:-2"]
  perturbation: {amplitude: 0.01, width: 1.0, offset: 1.0}
fit: {t_min: 0.2, t_max: 1.0}
linear_probe: {probes: ["w:2", "lp:8"], T: 2.0, dt: 0.05, sample_every: 0.25}
"""


# independent transcription of the predicted envelope exponents
def _p1(a1, p0):
    return 2 / (1 - a1 + 2 / p0) if a1 < 1 else None


def _pred_B(p, a1, p0):
    p1 = _p1(a1, p0)
    if p1 is None or p <= p1:
        return 1 - 2 / p, "I"
    return a1 - 2 / p0, "II"


def _rec(p, B, ci=0.01):
    t = np.linspace(1, 10, 20)
    rec = DecayRecord(f"lp:{p}", t, t**-B, (1, 10))
    rec.fit = FitResult(A=0.0, B=B, ci=ci, window=(1, 10), rms=0.0)
    return rec


@pytest.fixture(scope="module")
def small_cfg():
    return parse_config_text(SMALL)


@pytest.fixture(scope="module")
def shared_branch(tmp_path_factory):
    return tmp_path_factory.mktemp("branch")


def test_config_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.grid.n == 512 and cfg.omega_probe.ensemble == 5
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


@settings(max_examples=40, deadline=None)
@given(n=st.sampled_from([32, 64, 128]), L=st.floats(4, 200), a0=st.floats(0, 0.2),
       dt=st.floats(1e-3, 0.1), seed=st.integers(0, 2**31), order=st.sampled_from([2, 4]))
def test_config_round_trip_property(n, L, a0, dt, seed, order):
    cfg = ExperimentConfig.model_validate({"seed": seed, "grid": {"n": n, "L": L},
                                           "run": {"a0": a0, "dt": dt, "order": order}})
    assert parse_config_text(dump_config(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "grid: {n: 63}",                             # odd grid
    "bogus: 1",                                  # unknown key
    "run: {order: 3}",
    "run: {probes: ['lq:2']}",
    "nonlinearity: {name: quartic}",
    "omega_probe: {ensemble: 4}",
    "potential: {kind: nowhere}",
    "linear_probe: {probes: ['h:1']}",
])
def test_config_rejects(text):
    with pytest.raises(ValidationError):
        parse_config_text(text)


def test_symbolic_probes_resolve(small_cfg):
    spec = from_name("power", 0.6)
    cfg = small_cfg.model_copy(update={"nonlinearity": small_cfg.nonlinearity.model_copy(
        update={"name": "power", "alpha": 0.6})})
    ex = harness.theory(cfg, spec)
    probes = harness.resolve_probes(["lp:2", "lp:p1", "lp:p2", "lp:2p1", "lp:2"], ex)
    vals = [parse_probe(p)[1] for p in probes]
    assert vals[0] == 2 and len(vals) == 4
    assert vals[1] == pytest.approx(_p1(0.6, 40), rel=1e-6)
    assert vals[3] == pytest.approx(2 * vals[1], rel=1e-6)
    # p1 is undefined for the cubic; the symbolic probe is dropped
    assert harness.resolve_probes(["lp:p1"], harness.theory(small_cfg, cubic())) == []


def test_theorem_table_cubic_is_case_one():
    spec, p0, q0 = cubic(), 40.0, 11.0
    rows = harness.compare_to_theorem([_rec(2, 0.0), _rec(4, 0.55), _rec(8, 0.9)], spec, p0, q0)
    labels = [r["label"] for r in rows]
    assert labels[:3] == ["2", "4", "p2"] and "8" in labels
    for r in rows:
        assert r["case"] == "I"
        assert r["pred_B"] == pytest.approx(_pred_B(r["p"], 1.0, p0)[0])
    st_ = {r["label"]: r["status"] for r in rows}
    assert st_ == {"2": "pass", "4": "pass", "p2": "absent", "8": "fail"}


def test_theorem_table_subcritical_cases():
    spec, p0 = from_name("power", 0.6), 40.0
    ex = harness.theory(ExperimentConfig(nonlinearity={"name": "power", "alpha": 0.6}), spec)
    p1, p2 = ex["p1"], ex["p2"]
    rows = harness.compare_to_theorem([_rec(2, 0.0), _rec(p2, 0.55), _rec(2 * p1, 0.55)], spec, p0, ex["q0"])
    by = {r["label"]: r for r in rows}
    assert by["2"]["case"] == "I" and by["p1"]["case"] == "I"
    assert by["p2"]["case"] == "II" and by["p2"]["pred_B"] == pytest.approx(0.6 - 2 / 40)
    assert by["2p1"]["in_range"] is False and by["p2"]["status"] == "pass"
    assert by["p1"]["status"] == "absent"
    assert harness.compare_to_theorem([], spec, p0, ex["q0"]) == []
    bad = _rec(2, 0.0)
    bad.valid = False
    assert harness.compare_to_theorem([bad], spec, p0, ex["q0"])[0]["status"] == "invalid"


def test_run_bundle(small_cfg, tmp_path, shared_branch):
    rep = harness.run_experiment(small_cfg, tmp_path / "a", branch_dir=shared_branch)
    out = tmp_path / "a"
    for name in ("config.yaml", "u0.bin", "u_final.bin", "trajectory.csv", "theorem.csv", "report.json",
                 "decay_eta_lp2.csv", "decay_eta_lp4.csv", "decay_eta_wm2.csv"):
        assert (out / name).exists(), name
    assert not (out / "checkpoint.pkl").exists()
    assert rep["status"] in ("pass", "fail")
    assert json.loads((out / "report.json").read_text())["seed"] == 0
    head = (out / "trajectory.csv").read_text().splitlines()[0].split(",")
    assert head[:5] == ["t", "a_re", "a_im", "a_abs", "theta"]
    assert head[-5:] == ["eta_lp4", "eta_wm2", "m_norm", "constraint_residual", "ode_residual"]
    g, u = load_field(out / "u0.bin")
    assert g.n == 64 and u.shape == (64, 64)
    assert load_config(out / "config.yaml") == small_cfg

    # same seed, same bytes
    harness.run_experiment(small_cfg, tmp_path / "b", branch_dir=shared_branch)
    for name in ("trajectory.csv", "decay_eta_lp4.csv", "u_final.bin"):
        assert (out / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # a different seed moves the perturbation
    harness.run_experiment(small_cfg, tmp_path / "c", seed=5, branch_dir=shared_branch)
    assert (out / "u0.bin").read_bytes() != (tmp_path / "c" / "u0.bin").read_bytes()

    again = harness.report_bundle(out)
    assert [r["status"] for r in again["theorem"]] == [r["status"] for r in rep["theorem"]]


def test_resume_matches_straight_run(small_cfg, tmp_path, shared_branch):
    full = tmp_path / "full"
    harness.run_experiment(small_cfg, full, branch_dir=shared_branch)
    # leave a half-way checkpoint behind, as an interrupted run would
    cut = small_cfg.model_copy(update={"run": small_cfg.run.model_copy(update={"T": 0.5})})
    part = tmp_path / "part"
    harness.run_experiment(cut, part, branch_dir=shared_branch)
    assert not (part / "checkpoint.pkl").exists()
    setup = harness.build_setup(small_cfg, shared_branch)
    u0, _ = harness.initial_data(setup, 0)
    states = []
    rc = small_cfg.run
    run_with_tracking(setup.H, setup.branch, setup.spec, u0, 0.5, rc.dt,
                      harness.resolve_probes(rc.probes, harness.theory(small_cfg, setup.spec)), rc.sample_every,
                      setup.absorber, rc.order, checkpoint=states.append, checkpoint_every=0.5,
                      norm_ceiling=setup.branch.a_max)
    assert states
    with open(part / "checkpoint.pkl", "wb") as fh:
        pickle.dump(states[-1], fh)
    harness.run_experiment(small_cfg, part, resume=True, branch_dir=shared_branch)
    assert (part / "trajectory.csv").read_bytes() == (full / "trajectory.csv").read_bytes()


def test_failure_writes_report(small_cfg, tmp_path, shared_branch):
    # a0 beyond the stored branch cannot be decomposed
    bad = small_cfg.model_copy(update={"run": small_cfg.run.model_copy(update={"a0": 5.0})})
    with pytest.raises(harness.HarnessError):
        harness.run_experiment(bad, tmp_path / "x", branch_dir=shared_branch)
    rep = json.loads((tmp_path / "x" / "report.json").read_text())
    assert rep["status"] == "error" and rep["failure"]["stage"]


def test_cli_exit_codes(small_cfg, tmp_path, capsys):
    cfgp = tmp_path / "c.yaml"
    cfgp.write_text(SMALL)
    assert cli.main(["build-branch", "--config", str(cfgp), "--out", str(tmp_path / "br")]) == 0
    rep = json.loads((tmp_path / "br" / "report.json").read_text())
    assert rep["checks"]["pass_h"] and rep["checks"]["pass_E"]
    (tmp_path / "bad.yaml").write_text("grid: {n: 63}\n")
    assert cli.main(["run", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "e")]) == 1
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 1
    # a measurement that cannot pass: a two-unit window on a 12-wide box
    code = cli.main(["probe-linear", "--config", str(cfgp), "--out", str(tmp_path / "lin"), "--seed", "2"])
    rep = json.loads((tmp_path / "lin" / "report.json").read_text())
    assert code == {"pass": 0, "fail": 2}[rep["status"]]
    assert rep["seed"] == 2 and (tmp_path / "lin" / "linear_w2.csv").exists()
    assert "status:" in capsys.readouterr().out
