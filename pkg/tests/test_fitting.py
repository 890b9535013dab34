import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlsstab.fitting import DecayRecord, fit_decay, make_record

T = np.logspace(0, 2, 40)


def test_pure_power_is_exact():
    f, C = fit_decay(T, 3.0 * (1 + T) ** -0.5)
    assert f.B == pytest.approx(0.5, abs=1e-6)
    assert f.A == 0.0
    assert C == pytest.approx(3.0)
    assert f.rms < 1e-12
    assert f.npoints == 40


def test_power_log_recovers_both_exponents():
    t = np.logspace(1, 4, 60)
    v = np.log(2 + t) / (1 + t) ** 0.75
    f, _ = fit_decay(t, v, "power-log", window=(10, 1e4))
    assert f.B == pytest.approx(0.75, abs=0.02)
    assert f.A == pytest.approx(1.0, abs=0.02)


def test_fixed_log_model():
    v = 1 / ((1 + T) * np.log(2 + T) ** 2)
    f, _ = fit_decay(T, v, "fixed-log", A_fixed=-2.0)
    assert f.B == pytest.approx(1.0, abs=1e-10)
    assert f.A == -2.0
    with pytest.raises(ValueError):
        fit_decay(T, v, "fixed-log")


def test_constant_series():
    f, _ = fit_decay(T, np.full_like(T, 0.3))
    assert abs(f.B) < 1e-12


def test_rejections():
    with pytest.raises(ValueError, match="at least 8"):
        fit_decay(T[:5], T[:5] ** -1.0)
    with pytest.raises(ValueError, match="decade"):
        fit_decay(np.linspace(10, 50, 20), np.linspace(10, 50, 20) ** -1.0)
    with pytest.raises(ValueError, match="positive"):
        fit_decay(T, -T)
    with pytest.raises(ValueError, match="unknown model"):
        fit_decay(T, T, "exp")
    with pytest.raises(ValueError):
        fit_decay(T, T[:-1])


def test_window_selects_points():
    t = np.logspace(0, 3, 60)
    v = np.where(t < 10, 1.0, (1 + t) ** -1.0)
    f, _ = fit_decay(t, v, window=(10, 1000))
    assert f.B == pytest.approx(1.0, abs=1e-10)
    assert f.window[0] >= 10


def test_confidence_interval_covers_noisy_truth():
    rng = np.random.default_rng(4)
    v = (1 + T) ** -0.8 * np.exp(0.02 * rng.normal(size=T.size))
    f, _ = fit_decay(T, v)
    assert 0 < f.ci < 0.1
    assert abs(f.B - 0.8) < 2 * f.ci


@settings(max_examples=50, deadline=None)
@given(st.floats(-1.0, 3.0), st.floats(-3.0, 3.0), st.floats(1e-3, 1e3))
def test_exact_on_own_family(B, A, C):
    v = C * np.log(2 + T) ** A / (1 + T) ** B
    f, c = fit_decay(T, v, "power-log")
    assert f.B == pytest.approx(B, abs=1e-6)
    assert f.A == pytest.approx(A, abs=1e-6)
    assert c == pytest.approx(C, rel=1e-6)


def test_record_csv_and_pass_logic(tmp_path):
    rec = make_record("lp:4", T, (1 + T) ** -0.5, (2, 100), predicted=(0.0, 0.5))
    assert rec.valid and rec.passes(0.15)
    rec.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["t", "norm", "fitted_envelope", "in_window"]
    assert len(rows) == T.size + 1
    assert {r[3] for r in rows[1:]} == {"0", "1"}
    assert float(rows[-1][2]) == pytest.approx(float(rows[-1][1]), rel=1e-9)

    bad = make_record("lp:4", T[:4], T[:4], (1, 2), predicted=(0.0, 0.5))
    assert not bad.valid and not bad.passes(1.0) and bad.note
    assert np.isnan(bad.B)
    bad.write_csv(tmp_path / "bad.csv")
    assert DecayRecord("x", T, T, (1, 2)).passes(1) is False
