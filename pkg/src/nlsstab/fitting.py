"""Power-law / log-power fits of decay series, and the record type that carries them."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

MODELS = ("pure-power", "power-log", "fixed-log")


@dataclass(frozen=True)
class FitResult:
    """value ~ C log^A(2+t) / (1+t)^B over ``window``."""
    B: float
    A: float
    ci: float               # 95% half-width on B
    window: tuple
    rms: float              # residual RMS in log(value)
    model: str = "pure-power"
    npoints: int = 0

    def envelope(self, t, C: float = 1.0):
        t = np.asarray(t, dtype=float)
        return C * np.log(2 + t) ** self.A / (1 + t) ** self.B


def fit_decay(t, values, model: str = "pure-power", window=None, A_fixed: float | None = None,
              min_points: int = 8, min_decades: float = 1.0) -> tuple[FitResult, float]:
    """Least squares of log(value) on [1, -log(1+t), log log(2+t)].

    ``model``: "pure-power" (A = 0), "power-log" (A fitted), "fixed-log" (A = A_fixed).
    Returns the fit and the prefactor C.
    """
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
    t = np.asarray(t, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise ValueError("t and values differ in length")
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
    if len(t) < min_points:
        raise ValueError(f"fit needs at least {min_points} points in the window, got {len(t)}")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("fit needs finite positive values")
    lo, hi = float(t.min()), float(t.max())
    if lo <= 0 or np.log10(hi / lo) < min_decades - 1e-12:
        raise ValueError(f"fit window [{lo:g}, {hi:g}] spans less than {min_decades:g} decade(s)")
    y = np.log(v)
    cols = [np.ones_like(t), -np.log1p(t)]
    if model == "power-log":
        cols.append(np.log(np.log(2 + t)))
    elif model == "fixed-log":
        if A_fixed is None:
            raise ValueError("fixed-log model needs A_fixed")
        y = y - A_fixed * np.log(np.log(2 + t))
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("degenerate regressors: the window cannot separate the model terms")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = len(t) - X.shape[1]
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    cov = s2 * np.linalg.inv(X.T @ X)
    ci = float(stats.t.ppf(0.975, dof) * np.sqrt(cov[1, 1])) if dof > 0 else np.inf
    A = float(coef[2]) if model == "power-log" else (float(A_fixed) if model == "fixed-log" else 0.0)
    rms = float(np.sqrt(np.mean(resid**2)))
    return FitResult(float(coef[1]), A, ci, (lo, hi), rms, model, len(t)), float(np.exp(coef[0]))


@dataclass(eq=False)
class DecayRecord:
    probe: str
    times: np.ndarray
    values: np.ndarray
    window: tuple
    fit: FitResult | None = None
    prefactor: float = np.nan
    predicted: tuple | None = None      # (A, B) from the relevant estimate
    valid: bool = True
    note: str = ""
    alt: dict = field(default_factory=dict)   # other envelopes tried: name -> FitResult

    @property
    def B(self) -> float:
        return self.fit.B if self.fit is not None else np.nan

    def passes(self, tol: float) -> bool:
        return bool(self.valid and self.fit is not None and self.predicted is not None
                    and abs(self.fit.B - self.predicted[1]) <= tol)

    def write_csv(self, path: str | Path) -> None:
        env = (self.fit.envelope(self.times, self.prefactor) if self.fit is not None
               else np.full(len(self.times), np.nan))
        lo, hi = self.window
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm", "fitted_envelope", "in_window"])
            for t, v, e in zip(self.times, self.values, env):
                w.writerow([f"{t:.6f}", f"{v:.12e}", f"{e:.12e}", int(lo <= t <= hi)])


def make_record(probe: str, times, values, window, predicted=None, model: str = "pure-power",
                A_fixed=None, extra_models=(), min_decades: float = 1.0) -> DecayRecord:
    """Fit a series over its window; a failed fit gives an invalid record rather than an exception."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    rec = DecayRecord(probe, times, values, tuple(float(w) for w in window), predicted=predicted)
    try:
        rec.fit, rec.prefactor = fit_decay(times, values, model, window, A_fixed, min_decades=min_decades)
    except ValueError as exc:
        rec.valid = False
        rec.note = str(exc)
        return rec
    for name, (m, a) in dict(extra_models).items():
        try:
            rec.alt[name] = fit_decay(times, values, m, window, a, min_decades=min_decades)[0]
        except ValueError:
            pass
    return rec
