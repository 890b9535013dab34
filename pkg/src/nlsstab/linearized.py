"""The linearized flow around a moving bound state,

    i z_t = H z + P_c Dg_{psi_E(t)} R_{a(t)} z,   z in H_0,

its propagator Omega(t, s), the difference T(t, s) = Omega(t, s) - e^{-iH(t-s)} P_c,
and probes of their decay and smoothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .evolution import Trajectory
from .fitting import DecayRecord, make_record
from .grid import Grid
from .hamiltonian import COMPOSITION, Hamiltonian
from .manifold import DUAL_PAIRING_MIN, ManifoldBranch, ManifoldError
from .nonlinearity import NonlinearitySpec


class FlowError(ValueError):
    pass


@dataclass(eq=False)
class LinearizationFamily:
    """Coefficients a(t) of the linearization; psi_E(t) = psi_E(a(t)) from the branch."""
    branch: ManifoldBranch
    spec: NonlinearitySpec
    a_of_t: object                    # callable t -> complex
    t_range: tuple = (-np.inf, np.inf)
    kind: str = "frozen"
    absorber: np.ndarray | None = None

    @property
    def H(self) -> Hamiltonian:
        return self.branch.H

    @property
    def grid(self) -> Grid:
        return self.branch.grid

    @classmethod
    def frozen(cls, branch, spec, a: complex, **kw):
        return cls(branch, spec, lambda t: complex(a), kind="frozen", **kw)

    @classmethod
    def rotating(cls, branch, spec, a0: complex, **kw):
        """Exact bound-state orbit a(t) = a0 e^{-i E(|a0|) t}."""
        E = branch.energy(abs(a0))
        return cls(branch, spec, lambda t: complex(a0) * np.exp(-1j * E * t), kind="rotating", **kw)

    @classmethod
    def zero(cls, branch, spec, **kw):
        return cls(branch, spec, lambda t: 0j, kind="zero", **kw)

    @classmethod
    def from_trajectory(cls, branch, spec, traj: Trajectory, **kw):
        """a(t) = e^{-i theta(t)} a~(t), both interpolated linearly between samples."""
        t = np.asarray(traj.times)
        at = traj.atilde
        th = np.asarray(traj.theta_series)

        def a_of_t(s):
            s = float(np.clip(s, t[0], t[-1]))
            z = np.interp(s, t, at.real) + 1j * np.interp(s, t, at.imag)
            return complex(np.exp(-1j * np.interp(s, t, th)) * z)

        return cls(branch, spec, a_of_t, (float(t[0]), float(t[-1])), "trajectory", **kw)

    def _coefficients(self, r: float):
        """Real profile data at |a| = r, cached for the last few r.

        At real a = r the base phi is real, so Dg_phi acts as g'(phi) on Re and
        q(|phi|) on Im, the duals are phi/(r p) and i phi'/(r p) and the R_a
        system is diagonal.  A complex a = r e^{i th} follows by gauge rotation.
        """
        cache = self.__dict__.setdefault("_coef_cache", {})
        hit = cache.get(r)
        if hit is not None:
            return hit
        grid, psi0 = self.grid, self.H.psi0
        phi, dphi = self.branch.real_profile(r)
        pairing = grid.inner_real(phi / r, dphi)
        if abs(pairing) < DUAL_PAIRING_MIN:
            raise ManifoldError(f"dual pairing {pairing:.3f} below {DUAL_PAIRING_MIN} at |a| = {r:g}")
        d1 = phi / (r * pairing)
        d2 = dphi / pairing
        a11, a22 = float(np.sum(d1 * psi0)) * grid.cell, float(np.sum(d2 * psi0)) * grid.cell
        if min(abs(a11), abs(a22)) < 1e-8:
            raise ManifoldError("R_a system is singular along the family")
        m = np.abs(phi)
        qv = self.spec.q(m)
        gp = self.spec.gprime_scalar(m)
        out = (qv, gp, d1, d2, a11, a22)
        if len(cache) >= 8:
            cache.pop(next(iter(cache)))
        cache[r] = out
        return out

    def coupling(self, tau: float, z: np.ndarray) -> np.ndarray:
        """-i P_c Dg_{psi_E} R_a z at time tau."""
        a = complex(self.a_of_t(tau))
        if a == 0:
            return np.zeros_like(z)
        r = abs(a)
        u = a / r
        grid, psi0 = self.grid, self.H.psi0
        qv, gp, d1, d2, a11, a22 = self._coefficients(r)
        y = np.conj(u) * z
        yr, yi = y.real, y.imag
        # the kinetic/potential sub-steps leave z in H_0 only up to splitting error
        yr = yr - (np.sum(psi0 * yr) * grid.cell) * psi0
        yi = yi - (np.sum(psi0 * yi) * grid.cell) * psi0
        er = yr - (np.sum(d1 * yr) * grid.cell / a11) * psi0
        ei = yi - (np.sum(d2 * yi) * grid.cell / a22) * psi0
        wr, wi = gp * er, qv * ei
        wr = wr - (np.sum(psi0 * wr) * grid.cell) * psi0
        wi = wi - (np.sum(psi0 * wi) * grid.cell) * psi0
        return u * (wi - 1j * wr)

    def amplitude(self, tau: float, sigma: float) -> float:
        """||<x>^{4 sigma/3} psi_E(tau)||_{H^2}, the smallness the estimates assume."""
        a = self.a_of_t(tau)
        if a == 0:
            return 0.0
        return self.grid.norm_sobolev(self.grid.japanese(4 * sigma / 3) * self.branch.psi_at(a), 2)


class _OmegaStepper:
    def __init__(self, fam: LinearizationFamily, dt: float, order: int):
        self.fam = fam
        self.order = order
        grid = fam.grid
        W = 0.0 if fam.absorber is None else fam.absorber
        self.stages = []
        for w in COMPOSITION[order]:
            h = w * dt
            self.stages.append((h, np.exp((-1j * fam.H.V - W) * (0.5 * h)), np.exp(-1j * grid.k2 * h)))
        self.psi0 = fam.H.psi0
        self.grid = grid

    def _couple(self, z, tau, h):
        # one Runge-Kutta step of z' = C(tau) z per half step, of the composition's order
        if self.fam.kind == "zero":
            return z
        C = self.fam.coupling
        if self.order == 2:
            return z + h * C(tau + 0.5 * h, z + 0.5 * h * C(tau, z))
        k1 = C(tau, z)
        k2 = C(tau + 0.5 * h, z + 0.5 * h * k1)
        k3 = C(tau + 0.5 * h, z + 0.5 * h * k2)
        k4 = C(tau + h, z + h * k3)
        return z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def step(self, z, tau):
        for h, half, kin in self.stages:
            z = self._couple(z, tau, 0.5 * h)
            z = half * z
            z = sfft.ifft2(kin * sfft.fft2(z))
            z = half * z
            z = self._couple(z, tau + 0.5 * h, 0.5 * h)
            tau += h
        # keep the iterate in H_0 against round-off and splitting drift
        return z - self.grid.inner(self.psi0, z) * self.psi0


def _check_h0(fam, v):
    g = fam.grid
    v = g.check(np.asarray(v, dtype=complex))
    if abs(g.inner(fam.H.psi0, v)) > 1e-8 * max(1.0, g.norm_l2(v)):
        raise FlowError("input is not in the continuous subspace (P_c v != v)")
    return v


def _nsteps(s, t, dt):
    n = int(np.ceil(abs(t - s) / dt - 1e-9))
    return max(n, 1) if t != s else 0


def propagate_omega(fam: LinearizationFamily, v: np.ndarray, s: float, t: float, dt: float = 0.02,
                    order: int = 4, record_times=None, record=None):
    """Omega(t, s) v.  With ``record_times`` (on the step grid), ``record(time, z)`` is called there."""
    v = _check_h0(fam, v)
    lo, hi = fam.t_range
    if min(s, t) < lo - 1e-9 or max(s, t) > hi + 1e-9:
        raise FlowError(f"times [{s:g}, {t:g}] leave the family range [{lo:g}, {hi:g}]")
    n = _nsteps(s, t, dt)
    if n == 0:
        return v.copy()
    h = (t - s) / n
    st = _OmegaStepper(fam, h, order)
    rec_steps = {}
    if record_times is not None:
        for rt in record_times:
            rec_steps[int(round((rt - s) / h))] = rt
    z = v.copy()
    if 0 in rec_steps and record is not None:
        record(rec_steps[0], z)
    for k in range(n):
        z = st.step(z, s + k * h)
        if record is not None and (k + 1) in rec_steps:
            record(rec_steps[k + 1], z)
    return z


def propagate_free(fam: LinearizationFamily, v, s, t, dt: float = 0.02, order: int = 4):
    """e^{-iH(t-s)} P_c v with the same step sequence (and absorber) as propagate_omega."""
    zf = LinearizationFamily(fam.branch, fam.spec, lambda tau: 0j, fam.t_range, "zero", fam.absorber)
    return propagate_omega(zf, fam.H.project_continuous(v), s, t, dt, order)


def t_operator(fam: LinearizationFamily, v, s, t, dt: float = 0.02, order: int = 4):
    return propagate_omega(fam, v, s, t, dt, order) - propagate_free(fam, v, s, t, dt, order)


# probes ---------------------------------------------------------------------------------------
#
# "w:SIGMA"  L^2_sigma -> L^2_{-sigma}, envelope 1 / ((1+t) log^2(2+t)), algebraic exponent 1
# "lp:P"     L^{p'} -> L^p, exponent 1 - 2/p

def _norm_pair(grid: Grid, probe: str):
    kind, val = probe.split(":")
    x = float(val)
    if kind == "w":
        return (lambda f: grid.norm_weighted_l2(f, x)), (lambda f: grid.norm_weighted_l2(f, -x)), 1.0
    if kind == "lp":
        pp = x / (x - 1.0)
        return (lambda f: grid.norm_lp(f, pp)), (lambda f: grid.norm_lp(f, x)), 1.0 - 2.0 / x
    raise ValueError(f"unknown operator probe {probe!r}")


def ensemble_ratios(fam: LinearizationFamily, v_ensemble, s: float, times, probe: str,
                    dt: float = 0.02, order: int = 4) -> np.ndarray:
    """ratios[k, j] = ||Omega(s + times_j, s) v_k||_out / ||v_k||_in."""
    grid = fam.grid
    nin, nout, _ = _norm_pair(grid, probe)
    times = np.asarray(times, dtype=float)
    out = np.zeros((len(v_ensemble), len(times)))
    for k, v in enumerate(v_ensemble):
        den = nin(v)
        row = {}
        propagate_omega(fam, v, s, s + times[-1], dt, order, record_times=s + times,
                        record=lambda tt, z: row.__setitem__(round(tt - s, 9), nout(z) / den))
        out[k] = [row[round(tj, 9)] for tj in times]
    return out


def measure_omega_decay(fam: LinearizationFamily, v_ensemble, s: float, times, probe: str,
                        window, dt: float = 0.02, order: int = 4) -> DecayRecord:
    """Worst case over the ensemble of the probe's norm ratio, fitted by a pure power."""
    if len(v_ensemble) < 5:
        raise ValueError("an ensemble of at least 5 inputs is required")
    times = np.asarray(times, dtype=float)
    r = ensemble_ratios(fam, v_ensemble, s, times, probe, dt, order)
    worst = r.max(axis=0)
    _, _, B = _norm_pair(fam.grid, probe)
    extra = {"log2": ("fixed-log", -2.0)} if probe.startswith("w:") else {}
    rec = make_record(f"omega-{probe}", times, worst, window, predicted=(0.0, B), extra_models=extra)
    if probe.startswith("w:"):
        rec.predicted = (-2.0, 1.0)
    return rec


def kato_smoothing_check(fam: LinearizationFamily, v, s: float, T: float, sigma: float = 2.0,
                         dt: float = 0.02, order: int = 4, sample: float = 0.1) -> float:
    """(int_s^{s+T} ||<x>^{-sigma} Omega(tau, s) v||^2 dtau)^{1/2} / ||v||_{L^2}."""
    grid = fam.grid
    v = _check_h0(fam, v)
    times = s + np.arange(0.0, T + 0.5 * sample, sample)
    vals = {}
    propagate_omega(fam, v, s, s + T, dt, order, record_times=times,
                    record=lambda tt, z: vals.__setitem__(tt, grid.norm_weighted_l2(z, -sigma) ** 2))
    y = np.array([vals[tt] for tt in times])
    integral = float(np.sum(0.5 * np.diff(times) * (y[1:] + y[:-1])))
    return float(np.sqrt(integral)) / grid.norm_l2(v)


def localized_ensemble(grid: Grid, H: Hamiltonian, n: int = 5, seed: int = 0, width: float = 1.0,
                       spread: float = 2.0, momentum: float = 0.0):
    """Seeded Gaussian packets near the origin, projected onto H_0 and L^2-normalized."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x0, y0 = rng.uniform(-spread, spread, 2)
        kx, ky = rng.normal(0.0, momentum, 2) if momentum else (0.0, 0.0)
        w = width * rng.uniform(0.8, 1.25)
        ph = rng.uniform(0, 2 * np.pi)
        f = np.exp(-((grid.X - x0) ** 2 + (grid.Y - y0) ** 2) / (2 * w * w) + 1j * (kx * grid.X + ky * grid.Y + ph))
        f = H.project_continuous(f)
        out.append(f / grid.norm_l2(f))
    return out


__all__ = ["LinearizationFamily", "propagate_omega", "propagate_free", "t_operator", "ensemble_ratios",
           "measure_omega_decay", "kato_smoothing_check", "localized_ensemble", "FlowError", "ManifoldError"]
