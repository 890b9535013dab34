"""Nonlinear time stepping with modulation tracking of the bound-state parameter.

At each sample time the solution is split as u = psi_E(a) + eta.  The phase
theta(t) = int_0^t E(|a(s)|) ds is accumulated by the trapezoid rule and the
rotating-frame parameter a~ = e^{i theta} a is what the modulation equation
governs:

    d a~/dt = (I - M)^{-1} [Re<Psi_1, -i g2>, Re<Psi_2, -i g2>],

with g2 = g(psi_E + eta~) - g(psi_E) - Dg_{psi_E}[eta~] evaluated in that frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .decomposition import DecompositionError, decompose, m_matrix
from .grid import FieldError, Grid
from .hamiltonian import Hamiltonian, SplitStep
from .manifold import BoundState, ManifoldBranch, ManifoldError, complex_bound_state
from .nonlinearity import NonlinearitySpec, eval_g2

log = logging.getLogger(__name__)

BLOWUP_FACTOR = 1e3


class InstabilityError(RuntimeError):
    pass


# conserved quantities --------------------------------------------------------------

def mass(grid: Grid, u: np.ndarray) -> float:
    return grid.norm_l2(u) ** 2


def energy(H: Hamiltonian, spec: NonlinearitySpec, u: np.ndarray) -> float:
    """int |grad u|^2 + V |u|^2 + 2 G(|u|), G' = g."""
    grid = H.grid
    dens = grid.gradient_sq(u) + H.V * np.abs(u) ** 2 + 2.0 * spec.antiderivative(np.abs(u))
    return float(np.sum(dens) * grid.cell)


# probes --------------------------------------------------------------------------------
#
# A probe is a short string: "lp:4", "lp:inf", "w:-2" (weighted L^2 with sigma = -2),
# "h:1" (Sobolev).  It is also the CSV column suffix.

def parse_probe(probe: str) -> tuple[str, float]:
    try:
        kind, val = probe.split(":")
        v = float(val)
    except ValueError:
        raise ValueError(f"bad probe {probe!r}; expected e.g. 'lp:4', 'lp:inf', 'w:-2', 'h:1'") from None
    if kind not in ("lp", "w", "h"):
        raise ValueError(f"unknown probe kind {kind!r} in {probe!r}")
    if kind == "lp" and not v >= 1:
        raise ValueError(f"L^p probe needs p >= 1, got {probe!r}")
    return kind, v


def probe_norm(grid: Grid, f: np.ndarray, probe: str) -> float:
    kind, v = parse_probe(probe)
    if kind == "lp":
        return grid.norm_lp(f, v)
    if kind == "w":
        return grid.norm_weighted_l2(f, v)
    return grid.norm_sobolev(f, int(v))


def probe_name(probe: str) -> str:
    kind, v = parse_probe(probe)
    tag = "inf" if np.isinf(v) else f"{v:g}"
    return f"eta_{kind}{tag}".replace("-", "m")


# one step -------------------------------------------------------------------------------

def step_nls(H: Hamiltonian, spec: NonlinearitySpec, u: np.ndarray, dt: float, order: int = 2,
             absorber: np.ndarray | None = None) -> np.ndarray:
    """One symmetric split step of i u_t = (-Delta + V) u + g(u)."""
    u = H.grid.check(np.asarray(u, dtype=complex))
    with np.errstate(over="ignore", invalid="ignore"):
        out = SplitStep(H.grid, H.V, dt, order, spec, absorber).step(u)
    m0 = np.abs(u).max()
    if not np.all(np.isfinite(out)) or np.abs(out).max() > BLOWUP_FACTOR * max(m0, 1e-300):
        raise InstabilityError(f"amplitude blow-up in one step of size {dt:g}")
    return out


# modulation ---------------------------------------------------------------------------

def modulation_rhs(bs: BoundState, spec: NonlinearitySpec, eta: np.ndarray, m: np.ndarray, grid: Grid) -> complex:
    """(d a1/dt) + i (d a2/dt) in the rotating frame, for eta already in that frame."""
    g2 = eval_g2(spec, bs.psiE, eta)
    rhs = np.array([grid.inner_real(bs.Psi1, -1j * g2), grid.inner_real(bs.Psi2, -1j * g2)])
    A = np.eye(2) - m
    if abs(np.linalg.det(A)) < 1e-12:
        raise ManifoldError("I - M is singular")
    x = np.linalg.solve(A, rhs)
    return complex(x[0], x[1])


# tracked run -------------------------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    probes: list
    times: list = field(default_factory=list)
    a_series: list = field(default_factory=list)
    theta_series: list = field(default_factory=list)
    E_series: list = field(default_factory=list)
    mass_series: list = field(default_factory=list)
    energy_series: list = field(default_factory=list)
    eta_norms: dict = field(default_factory=dict)
    rhs_series: list = field(default_factory=list)
    m_norms: list = field(default_factory=list)
    constraint_residuals: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    ode_residuals: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.probes:
            self.eta_norms.setdefault(p, [])

    @property
    def atilde(self) -> np.ndarray:
        return np.exp(1j * np.asarray(self.theta_series)) * np.asarray(self.a_series)

    @property
    def truncated(self) -> bool:
        return any(f.startswith("truncated") for f in self.flags)

    def as_arrays(self) -> dict:
        out = {"t": np.asarray(self.times), "a": np.asarray(self.a_series), "theta": np.asarray(self.theta_series),
               "mass": np.asarray(self.mass_series), "energy": np.asarray(self.energy_series)}
        for p in self.probes:
            out[p] = np.asarray(self.eta_norms[p])
        return out


@dataclass(eq=False)
class RunState:
    """Everything needed to continue a tracked run: solution, step counter, partial trajectory."""
    u: np.ndarray
    step: int
    traj: Trajectory


def _sample(traj, H, branch, spec, u, t, a_prev, E_prev, theta_prev, t_prev, snapshot, ceiling=None):
    grid = H.grid
    dec = decompose(branch, u, a_guess=a_prev, norm_ceiling=ceiling)
    E = branch.energy(abs(dec.a))
    theta = 0.0 if t_prev is None else theta_prev + 0.5 * (t - t_prev) * (E + E_prev)
    rot = np.exp(1j * theta)
    at = rot * dec.a
    eta_t = rot * dec.eta
    bs = complex_bound_state(branch, at, with_residual=False)
    m_t, _ = m_matrix(branch, at, bs.psiE + eta_t, bs.psiE)
    rhs = modulation_rhs(bs, spec, eta_t, m_t, grid)
    traj.times.append(float(t))
    traj.a_series.append(complex(dec.a))
    traj.theta_series.append(float(theta))
    traj.E_series.append(float(E))
    traj.mass_series.append(mass(grid, u))
    traj.energy_series.append(energy(H, spec, u))
    for p in traj.probes:
        traj.eta_norms[p].append(probe_norm(grid, dec.eta, p))
    traj.rhs_series.append(rhs)
    traj.m_norms.append(dec.m_norm)
    traj.constraint_residuals.append(dec.constraint_residual)
    if snapshot:
        traj.snapshots[float(t)] = dec.eta.copy()
    return dec.a, E, theta


def run_with_tracking(H: Hamiltonian, branch: ManifoldBranch, spec: NonlinearitySpec, u0: np.ndarray,
                      T: float, dt: float, probes, sample_every: float = 0.1, absorber: np.ndarray | None = None,
                      order: int = 2, snapshot_times=(), resume: RunState | None = None,
                      checkpoint=None, checkpoint_every: float | None = None,
                      norm_ceiling: float | None = None) -> Trajectory:
    """Integrate to T, decomposing every ``sample_every`` time units.

    ``checkpoint(state)`` is called every ``checkpoint_every`` time units with a
    RunState that ``resume`` accepts.
    """
    grid = H.grid
    probes = list(probes)
    if not probes:
        raise ValueError("at least one probe is required")
    for p in probes:
        parse_probe(p)
    stride = int(round(sample_every / dt))
    if stride < 1 or abs(stride * dt - sample_every) > 1e-9 * sample_every:
        raise ValueError(f"sample interval {sample_every} is not a multiple of dt = {dt}")
    nsteps = int(round(T / dt))
    ck_stride = None if checkpoint_every is None else max(1, int(round(checkpoint_every / dt)))
    snap_steps = {int(round(s / dt)) for s in snapshot_times}
    stepper = SplitStep(grid, H.V, dt, order, spec, absorber)

    if resume is None:
        u = grid.check(np.asarray(u0, dtype=complex)).copy()
        traj = Trajectory(probes)
        traj.meta.update({"T": T, "dt": dt, "sample_every": sample_every, "order": order,
                          "absorber": absorber is not None})
        step = 0
        a_prev, E_prev, th_prev, t_prev = None, None, 0.0, None
    else:
        u, step, traj = resume.u.copy(), resume.step, resume.traj
        a_prev, E_prev = traj.a_series[-1], traj.E_series[-1]
        th_prev, t_prev = traj.theta_series[-1], traj.times[-1]

    amp0 = float(np.abs(u).max()) if resume is None else traj.meta.get("amp0", float(np.abs(u).max()))
    traj.meta["amp0"] = amp0
    if resume is None:
        try:
            a_prev, E_prev, th_prev = _sample(traj, H, branch, spec, u, 0.0, None, None, 0.0, None,
                                                0 in snap_steps, norm_ceiling)
            t_prev = 0.0
        except (DecompositionError, ManifoldError) as exc:
            traj.flags.append(f"truncated: decomposition failed at t=0 ({exc})")
            traj.meta["u_final"] = u
            return traj

    while step < nsteps:
        u = stepper.step(u)
        step += 1
        if step % stride == 0 or step == nsteps:
            if not np.all(np.isfinite(u)) or np.abs(u).max() > BLOWUP_FACTOR * max(amp0, 1e-300):
                raise InstabilityError(f"amplitude blow-up at t = {step * dt:g}")
            t = step * dt
            guess = None if a_prev is None else a_prev * np.exp(-1j * E_prev * (t - t_prev))
            try:
                a_prev, E_prev, th_prev = _sample(traj, H, branch, spec, u, t, guess, E_prev, th_prev, t_prev,
                                                  step in snap_steps, norm_ceiling)
            except (DecompositionError, ManifoldError, FieldError) as exc:
                traj.flags.append(f"truncated: decomposition failed at t={t:g} ({exc})")
                log.warning("run truncated at t=%g: %s", t, exc)
                break
            t_prev = t
        if ck_stride and step % ck_stride == 0 and checkpoint is not None:
            checkpoint(RunState(u, step, traj))
    traj.meta["u_final"] = u
    traj.ode_residuals = check_modulation_residual(traj)
    return traj


def check_modulation_residual(traj: Trajectory) -> np.ndarray:
    """|central difference of a~(t) - modulation rhs| per sample; NaN at the ends."""
    t = np.asarray(traj.times)
    if len(t) < 3:
        if len(t) == 0:
            raise ValueError("empty trajectory")
        return np.full(len(t), np.nan)
    at = traj.atilde
    rhs = np.asarray(traj.rhs_series)
    out = np.full(len(t), np.nan)
    out[1:-1] = np.abs((at[2:] - at[:-2]) / (t[2:] - t[:-2]) - rhs[1:-1])
    return out


# asymptotics ----------------------------------------------------------------------------

@dataclass(eq=False)
class AsymptoticState:
    a_plus: complex
    E_plus: float
    theta_tilde: np.ndarray
    convergence_rate: float
    distance: np.ndarray       # ||psi_E(t) - e^{-it(E_plus + theta_tilde)} psi_E(a_plus)||_{L^2}
    times: np.ndarray
    inconclusive: bool = False
    note: str = ""

    def theta_trend_ok(self) -> bool:
        th = np.abs(self.theta_tilde[1:])
        q = max(len(th) // 4, 1)
        return bool(np.all(th[-q:] < np.median(th[:q]))) if len(th) >= 4 else False


def _tail_fit(t, z):
    """a~(t) = a_inf + c (1+t)^(-eps) by a 1-D scan over eps with linear least squares inside."""
    best = None
    for eps in np.linspace(0.2, 3.0, 141):
        X = np.column_stack([np.ones_like(t), (1.0 + t) ** -eps])
        coef, *_ = np.linalg.lstsq(X, z, rcond=None)
        res = float(np.sum(np.abs(X @ coef - z) ** 2))
        if best is None or res < best[0]:
            best = (res, eps, coef)
    return best[1], complex(best[2][0]), complex(best[2][1])


def asymptotic_state(traj: Trajectory, branch: ManifoldBranch, window: tuple[float, float] | None = None,
                     settle_slope: float = 0.05) -> AsymptoticState:
    t = np.asarray(traj.times)
    at = traj.atilde
    lo, hi = (t[0], t[-1]) if window is None else window
    sel = (t >= lo) & (t <= hi)
    tail = sel & (t >= 0.5 * (lo + hi))
    if tail.sum() < 4:
        raise ValueError("not enough samples in the tail to estimate a limit")
    if np.ptp(np.abs(at[sel])) < 1e-13 * max(np.abs(at[0]), 1e-300):
        a_plus, eps, inconclusive, note = at[0], np.inf, False, "stationary"
    else:
        eps, a_plus, c = _tail_fit(t[tail], at[tail])
        # a~ should have settled: its tail drift relative to |a| must be small
        drift = np.abs(at[tail][-1] - at[tail][0]) / max(abs(a_plus), 1e-300)
        inconclusive = bool(drift > settle_slope)
        note = f"tail drift {drift:.2e}"
    E_plus = branch.energy(abs(a_plus)) if abs(a_plus) <= branch.a_max else np.nan
    Es = np.asarray(traj.E_series)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (Es[1:] + Es[:-1] - 2 * E_plus))])
    with np.errstate(invalid="ignore", divide="ignore"):
        theta_tilde = np.where(t > 0, integral / np.where(t > 0, t, 1.0), 0.0)
    # psi_E(a(t)) - e^{-i t (E_plus + theta_tilde)} psi_E(a_plus) with a(t) = e^{-i theta(t)} a~(t)
    grid = branch.grid
    psi_plus = branch.psi_at(a_plus)
    dist = np.empty(len(t))
    for k in range(len(t)):
        a_k = traj.a_series[k]
        ref = np.exp(-1j * t[k] * (E_plus + theta_tilde[k])) * psi_plus
        dist[k] = grid.norm_l2(branch.psi_at(a_k) - ref)
    return AsymptoticState(complex(a_plus), float(E_plus), theta_tilde, float(eps), dist, t, inconclusive, note)


# predicted decay ----------------------------------------------------------------------------

def q0_from_prime(q0_prime: float) -> float:
    return q0_prime / (q0_prime - 1.0)


def default_q0_prime(spec: NonlinearitySpec) -> float:
    return 0.95 * (4 + 2 * spec.alpha2) / (3 + 2 * spec.alpha2)


def p0_lower_bound(spec: NonlinearitySpec, q0: float) -> float:
    a1, a2 = spec.alpha1, spec.alpha2
    if q0 <= 4 + 2 * a2:
        raise ValueError(f"q0 = {q0:g} must exceed 4 + 2 alpha2 = {4 + 2 * a2:g}")
    return max(2.0 / (a1 - 0.5), (4 + 2 * a2) * (q0 - 2) / (q0 - (4 + 2 * a2)))


def exponents(spec: NonlinearitySpec, p0: float, q0: float) -> dict:
    """p1 (None when alpha1 >= 1), p2 and the admissibility of p0."""
    lb = p0_lower_bound(spec, q0)
    if not p0 > lb:
        raise ValueError(f"p0 = {p0:g} must exceed {lb:g} for this nonlinearity and q0")
    p2 = p0 * q0 / (p0 + q0 - 2)
    p1 = 2.0 / (1.0 - spec.alpha1 + 2.0 / p0) if spec.alpha1 < 1 else None
    return {"p0": p0, "q0": q0, "p1": p1, "p2": p2, "p0_lower_bound": lb}


def predicted_exponents(p: float, spec: NonlinearitySpec, p0: float, q0: float, check_range: bool = True):
    """(A, B, case) of the envelope log^A(2+t) / (1+t)^B for ||eta||_{L^p}."""
    ex = exponents(spec, p0, q0)
    if check_range and not (2 <= p <= ex["p2"] * (1 + 1e-12)):
        raise ValueError(f"p = {p:g} outside [2, p2 = {ex['p2']:.4g}]")
    if spec.alpha1 >= 1 or p <= ex["p1"]:
        B = 1 - 2 / p
        return B / (1 - 2 / p0), B, "I"
    B = spec.alpha1 - 2 / p0
    return B / (1 - 2 / p0), B, "II"


def predicted_envelope(p: float, spec: NonlinearitySpec, p0: float, q0: float):
    A, B, _ = predicted_exponents(p, spec, p0, q0)
    return lambda t: np.log(2 + np.asarray(t)) ** A / (1 + np.asarray(t)) ** B
