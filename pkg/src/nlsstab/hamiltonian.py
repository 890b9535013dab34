"""H = -Delta + V on the periodic grid: potentials, ground state, P_c and e^{-iHt}.

The continuous-spectrum projection is I - <psi0, .> psi0, which is only the
right object when H has a single bound state and no zero-energy resonance;
``build_potential`` checks both by a low-lying spectral scan.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, cg, lobpcg

from .grid import FieldError, Grid

log = logging.getLogger(__name__)

GAP_TOL = 1e-3           # |E| below this counts as "zero energy"
LOCALIZED_MASS = 0.75    # fraction of mass inside r < L/2 for a state to count as localized
DECAY_RHO = 4.0          # decay exponent certified for the built-in kinds (needs > 3)

# Fourth-order triple-jump weights (Yoshida).
_YW1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
_YW0 = -(2.0 ** (1.0 / 3.0)) * _YW1
COMPOSITION = {2: (1.0,), 4: (_YW1, _YW0, _YW1)}


class PotentialError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class Potential:
    grid: Grid
    values: np.ndarray
    kind: str
    params: dict
    rho: float
    C: float


def _gaussian_well(grid: Grid, depth: float, width: float) -> np.ndarray:
    return -depth * np.exp(-grid.r2 / width**2)


def _compact_bump(grid: Grid, depth: float, width: float) -> np.ndarray:
    s = grid.r2 / width**2
    out = np.zeros(grid.shape)
    inside = s < 1.0
    out[inside] = -depth * np.exp(1.0 - 1.0 / (1.0 - s[inside]))
    return out


POTENTIAL_KINDS = {"gaussian-well": _gaussian_well, "compact-bump": _compact_bump}


def potential_values(kind: str, params: dict, grid: Grid) -> Potential:
    """Sample V and attach its decay certificate, without any spectral checks."""
    if kind not in POTENTIAL_KINDS:
        raise PotentialError(f"unknown potential kind {kind!r}; known: {sorted(POTENTIAL_KINDS)}")
    depth = float(params.get("depth", 1.0))
    width = float(params.get("width", 1.5))
    if depth < 0 or width <= 0:
        raise PotentialError(f"need depth >= 0 and width > 0, got depth={depth}, width={width}")
    V = POTENTIAL_KINDS[kind](grid, depth, width)
    C = float(np.max(np.abs(V) * grid.japanese(DECAY_RHO)))
    return Potential(grid, V, kind, {"depth": depth, "width": width}, DECAY_RHO, C)


@dataclass(eq=False)
class Hamiltonian:
    potential: Potential
    e0: float = np.nan
    psi0: np.ndarray | None = None
    n_negative: int = 0
    spectrum: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def grid(self) -> Grid:
        return self.potential.grid

    @property
    def V(self) -> np.ndarray:
        return self.potential.values

    def apply(self, f: np.ndarray) -> np.ndarray:
        return -self.grid.laplacian(f) + self.V * f

    def residual(self) -> float:
        return self.grid.norm_l2(self.apply(self.psi0) - self.e0 * self.psi0)

    def project_continuous(self, f: np.ndarray) -> np.ndarray:
        f = self.grid.check(f)
        if self.psi0 is None:
            return f.copy()
        return f - self.grid.inner(self.psi0, f) * self.psi0


# spectral scan ----------------------------------------------------------------

def _operator(grid: Grid, V: np.ndarray, shift: float = 0.0) -> LinearOperator:
    n2 = grid.n**2

    def mv(v):
        v = v.reshape(grid.shape + (-1,)) if v.ndim == 2 else v.reshape(grid.shape)
        if v.ndim == 3:
            out = sfft.ifft2(grid.k2[..., None] * sfft.fft2(v, axes=(0, 1)), axes=(0, 1)).real
            out += (V - shift)[..., None] * v
            return out.reshape(n2, -1)
        return (sfft.ifft2(grid.k2 * sfft.fft2(v)).real + (V - shift) * v).ravel()

    return LinearOperator((n2, n2), matvec=mv, matmat=mv, dtype=float)


def _kinetic_preconditioner(grid: Grid, c: float) -> LinearOperator:
    n2 = grid.n**2
    sym = 1.0 / (grid.k2 + c)

    def mv(v):
        if v.ndim == 2 and v.shape[1] > 1:
            v3 = v.reshape(grid.shape + (-1,))
            return sfft.ifft2(sym[..., None] * sfft.fft2(v3, axes=(0, 1)), axes=(0, 1)).real.reshape(n2, -1)
        return sfft.ifft2(sym * sfft.fft2(v.reshape(grid.shape))).real.ravel()

    return LinearOperator((n2, n2), matvec=mv, matmat=mv, dtype=float)


def low_spectrum(grid: Grid, V: np.ndarray, k: int = 3, seed: int = 0, tol: float = 1e-4):
    """Lowest k eigenpairs of the discrete H via preconditioned LOBPCG."""
    k = min(k, grid.n**2 // 4)
    rng = np.random.default_rng(seed)
    X0 = rng.standard_normal((grid.n**2, k))
    X0[:, 0] = np.exp(-grid.r2 / 4.0).ravel()
    vals, vecs = lobpcg(_operator(grid, V), X0, M=_kinetic_preconditioner(grid, 1.0),
                        largest=False, tol=tol, maxiter=500)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _localized(grid: Grid, vec: np.ndarray) -> bool:
    p = np.abs(vec.reshape(grid.shape)) ** 2
    return p[grid.r2 < (0.5 * grid.L) ** 2].sum() / p.sum() >= LOCALIZED_MASS


def _polish_ground_state(grid: Grid, V: np.ndarray, psi: np.ndarray, tol: float = 1e-12, maxit: int = 8):
    """Correction-equation refinement: solve P(H - E)P d = -r on psi-perp by CG."""
    prec = _kinetic_preconditioner(grid, 1.0)
    n2 = grid.n**2
    for _ in range(maxit):
        psi = psi / np.sqrt(np.sum(psi * psi) * grid.cell)
        Hpsi = -grid.laplacian(psi) + V * psi
        E = float(np.sum(psi * Hpsi) * grid.cell)
        r = Hpsi - E * psi
        res = np.sqrt(np.sum(r * r) * grid.cell)
        if res <= tol:
            return E, psi, res
        u = psi.ravel()

        def proj(v):
            return v - u * (u @ v) * grid.cell

        def mv(v):
            v = proj(v.ravel())
            w = (-grid.laplacian(v.reshape(grid.shape)) + (V - E) * v.reshape(grid.shape)).ravel()
            return proj(w)

        A = LinearOperator((n2, n2), matvec=mv, dtype=float)
        M = LinearOperator((n2, n2), matvec=lambda v: proj(prec.matvec(proj(v.ravel()))), dtype=float)
        d, _ = cg(A, -proj(r.ravel()), M=M, rtol=1e-3 * tol / max(res, tol), atol=0.0, maxiter=500)
        psi = psi + proj(d).reshape(grid.shape)
    psi = psi / np.sqrt(np.sum(psi * psi) * grid.cell)
    Hpsi = -grid.laplacian(psi) + V * psi
    E = float(np.sum(psi * Hpsi) * grid.cell)
    return E, psi, float(np.sqrt(np.sum((Hpsi - E * psi) ** 2) * grid.cell))


def ground_state(pot: Potential, seed: int = 0, tol: float = 1e-10, nscan: int = 3) -> Hamiltonian:
    """Scan the bottom of the spectrum, check the single-bound-state hypothesis, return H with (E0, psi0)."""
    grid = pot.grid
    if not np.any(pot.values):
        raise PotentialError("potential is identically zero: the free Laplacian has no bound state")
    vals, vecs = low_spectrum(grid, pot.values, k=nscan, seed=seed)
    bound, near_zero = [], []
    for j, E in enumerate(vals):
        if not _localized(grid, vecs[:, j]):
            continue  # box mode of the periodic cell, part of the discretized continuum
        if E < -GAP_TOL:
            bound.append(j)
        elif abs(E) < GAP_TOL:
            near_zero.append(j)
    if not bound:
        raise PotentialError("no negative eigenvalue found: the well binds nothing")
    if len(bound) > 1:
        more = " (at least)" if len(bound) == len(vals) else ""
        raise PotentialError(
            f"{len(bound)}{more} negative eigenvalues {np.round(vals[bound], 6).tolist()}; "
            "exactly one is required, make the well shallower or narrower")
    if near_zero:
        raise PotentialError(f"localized state at E = {vals[near_zero[0]]:.3e}: zero-energy resonance surrogate")
    psi = vecs[:, bound[0]].reshape(grid.shape)
    psi = psi * np.sign(psi.sum())
    E0, psi0, res = _polish_ground_state(grid, pot.values, psi, tol=tol)
    if res > tol * 10:
        raise ConvergenceError(f"ground state did not converge, residual {res:.2e}", res)
    if psi0.min() <= 0:
        # the true ground state is positive; tiny negative tails only come from round-off far out
        tail = np.abs(psi0[psi0 <= 0]).max()
        if tail > 1e-12 * psi0.max():
            raise ConvergenceError(f"ground state changes sign (min {psi0.min():.2e})", res)
    return Hamiltonian(pot, E0, psi0, len(bound), vals)


def build_potential(kind: str, params: dict, grid: Grid, seed: int = 0) -> Hamiltonian:
    return ground_state(potential_values(kind, params, grid), seed=seed)


# time stepping -------------------------------------------------------------------

def absorbing_layer(grid: Grid, frac: float = 0.15, strength: float = 1.0) -> np.ndarray:
    """Quadratic complex-absorbing-potential ramp over the outer ``frac`` of each axis."""
    start = (1.0 - frac) * grid.L
    W = np.zeros(grid.shape)
    for Z in (grid.X, grid.Y):
        W += strength * np.clip((np.abs(Z) - start) / (grid.L - start), 0.0, None) ** 2
    return W


class SplitStep:
    """Symmetric split-step for i u_t = -Delta u + (V - iW) u + [q(|u|) u].

    ``order`` 2 is Strang; 4 is the triple-jump composition of Strang steps.
    The nonlinear phase, if ``spec`` is given, is integrated exactly inside the
    diagonal half-steps since |u| is constant under it.
    """

    def __init__(self, grid: Grid, V: np.ndarray, dt: float, order: int = 2,
                 spec=None, absorber: np.ndarray | None = None):
        if order not in COMPOSITION:
            raise ValueError(f"order must be 2 or 4, got {order}")
        self.grid, self.dt, self.order, self.spec = grid, float(dt), order, spec
        self.stages = []
        W = 0.0 if absorber is None else absorber
        for w in COMPOSITION[order]:
            h = w * self.dt
            half = np.exp((-1j * V - W) * (0.5 * h))
            kin = np.exp(-1j * grid.k2 * h)
            self.stages.append((h, half, kin))

    def _diag(self, u, half, h):
        u = half * u
        if self.spec is not None and not self.spec.is_zero:
            u = u * np.exp(-0.5j * h * self.spec.q(np.abs(u)))
        return u

    def step(self, u: np.ndarray) -> np.ndarray:
        for h, half, kin in self.stages:
            u = self._diag(u, half, h)
            u = sfft.ifft2(kin * sfft.fft2(u))
            u = self._diag(u, half, h)
        return u

    def advance(self, u: np.ndarray, nsteps: int) -> np.ndarray:
        for _ in range(nsteps):
            u = self.step(u)
        return u


DT_MIN = 1e-4


def choose_dt(grid: Grid, V: np.ndarray, f: np.ndarray, t: float, tol: float, order: int = 4,
              dt0: float = 0.1, spec=None) -> float:
    """Step-doubling estimate of the local error, scaled to the horizon; halve dt until within tol."""
    dt = min(dt0, abs(t)) if t else dt0
    nrm = max(grid.norm_l2(f), 1e-300)
    while True:
        if dt < DT_MIN:
            raise ConvergenceError(f"step size underflow: dt fell below {DT_MIN} while seeking tol {tol:g}")
        one = SplitStep(grid, V, dt, order, spec).step(f)
        two = SplitStep(grid, V, 0.5 * dt, order, spec).advance(f, 2)
        local = grid.norm_l2(one - two) / nrm / (1.0 - 2.0 ** -order)
        if local * max(abs(t) / dt, 1.0) <= tol:
            return dt
        dt *= 0.5


def propagate_linear(H: Hamiltonian, f: np.ndarray, t: float, tol: float = 1e-8,
                     dt: float | None = None, order: int = 4) -> np.ndarray:
    """e^{-iHt} f by split-step with step-doubling control of dt."""
    f = H.grid.check(np.asarray(f, dtype=complex))
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("propagation time must be finite")
    if t == 0.0:
        return f.copy()
    if dt is None:
        dt = choose_dt(H.grid, H.V, f, t, tol, order)
    nsteps = int(np.ceil(abs(t) / dt - 1e-9))
    h = t / nsteps
    out = SplitStep(H.grid, H.V, h, order).advance(f, nsteps)
    if not np.all(np.isfinite(out)):
        raise FieldError("non-finite values during linear propagation")
    return out


def free_hamiltonian(grid: Grid) -> Hamiltonian:
    """H = -Delta (no bound state; psi0 left unset).  Used for free-decay probes."""
    pot = Potential(grid, np.zeros(grid.shape), "zero", {"depth": 0.0, "width": 1.0}, np.inf, 0.0)
    return Hamiltonian(pot, np.nan, None, 0)


# free dispersive decay ---------------------------------------------------------------------

def linear_decay_series(H: Hamiltonian, f0: np.ndarray, times, probe: str, dt: float = 0.05,
                        absorber: np.ndarray | None = None, order: int = 2) -> np.ndarray:
    """Probe norm of e^{-iHt} f0 at the given times (multiples of dt).

    Probes: "w:SIGMA" gives ||.||_{L^2_{-sigma}}, "lp:P" gives ||.||_{L^p}.
    """
    grid = H.grid
    kind, val = probe.split(":")
    x = float(val)
    if kind == "w":
        norm = lambda f: grid.norm_weighted_l2(f, -x)   # noqa: E731
    elif kind == "lp":
        norm = lambda f: grid.norm_lp(f, x)             # noqa: E731
    else:
        raise ValueError(f"unknown decay probe {probe!r}")
    times = np.asarray(times, dtype=float)
    steps = np.rint(times / dt).astype(int)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(times, 1)) or np.any(np.diff(steps) <= 0):
        raise ValueError("times must be increasing multiples of dt")
    stepper = SplitStep(grid, H.V, dt, order, absorber=absorber)
    u = grid.check(np.asarray(f0, dtype=complex)).copy()
    out = np.empty(len(times))
    k = 0
    for j, s in enumerate(steps):
        u = stepper.advance(u, s - k)
        k = s
        out[j] = norm(u)
    return out


def measure_linear_decay(H: Hamiltonian, f0: np.ndarray, times, probe: str, window, dt: float = 0.05,
                         absorber: np.ndarray | None = None, contaminated_after: float | None = None):
    """DecayRecord of e^{-iHt} P_c f0 under the probe.

    The weighted probe is fitted by a pure power (primary) and, as an alternative
    envelope, by 1/((1+t) log^2(2+t)) with the log power held fixed.
    """
    from .fitting import make_record

    times = np.asarray(times, dtype=float)
    if len(times) < 4:
        raise ValueError(f"need at least 4 sample times, got {len(times)}")
    if np.any(times <= 0):
        raise ValueError("sample times must be positive")
    grid = H.grid
    f0 = grid.check(np.asarray(f0, dtype=complex))
    if H.psi0 is not None and abs(grid.inner(H.psi0, f0)) > 1e-8 * max(1.0, grid.norm_l2(f0)):
        raise ValueError("initial data must lie in the continuous subspace")
    vals = linear_decay_series(H, f0, times, probe, dt, absorber)
    kind, val = probe.split(":")
    B = 1.0 if kind == "w" else 1.0 - 2.0 / float(val)
    extra = {"log2": ("fixed-log", -2.0)} if kind == "w" else {}
    rec = make_record(f"linear-{probe}", times, vals, window, predicted=(0.0, B), extra_models=extra)
    if contaminated_after is not None and window[1] > contaminated_after:
        rec.valid = False
        rec.note = f"window ends at {window[1]:g}, after boundary contamination at {contaminated_after:g}"
    return rec


def group_velocity_horizon(grid: Grid, f: np.ndarray, frac: float = 0.15) -> float:
    """Time for the rms-wavenumber part of f to travel from the origin to the absorbing layer."""
    fh = np.abs(sfft.fft2(f)) ** 2
    k_rms = float(np.sqrt(np.sum(grid.k2 * fh) / np.sum(fh)))
    return (1.0 - frac) * grid.L / (2.0 * max(k_rms, 1e-12))
