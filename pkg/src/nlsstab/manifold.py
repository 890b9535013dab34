"""Small nonlinear bound states psi_E = a psi0 + h(a) bifurcating from the ground state.

Real a is solved for directly.  Complex a follows from the gauge symmetry,
psi_E(e^{i th} r) = e^{i th} psi_E(r), so a branch is a list of real solutions
together with their first and second a-derivatives; those come from the same
bordered linear operator that drives the Newton iteration, and feed a quintic
Hermite interpolant between branch nodes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.sparse.linalg import LinearOperator, gmres

from .grid import Grid, load_field, save_field
from .hamiltonian import ConvergenceError, Hamiltonian
from .nonlinearity import NonlinearitySpec, eval_g

log = logging.getLogger(__name__)

DUAL_PAIRING_MIN = 0.5


class ManifoldError(ValueError):
    pass


@dataclass(eq=False)
class BoundState:
    a: complex
    E: float
    psiE: np.ndarray
    h: np.ndarray
    dpsi_da1: np.ndarray
    dpsi_da2: np.ndarray
    Psi1: np.ndarray
    Psi2: np.ndarray
    residual: float
    dE: float = 0.0            # dE/d|a|
    pairing: float = 1.0       # Re<-i d2 psi, d1 psi>, the dual normalizer
    newton_iters: int = 0
    d2psi: np.ndarray | None = None  # second a-derivative, real branch points only
    d2E: float = 0.0


# bordered operator ----------------------------------------------------------------
#
# Unknowns (v, e) with v a real field; B[v, e] = ((H - E + g'(psi)) v - e psi, <psi0, v>).

class _Bordered:
    def __init__(self, H: Hamiltonian, spec: NonlinearitySpec, psi: np.ndarray, E: float):
        self.grid = H.grid
        self.H = H
        self.psi = psi
        self.E = E
        self.gp = spec.gprime_scalar(psi) if not spec.is_zero else np.zeros(H.grid.shape)
        self.diag = H.V - E + self.gp
        self.n2 = H.grid.n ** 2
        self.prec_sym = 1.0 / (H.grid.k2 + max(-E, 0.05))
        self.psi0 = H.psi0
        self.a = H.grid.inner_real(H.psi0, psi)

    def apply(self, x):
        g = self.grid
        v = x[:-1].reshape(g.shape)
        e = x[-1]
        top = sfft.ifft2(g.k2 * sfft.fft2(v)).real + self.diag * v - e * self.psi
        return np.concatenate([top.ravel(), [np.sum(self.psi0 * v) * g.cell]])

    def precondition(self, r):
        g = self.grid
        rf = r[:-1].reshape(g.shape)
        cell = g.cell
        e = -np.sum(self.psi0 * rf) * cell / self.a if self.a else 0.0
        w = rf + e * self.psi
        w = w - self.psi0 * (np.sum(self.psi0 * w) * cell)
        v = sfft.ifft2(self.prec_sym * sfft.fft2(w)).real
        v = v - self.psi0 * (np.sum(self.psi0 * v) * cell) + r[-1] * self.psi0
        return np.concatenate([v.ravel(), [e]])

    def solve(self, rhs_field, rhs_scalar, rtol):
        b = np.concatenate([np.asarray(rhs_field, float).ravel(), [rhs_scalar]])
        N = self.n2 + 1
        A = LinearOperator((N, N), matvec=self.apply, dtype=float)
        M = LinearOperator((N, N), matvec=self.precondition, dtype=float)
        x, info = gmres(A, b, M=M, rtol=rtol, atol=0.0, restart=80, maxiter=20)
        if info != 0:
            res = np.linalg.norm(self.apply(x) - b) / max(np.linalg.norm(b), 1e-300)
            if res > 100 * rtol:
                raise ConvergenceError(f"bordered GMRES stalled at relative residual {res:.2e}", res)
        return x[:-1].reshape(self.grid.shape), float(x[-1])


def _eq_residual(H: Hamiltonian, spec: NonlinearitySpec, a: float, h: np.ndarray, E: float, res0: np.ndarray):
    """(H - E) psi + g(psi) with psi = a psi0 + h, arranged to avoid cancelling the a psi0 part."""
    psi = a * H.psi0 + h
    return H.apply(h) - E * h + a * (H.e0 - E) * H.psi0 + a * res0 + eval_g(spec, psi)


def eigen_defect(H: Hamiltonian, spec: NonlinearitySpec, psi: np.ndarray, E: float) -> float:
    """|| (-Delta + V) psi + g(psi) - E psi ||_{L^2}."""
    return H.grid.norm_l2(H.apply(psi) + eval_g(spec, psi) - E * psi)


def solve_bound_state(H: Hamiltonian, spec: NonlinearitySpec, a_real: float,
                      warm_start: BoundState | None = None, tol: float = 1e-10,
                      maxit: int = 30) -> BoundState:
    """Newton-Krylov on ((H - E) psi + g(psi), <psi0, psi> - a) = 0 for real a > 0."""
    grid = H.grid
    a = float(a_real)
    if not a > 0:
        raise ManifoldError(f"a must be positive, got {a}")
    psi0 = H.psi0
    res0 = H.apply(psi0) - H.e0 * psi0
    if spec.is_zero:
        return _finish(H, spec, a, np.zeros(grid.shape), H.e0, 0)

    if warm_start is not None and abs(warm_start.a) > 0:
        s = a / abs(warm_start.a)
        h = np.real(warm_start.h) * s ** (2.0 + spec.alpha1)
        E = H.e0 + (warm_start.E - H.e0) * s ** (1.0 + spec.alpha1)
    else:
        h = np.zeros(grid.shape)
        E = H.e0 + grid.inner_real(psi0, eval_g(spec, a * psi0)) / a

    scale = a * grid.norm_sobolev(psi0, 2)
    it = 0
    for it in range(1, maxit + 1):
        F = _eq_residual(H, spec, a, h, E, res0)
        nF = grid.norm_l2(F)
        gnorm = grid.norm_l2(eval_g(spec, a * psi0 + h))
        tol_eff = max(min(tol, 1e-9 * gnorm), 1e-14 * scale)
        if not np.isfinite(nF):
            raise ConvergenceError(f"Newton diverged at a = {a:g}", nF)
        if nF <= tol_eff:
            break
        B = _Bordered(H, spec, a * psi0 + h, E)
        rtol = float(np.clip(0.1 * tol_eff / nF, 1e-12, 1e-2))
        dh, dE = B.solve(-F, 0.0, rtol)
        dh = dh - psi0 * grid.inner_real(psi0, dh)
        h = h + dh
        E = E + dE
    else:
        raise ConvergenceError(f"Newton did not converge at a = {a:g}: residual {nF:.2e} > {tol_eff:.1e}", nF)
    return _finish(H, spec, a, h, E, it)


def _finish(H, spec, a, h, E, iters) -> BoundState:
    grid = H.grid
    psi0 = H.psi0
    psi = a * psi0 + h
    if grid.norm_l2(h) > grid.norm_l2(a * psi0):
        raise ManifoldError(f"off-manifold solution at a = {a:g}: ||h|| exceeds ||a psi0||")
    d1, dE, dd, d2E = real_tangents(H, spec, psi, E)
    d2 = 1j * psi / a
    pairing = grid.inner_real(psi / a, d1)
    if abs(pairing) < DUAL_PAIRING_MIN:
        raise ManifoldError(f"dual pairing {pairing:.3f} < {DUAL_PAIRING_MIN} at a = {a:g}; shrink a_max")
    Psi1 = (psi / a) / pairing + 0j
    Psi2 = 1j * d1 / pairing
    return BoundState(complex(a), float(E), psi + 0j, h + 0j, d1 + 0j, d2, Psi1, Psi2,
                      eigen_defect(H, spec, psi, E), dE, pairing, iters, dd, d2E)


def real_tangents(H: Hamiltonian, spec: NonlinearitySpec, psi: np.ndarray, E: float, rtol: float = 1e-12):
    """(psi', E', psi'', E'') along the real branch, from the differentiated eigen-equation.

    psi' = psi0 + w with w orthogonal to psi0, so the dominant a psi0 part never
    goes through the solver.
    """
    grid = H.grid
    psi0 = H.psi0
    if spec.is_zero:
        return psi0.copy(), 0.0, np.zeros(grid.shape), 0.0
    B = _Bordered(H, spec, psi, E)
    res0 = H.apply(psi0) - H.e0 * psi0
    lin_psi0 = (H.e0 - E) * psi0 + res0 + B.gp * psi0
    w, dE = B.solve(-lin_psi0, 0.0, rtol)
    d1 = psi0 + w - psi0 * grid.inner_real(psi0, w)
    rhs = 2.0 * dE * d1 - spec.gsecond_scalar(psi) * d1 * d1
    d2, d2E = B.solve(rhs, 0.0, rtol)
    d2 = d2 - psi0 * grid.inner_real(psi0, d2)
    return d1, dE, d2, d2E


# branch ------------------------------------------------------------------------------

def _hermite5(t):
    t2 = t * t
    t3 = t2 * t
    t4 = t3 * t
    t5 = t4 * t
    return (1 - 10 * t3 + 15 * t4 - 6 * t5,
            t - 6 * t3 + 8 * t4 - 3 * t5,
            0.5 * (t2 - 3 * t3 + 3 * t4 - t5),
            0.5 * (t3 - 2 * t4 + t5),
            -4 * t3 + 7 * t4 - 3 * t5,
            10 * t3 - 15 * t4 + 6 * t5)


def _hermite5_dt(t):
    t2 = t * t
    t3 = t2 * t
    t4 = t3 * t
    return (-30 * t2 + 60 * t3 - 30 * t4,
            1 - 18 * t2 + 32 * t3 - 15 * t4,
            0.5 * (2 * t - 9 * t2 + 12 * t3 - 5 * t4),
            0.5 * (3 * t2 - 8 * t3 + 5 * t4),
            -12 * t2 + 28 * t3 - 15 * t4,
            30 * t2 - 60 * t3 + 30 * t4)


@dataclass(eq=False)
class ManifoldBranch:
    """Real-a branch nodes with first/second derivatives, quintic Hermite in between."""

    H: Hamiltonian
    spec: NonlinearitySpec
    a: np.ndarray
    E: np.ndarray
    dE: np.ndarray
    d2E: np.ndarray
    psi: list
    dpsi: list
    d2psi: list
    residuals: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.H.grid

    @property
    def alpha1(self) -> float:
        return self.spec.alpha1

    @property
    def a_min(self) -> float:
        return float(self.a[0])

    @property
    def a_max(self) -> float:
        return float(self.a[-1])

    def _check(self, r: float):
        if r > self.a_max * (1 + 1e-12) or r < 0:
            raise ManifoldError(f"|a| = {r:g} outside the branch range [0, {self.a_max:g}]")

    def _locate(self, r):
        i = int(np.clip(np.searchsorted(self.a, r) - 1, 0, len(self.a) - 2))
        d = self.a[i + 1] - self.a[i]
        return i, d, (r - self.a[i]) / d

    def energy(self, r: float) -> float:
        """E(|a|)."""
        return self.energy_and_slope(r)[0]

    def energy_and_slope(self, r: float):
        r = abs(r)
        self._check(r)
        E0 = self.H.e0
        if r < self.a[0]:
            p = 1.0 + self.alpha1
            s = r / self.a[0]
            return E0 + (self.E[0] - E0) * s**p, (self.E[0] - E0) * p * s ** (p - 1) / self.a[0]
        if len(self.a) == 1:
            return float(self.E[0]), float(self.dE[0])
        i, d, t = self._locate(r)
        c = _hermite5(t)
        cd = _hermite5_dt(t)
        vals = (self.E[i], d * self.dE[i], d * d * self.d2E[i], d * d * self.d2E[i + 1], d * self.dE[i + 1], self.E[i + 1])
        return float(sum(ci * v for ci, v in zip(c, vals))), float(sum(ci * v for ci, v in zip(cd, vals)) / d)

    def real_profile(self, r: float, derivative: bool = True):
        """(phi(r), phi'(r)) for the real branch, phi(0) = 0, phi'(0) = psi0."""
        r = abs(float(r))
        cached = self.__dict__.get("_last_profile")
        if cached is not None and cached[0] == r and (cached[2] is not None or not derivative):
            return cached[1], cached[2]
        out = self._real_profile(r, derivative)
        self.__dict__["_last_profile"] = (r, out[0], out[1])
        return out

    def _real_profile(self, r: float, derivative: bool):
        self._check(r)
        psi0 = self.H.psi0
        if r < self.a[0]:
            q = 2.0 + self.alpha1
            s = r / self.a[0]
            h0 = self.psi[0] - self.a[0] * psi0
            phi = r * psi0 + s**q * h0
            dphi = psi0 + (q * s ** (q - 1) / self.a[0]) * h0 if derivative else None
            return phi, dphi
        if len(self.a) == 1:
            return self.psi[0], self.dpsi[0]
        i, d, t = self._locate(r)
        fields = (self.psi[i], self.dpsi[i], self.d2psi[i], self.d2psi[i + 1], self.dpsi[i + 1], self.psi[i + 1])
        scale = (1.0, d, d * d, d * d, d, 1.0)
        c = _hermite5(t)
        phi = sum((ci * si) * f for ci, si, f in zip(c, scale, fields))
        dphi = None
        if derivative:
            cd = _hermite5_dt(t)
            dphi = sum((ci * si / d) * f for ci, si, f in zip(cd, scale, fields))
        return phi, dphi

    def psi_at(self, a: complex) -> np.ndarray:
        r = abs(a)
        if r == 0:
            return self.grid.zeros()
        phi, _ = self.real_profile(r, derivative=False)
        return (a / r) * phi

    def frame(self, a: complex):
        """(psiE, d1, d2, Psi1, Psi2, pairing) at complex a."""
        r = abs(a)
        psi0 = self.H.psi0
        if r == 0:
            z = self.grid.zeros()
            return z, psi0 + 0j, 1j * psi0, psi0 + 0j, 1j * psi0, 1.0
        phi, dphi = self.real_profile(r)
        u = a / r
        c, s = u.real, u.imag
        phi_r = phi / r
        pairing = self.grid.inner_real(phi_r, dphi)
        if abs(pairing) < DUAL_PAIRING_MIN:
            raise ManifoldError(f"dual pairing {pairing:.3f} below {DUAL_PAIRING_MIN} at |a| = {r:g}")
        d1 = u * (c * dphi - 1j * s * phi_r)
        d2 = u * (s * dphi + 1j * c * phi_r)
        Psi1 = u * (c * phi_r - 1j * s * dphi) / pairing
        Psi2 = u * (s * phi_r + 1j * c * dphi) / pairing
        return u * phi, d1, d2, Psi1, Psi2, pairing

    def duals_at(self, a: complex):
        _, _, _, P1, P2, _ = self.frame(a)
        return P1, P2


def complex_bound_state(branch: ManifoldBranch, a: complex, with_residual: bool = True) -> BoundState:
    a = complex(a)
    psiE, d1, d2, P1, P2, pairing = branch.frame(a)
    E, dE = branch.energy_and_slope(abs(a))
    h = psiE - a * branch.H.psi0
    res = eigen_defect(branch.H, branch.spec, psiE, E) if with_residual else np.nan
    return BoundState(a, E, psiE, h, d1, d2, P1, P2, res, dE, pairing)


def manifold_tangents(branch: ManifoldBranch, a: complex):
    """(d psi_E/d a1, d psi_E/d a2) at complex a."""
    _, d1, d2, _, _, _ = branch.frame(complex(a))
    return d1, d2


def dual_basis(branch: ManifoldBranch, a: complex):
    return branch.duals_at(complex(a))


def apply_Ra(bs: BoundState, zeta: np.ndarray, grid: Grid, psi0: np.ndarray) -> np.ndarray:
    """Inverse of P_c restricted to H_a: eta = zeta + (b1 + i b2) psi0 with Re<Psi_j, eta> = 0."""
    zeta = grid.check(zeta)
    c = grid.inner(psi0, zeta)
    if abs(c) > 1e-8 * max(1.0, grid.norm_l2(zeta)):
        raise ManifoldError(f"zeta is not in the continuous subspace: <psi0, zeta> = {abs(c):.2e}")
    A = np.array([[grid.inner_real(P, psi0 + 0j), grid.inner_real(P, 1j * psi0)] for P in (bs.Psi1, bs.Psi2)])
    rhs = -np.array([grid.inner_real(bs.Psi1, zeta), grid.inner_real(bs.Psi2, zeta)])
    if abs(np.linalg.det(A)) < 1e-8:
        raise ManifoldError("R_a system is singular: a is outside the region where H_a complements the tangent plane")
    b = np.linalg.solve(A, rhs)
    return zeta + (b[0] + 1j * b[1]) * psi0


def verify_decay(bs: BoundState, sigma: float, grid: Grid) -> float:
    """||<x>^sigma psi_E||_{H^2} / ||psi_E||_{H^2}."""
    if sigma == 0:
        return 1.0
    return grid.norm_sobolev(grid.japanese(sigma) * bs.psiE, 2) / grid.norm_sobolev(bs.psiE, 2)


def build_branch(H: Hamiltonian, spec: NonlinearitySpec, a_max: float, a_min: float = 1e-4,
                 ratio: float = 1.2, tol: float = 1e-10, strict: bool = False) -> ManifoldBranch:
    """March a geometrically from a_min to a_max with warm starts.

    The branch stops at the last node that passes every check (Newton
    convergence, ||h|| <= ||a psi0||, dual pairing >= 1/2); the reached end is
    recorded in ``meta`` and is an error only with ``strict``.
    """
    if not (0 < a_min <= a_max) or ratio <= 1:
        raise ManifoldError(f"need 0 < a_min <= a_max and ratio > 1 (got {a_min}, {a_max}, {ratio})")
    n = int(np.ceil(np.log(a_max / a_min) / np.log(ratio) - 1e-9))
    avals = list(a_min * ratio ** np.arange(n)) + [a_max]
    avals = sorted(set(float(v) for v in avals if v <= a_max))
    nodes, stop_reason = [], None
    prev = None
    for av in avals:
        try:
            bs = solve_bound_state(H, spec, av, warm_start=prev, tol=tol)
        except (ConvergenceError, ManifoldError) as exc:
            stop_reason = f"a = {av:g}: {exc}"
            log.warning("branch stopped early, %s", stop_reason)
            break
        nodes.append((av, bs.E, bs.dE, bs.d2E, bs.psiE.real.copy(), bs.dpsi_da1.real.copy(), bs.d2psi, bs.residual))
        prev = bs
    if not nodes:
        raise ManifoldError(f"no branch point could be computed ({stop_reason})")
    if stop_reason and strict:
        raise ManifoldError(f"branch did not reach a_max = {a_max:g}: {stop_reason}")
    cols = list(zip(*nodes))
    meta = {"a_max_requested": float(a_max), "a_max_reached": float(cols[0][-1]), "ratio": float(ratio),
            "stop_reason": stop_reason, "spec": spec.name, "alpha1": spec.alpha1, "alpha2": spec.alpha2}
    return ManifoldBranch(H, spec, np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                          list(cols[4]), list(cols[5]), list(cols[6]), np.array(cols[7]), meta)


# persistence ---------------------------------------------------------------------------
#
# A branch directory holds manifest.json plus three snapshot files per node
# (psi, dpsi, d2psi), named node-XXX-{psi,dpsi,d2psi}.bin.

def save_branch(branch: ManifoldBranch, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i in range(len(branch.a)):
        for tag, f in (("psi", branch.psi[i]), ("dpsi", branch.dpsi[i]), ("d2psi", branch.d2psi[i])):
            save_field(path / f"node-{i:03d}-{tag}.bin", branch.grid, f)
    manifest = {"a": branch.a.tolist(), "E": branch.E.tolist(), "dE": branch.dE.tolist(),
                "d2E": branch.d2E.tolist(), "residuals": branch.residuals.tolist(),
                "n": branch.grid.n, "L": branch.grid.L, "e0": branch.H.e0, "meta": branch.meta}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_branch(path: str | Path, H: Hamiltonian, spec: NonlinearitySpec) -> ManifoldBranch:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    if m["n"] != H.grid.n or m["L"] != H.grid.L:
        raise ManifoldError(f"stored branch lives on a {m['n']}^2, L={m['L']} grid, not {H.grid.n}^2, L={H.grid.L}")
    if m["meta"].get("spec") != spec.name:
        raise ManifoldError(f"stored branch was built for {m['meta'].get('spec')!r}, not {spec.name!r}")
    fields = {tag: [] for tag in ("psi", "dpsi", "d2psi")}
    for i in range(len(m["a"])):
        for tag in fields:
            _, f = load_field(path / f"node-{i:03d}-{tag}.bin")
            fields[tag].append(f.real.copy())
    return ManifoldBranch(H, spec, np.array(m["a"]), np.array(m["E"]), np.array(m["dE"]), np.array(m["d2E"]),
                          fields["psi"], fields["dpsi"], fields["d2psi"], np.array(m["residuals"]), m["meta"])
