"""Split a small field phi = psi_E(a) + eta with eta in H_a (Re<Psi_j(a), eta> = 0)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .manifold import ManifoldBranch, ManifoldError


class DecompositionError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass(eq=False)
class Decomposition:
    a: complex
    eta: np.ndarray
    m: np.ndarray
    m_norm: float
    newton_iters: int
    constraint_residual: float
    flagged: bool = False  # ||M|| > 1/2 at the solution


def _fd_step(r: float, a_min: float) -> float:
    return 1e-5 * max(r, 10 * a_min)


def m_matrix(branch: ManifoldBranch, a: complex, phi: np.ndarray, psiE: np.ndarray | None = None):
    """M_ij = Re<d Psi_i / d a_j, phi - psi_E(a)> by central differences of the dual fields."""
    grid = branch.grid
    if psiE is None:
        psiE = branch.psi_at(a)
    diff = phi - psiE
    d = _fd_step(abs(a), branch.a_min)
    M = np.zeros((2, 2))
    for j, e in enumerate((1.0, 1j)):
        try:
            Pp = branch.duals_at(a + d * e)
            Pm = branch.duals_at(a - d * e)
        except ManifoldError:
            # near the end of the branch: one-sided difference toward the inside
            P0 = branch.duals_at(a)
            Pm = branch.duals_at(a - d * e)
            Pp = P0
            for i in range(2):
                M[i, j] = grid.inner_real(Pp[i] - Pm[i], diff) / d
            continue
        for i in range(2):
            M[i, j] = grid.inner_real(Pp[i] - Pm[i], diff) / (2 * d)
    return M, float(np.linalg.norm(M, 2))


def _F(branch, a, phi):
    grid = branch.grid
    psiE, _, _, P1, P2, _ = branch.frame(a)
    diff = psiE - phi
    return np.array([grid.inner_real(P1, diff), grid.inner_real(P2, diff)]), psiE


def decompose(branch: ManifoldBranch, phi: np.ndarray, a_guess: complex | None = None,
              norm_ceiling: float | None = None, tol: float = 1e-12, maxit: int = 30) -> Decomposition:
    """Newton on F(a) = [Re<Psi_1, psi_E - phi>, Re<Psi_2, psi_E - phi>] with Jacobian I - M."""
    grid = branch.grid
    phi = grid.check(np.asarray(phi, dtype=complex))
    nphi = grid.norm_l2(phi)
    ceiling = 0.5 * branch.a_max if norm_ceiling is None else norm_ceiling
    if nphi > ceiling:
        raise DecompositionError(f"||phi|| = {nphi:.3g} exceeds the decomposition ceiling {ceiling:.3g}")
    a = grid.inner(branch.H.psi0, phi) if a_guess is None else complex(a_guess)
    trace = []
    F, psiE = _F(branch, a, phi)
    # tolerance relative to the field size, with the absolute target for O(1) fields
    ftol = tol * max(nphi, 1e-300) if nphi < 1 else tol
    for it in range(maxit + 1):
        nF = float(np.max(np.abs(F)))
        trace.append(nF)
        if nF <= ftol:
            break
        if it == maxit:
            raise DecompositionError(f"Newton stagnated at |F| = {nF:.2e}", trace)
        M, _ = m_matrix(branch, a, phi, psiE)
        step = np.linalg.solve(np.eye(2) - M, F)
        lam = 1.0
        while True:
            a_new = a - lam * complex(step[0], step[1])
            if abs(a_new) > branch.a_max:
                lam *= 0.5
                if lam < 1e-4:
                    raise DecompositionError("Newton left the branch range", trace)
                continue
            F_new, psi_new = _F(branch, a_new, phi)
            if np.max(np.abs(F_new)) < nF or lam < 1e-3:
                break
            lam *= 0.5
        a, F, psiE = a_new, F_new, psi_new
    eta = phi - psiE
    M, mn = m_matrix(branch, a, phi, psiE)
    _, _, _, P1, P2, _ = branch.frame(a)
    cres = max(abs(grid.inner_real(P1, eta)), abs(grid.inner_real(P2, eta)))
    return Decomposition(a, eta, M, mn, it, cres, flagged=mn > 0.5)


def recompose(branch: ManifoldBranch, a: complex, eta: np.ndarray) -> np.ndarray:
    return branch.psi_at(complex(a)) + eta
