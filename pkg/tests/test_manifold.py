import numpy as np
import pytest

from nlsstab import nonlinearity as nl
from nlsstab.manifold import (ManifoldError, apply_Ra, build_branch, complex_bound_state, dual_basis,
                              eigen_defect, load_branch, manifold_tangents, save_branch, solve_bound_state,
                              verify_decay)

from conftest import packet


def slope(x, y):
    return np.polyfit(np.log(x), np.log(y), 1)[0]


def test_every_node_solves_the_eigen_equation(cubic_branch, sub_branch):
    for br in (cubic_branch, sub_branch):
        assert br.residuals.max() <= 1e-9
        assert br.meta["a_max_reached"] == br.meta["a_max_requested"]


@pytest.mark.parametrize("which,alpha", [("cubic_branch", 1.0), ("sub_branch", 0.6)])
def test_small_amplitude_scaling(request, which, alpha):
    br = request.getfixturevalue(which)
    H = br.H
    sel = (br.a >= 1e-3) & (br.a <= 1e-1)
    hn = [br.grid.norm_l2(br.psi[i] - br.a[i] * H.psi0) for i in np.flatnonzero(sel)]
    assert slope(br.a[sel], hn) == pytest.approx(2 + alpha, abs=0.05)
    assert slope(br.a[sel], np.abs(br.E[sel] - H.e0)) == pytest.approx(1 + alpha, abs=0.05)


def test_leading_energy_shift(small_H):
    # E(a) - E0 = a^beta <psi0, |psi0|^beta psi0> + o(a^beta) for g = |u|^beta u
    g = small_H.grid
    for spec in (nl.cubic(), nl.power(0.6)):
        beta = spec.terms[0][1]
        a = 1e-3
        bs = solve_bound_state(small_H, spec, a)
        lead = a**beta * np.sum(small_H.psi0 ** (2 + beta)) * g.cell
        assert (bs.E - small_H.e0) / lead == pytest.approx(1.0, abs=5e-3)


def test_interpolation_between_nodes(cubic_branch, small_H):
    a = float(np.sqrt(cubic_branch.a[-3] * cubic_branch.a[-2]))
    direct = solve_bound_state(small_H, nl.cubic(), a)
    g = small_H.grid
    psi = cubic_branch.psi_at(a)
    assert g.norm_l2(psi - direct.psiE) <= 1e-7 * g.norm_l2(direct.psiE)
    assert cubic_branch.energy(a) == pytest.approx(direct.E, abs=1e-10)
    bs = complex_bound_state(cubic_branch, a)
    assert bs.residual < 1e-7


def test_extension_below_a_min_is_continuous(cubic_branch):
    a0 = cubic_branch.a[0]
    g = cubic_branch.grid
    lo, hi = cubic_branch.psi_at(a0 * (1 - 1e-9)), cubic_branch.psi_at(a0)
    assert g.norm_l2(lo - hi) < 1e-12
    assert cubic_branch.energy(a0 * (1 - 1e-9)) == pytest.approx(cubic_branch.energy(a0), abs=1e-14)
    assert np.all(cubic_branch.psi_at(0) == 0)


def test_tangents_match_finite_differences(cubic_branch):
    g = cubic_branch.grid
    a = 0.07 * np.exp(0.4j)
    d1, d2 = manifold_tangents(cubic_branch, a)
    h = 1e-6
    for d, e in ((d1, 1.0), (d2, 1j)):
        fd = (cubic_branch.psi_at(a + h * e) - cubic_branch.psi_at(a - h * e)) / (2 * h)
        assert g.norm_l2(fd - d) < 1e-7 * g.norm_l2(d)


def test_duals_are_biorthogonal(sub_branch):
    g = sub_branch.grid
    for a in (2e-5, 3e-3 * np.exp(1j), 0.15j):
        d1, d2 = manifold_tangents(sub_branch, a)
        P1, P2 = dual_basis(sub_branch, a)
        G = np.array([[g.inner_real(P, d) for d in (d1, d2)] for P in (P1, P2)])
        assert np.allclose(G, np.eye(2), atol=1e-12)


def test_gauge_equivariance(cubic_branch):
    g = cubic_branch.grid
    a = 0.12
    for th in (0.3, 2.0, -1.1):
        u = np.exp(1j * th)
        assert g.norm_l2(cubic_branch.psi_at(u * a) - u * cubic_branch.psi_at(a)) < 1e-14
        assert cubic_branch.energy(abs(u * a)) == cubic_branch.energy(a)


def test_out_of_range_is_rejected(cubic_branch, small_H):
    with pytest.raises(ManifoldError):
        cubic_branch.psi_at(1.0)
    with pytest.raises(ManifoldError):
        solve_bound_state(small_H, nl.cubic(), -0.1)
    with pytest.raises(ManifoldError):
        build_branch(small_H, nl.cubic(), a_max=1e-5, a_min=1e-4)


def test_zero_nonlinearity_gives_the_linear_eigenvector(small_H):
    bs = solve_bound_state(small_H, nl.zero(), 0.2)
    assert np.all(bs.h == 0)
    assert bs.E == small_H.e0
    assert eigen_defect(small_H, nl.zero(), bs.psiE, bs.E) < 1e-10


def test_Ra_lands_in_the_complement(cubic_branch, small_H):
    g = small_H.grid
    a = 0.1 * np.exp(0.8j)
    bs = complex_bound_state(cubic_branch, a)
    zeta = small_H.project_continuous(packet(g))
    eta = apply_Ra(bs, zeta, g, small_H.psi0)
    assert abs(g.inner_real(bs.Psi1, eta)) < 1e-13
    assert abs(g.inner_real(bs.Psi2, eta)) < 1e-13
    assert g.norm_l2(small_H.project_continuous(eta) - zeta) < 1e-13
    with pytest.raises(ManifoldError):
        apply_Ra(bs, packet(g), g, small_H.psi0)


def test_bound_states_are_localized(cubic_branch):
    bs = complex_bound_state(cubic_branch, 0.2)
    r = verify_decay(bs, 2.0, cubic_branch.grid)
    assert np.isfinite(r) and r > 1
    assert verify_decay(bs, 0, cubic_branch.grid) == 1.0


def test_branch_roundtrip(tmp_path, cubic_branch, small_H):
    save_branch(cubic_branch, tmp_path / "br")
    br = load_branch(tmp_path / "br", small_H, nl.cubic())
    assert np.array_equal(br.a, cubic_branch.a)
    a = 0.0345
    assert np.array_equal(br.psi_at(a), cubic_branch.psi_at(a))
    with pytest.raises(ManifoldError):
        load_branch(tmp_path / "br", small_H, nl.power(0.6))
