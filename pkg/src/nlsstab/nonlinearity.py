"""Gauge-invariant local nonlinearities g(u) = u * sum_k c_k |u|^beta_k.

Each term c |s|^beta s has second derivative of size |s|^(beta - 1), so the
growth exponents are alpha_k = beta_k - 1.  Everything below is evaluated in
modulus/phase form, which makes g(e^{i th} u) = e^{i th} g(u) exact in floating
point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class NonlinearitySpec:
    name: str
    terms: tuple[tuple[float, float], ...]  # (coefficient, beta) pairs
    alpha1: float = field(init=False)
    alpha2: float = field(init=False)

    def __post_init__(self):
        if not self.terms:
            a1 = a2 = 1.0  # g == 0: any admissible exponent pair works
        else:
            alphas = [beta - 1.0 for _, beta in self.terms]
            a1, a2 = min(alphas), max(alphas)
        if not a1 > 0.5:
            raise ValueError(f"{self.name}: alpha1 = {a1} violates alpha1 > 1/2")
        object.__setattr__(self, "alpha1", float(a1))
        object.__setattr__(self, "alpha2", float(a2))

    @property
    def is_zero(self) -> bool:
        return not self.terms

    # scalar profile on s >= 0 ---------------------------------------------

    def q(self, s):
        """g(s)/s."""
        s = np.abs(s)
        out = np.zeros_like(s, dtype=float)
        for c, beta in self.terms:
            out = out + c * s**beta
        return out

    def g_scalar(self, s):
        s = np.asarray(s, dtype=float)
        return s * self.q(s)

    def gprime_scalar(self, s):
        a = np.abs(np.asarray(s, dtype=float))
        out = np.zeros_like(a)
        for c, beta in self.terms:
            out = out + c * (1.0 + beta) * a**beta
        return out

    def gsecond_scalar(self, s):
        s = np.asarray(s, dtype=float)
        a = np.abs(s)
        out = np.zeros_like(a)
        for c, beta in self.terms:
            out = out + c * (1.0 + beta) * beta * a ** (beta - 1.0)
        return np.sign(s) * out

    def antiderivative(self, s):
        """G(s) = int_0^s g, for s >= 0."""
        a = np.abs(np.asarray(s, dtype=float))
        out = np.zeros_like(a)
        for c, beta in self.terms:
            out = out + c * a ** (beta + 2.0) / (beta + 2.0)
        return out

    @cached_property
    def c1(self) -> float:
        """Constant in ||D^2 g_b|| <= C1 (|b|^alpha1 + |b|^alpha2), calibrated by sampling."""
        if self.is_zero:
            return 0.0
        mods = np.logspace(-4, 4, 161)
        worst = 0.0
        for m in mods:
            worst = max(worst, d2g_norm(self, m) / (m**self.alpha1 + m**self.alpha2))
        return 1.01 * worst


_ANGLES = np.linspace(0.0, np.pi, 91)


def d2g_bilinear(spec: NonlinearitySpec, b: complex, w, v):
    """D^2 g_b[w][v] for g(z) = z Q(|z|^2)."""
    rho = abs(b) ** 2
    Q1 = Q2 = 0.0
    for c, beta in spec.terms:
        h = 0.5 * beta
        Q1 += c * h * rho ** (h - 1.0) if rho > 0 else 0.0
        Q2 += c * h * (h - 1.0) * rho ** (h - 2.0) if rho > 0 else 0.0
    bw = np.real(np.conj(b) * w)
    bv = np.real(np.conj(b) * v)
    vw = np.real(np.conj(v) * w)
    return 2.0 * Q1 * (v * bw + w * bv + b * vw) + 4.0 * Q2 * b * bw * bv


def d2g_norm(spec: NonlinearitySpec, b: complex) -> float:
    """sup over unit w, v of |D^2 g_b[w][v]|, sampled on an angle grid (gauge reduces b to |b|)."""
    if spec.is_zero or b == 0:
        return 0.0
    w = np.exp(1j * _ANGLES)[:, None]
    v = np.exp(1j * _ANGLES)[None, :]
    return float(np.abs(d2g_bilinear(spec, complex(abs(b)), w, v)).max())


def d2g_bound(spec: NonlinearitySpec, b: complex) -> float:
    m = abs(b)
    if m == 0:
        return 0.0
    return spec.c1 * (m**spec.alpha1 + m**spec.alpha2)


# field operations -----------------------------------------------------------

def eval_g(spec: NonlinearitySpec, f: np.ndarray) -> np.ndarray:
    f = np.asarray(f)
    if spec.is_zero:
        return np.zeros_like(f)
    return spec.q(np.abs(f)) * f


def eval_dg(spec: NonlinearitySpec, base: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gateaux derivative of g at ``base`` in direction ``w`` (real-linear in w).

    For real base this is g'(base) Re w + i g(base)/base Im w; complex bases
    follow by gauge rotation.
    """
    base = np.asarray(base)
    w = np.asarray(w)
    if spec.is_zero:
        return np.zeros(np.broadcast(base, w).shape, dtype=np.result_type(base, w))
    a = np.abs(base)
    out = spec.q(a) * w
    if np.isrealobj(base) and np.isrealobj(w):
        # w and base real: the whole derivative is g'(base) w
        return spec.gprime_scalar(a) * w
    # (g' - q)(a) Re(w e^{-i th}) e^{i th} with e^{i th} = base/|base|
    corr = np.zeros_like(a)
    for c, beta in spec.terms:
        corr = corr + c * beta * a**beta
    with np.errstate(invalid="ignore", divide="ignore"):
        phase = np.where(a > 0, base / np.where(a > 0, a, 1.0), 0.0)
    return out + corr * np.real(w * np.conj(phase)) * phase


def eval_g2(spec: NonlinearitySpec, base: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Quadratic remainder g(base + z) - g(base) - Dg_base[z]."""
    return eval_g(spec, base + z) - eval_g(spec, base) - eval_dg(spec, base, z)


# built-ins ---------------------------------------------------------------------

def power(alpha: float, coeff: float = 1.0) -> NonlinearitySpec:
    """g(s) = coeff |s|^(1 + alpha) s."""
    return NonlinearitySpec(f"power-{alpha:g}", ((float(coeff), 1.0 + float(alpha)),))


def cubic(coeff: float = 1.0) -> NonlinearitySpec:
    return NonlinearitySpec("cubic", ((float(coeff), 2.0),))


def zero() -> NonlinearitySpec:
    return NonlinearitySpec("zero", ())


def mixed() -> NonlinearitySpec:
    """s^3 + 0.1 |s|^1.6 s: alpha1 = 0.6, alpha2 = 1."""
    return NonlinearitySpec("mixed", ((1.0, 2.0), (0.1, 1.6)))


BUILTINS = {
    "zero": zero,
    "cubic": cubic,
    "supercritical": lambda coeff=1.0: power(1.4, coeff),
    "subcritical": lambda coeff=1.0: power(0.6, coeff),
    "mixed": mixed,
}


def from_name(name: str, alpha: float | None = None, coeff: float = 1.0) -> NonlinearitySpec:
    if name == "power":
        if alpha is None:
            raise ValueError("the 'power' nonlinearity needs an alpha parameter")
        return power(alpha, coeff)
    if name not in BUILTINS:
        raise ValueError(f"unknown nonlinearity {name!r}; choose from {sorted(BUILTINS) + ['power']}")
    if name in ("zero", "mixed"):
        return BUILTINS[name]()
    return BUILTINS[name](coeff)
