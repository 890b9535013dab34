"""Periodic 2D grid, spectral derivatives and the norms used throughout the package.

Fields are plain complex (or real) ``numpy`` arrays of shape ``(n, n)``; the
``Grid`` they live on is passed alongside.  Axis 0 is ``x``, axis 1 is ``y``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft


class FieldError(ValueError):
    pass


def _check_finite(f: np.ndarray, what: str = "field") -> None:
    if not np.all(np.isfinite(f)):
        raise FieldError(f"{what} contains non-finite samples")


@dataclass(frozen=True)
class Grid:
    """Square periodic domain [-L, L)^2 sampled with n points per axis."""

    n: int
    L: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise ValueError(f"n must be an even integer >= 8, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def cell(self) -> float:
        return self.dx * self.dx

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    @cached_property
    def x(self) -> np.ndarray:
        return -self.L + self.dx * np.arange(self.n)

    @cached_property
    def k(self) -> np.ndarray:
        # standard FFT layout; the Nyquist frequency appears once, with negative sign
        return 2.0 * np.pi * sfft.fftfreq(self.n, d=self.dx)

    @cached_property
    def X(self) -> np.ndarray:
        return np.broadcast_to(self.x[:, None], self.shape)

    @cached_property
    def Y(self) -> np.ndarray:
        return np.broadcast_to(self.x[None, :], self.shape)

    @cached_property
    def r2(self) -> np.ndarray:
        return self.x[:, None] ** 2 + self.x[None, :] ** 2

    @cached_property
    def k2(self) -> np.ndarray:
        return self.k[:, None] ** 2 + self.k[None, :] ** 2

    def japanese(self, power: float = 1.0) -> np.ndarray:
        """<x>^power with <x> = (1 + |x|^2)^(1/2), raw (untranslated) coordinates."""
        return (1.0 + self.r2) ** (0.5 * power)

    def zeros(self, dtype=complex) -> np.ndarray:
        return np.zeros(self.shape, dtype=dtype)

    def check(self, f: np.ndarray, what: str = "field") -> np.ndarray:
        f = np.asarray(f)
        if f.shape != self.shape:
            raise FieldError(f"{what} has shape {f.shape}, grid expects {self.shape}")
        _check_finite(f, what)
        return f

    # spectral operators -------------------------------------------------

    def fft(self, f: np.ndarray) -> np.ndarray:
        return sfft.fft2(f)

    def ifft(self, fh: np.ndarray) -> np.ndarray:
        return sfft.ifft2(fh)

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        f = self.check(f)
        out = sfft.ifft2(-self.k2 * sfft.fft2(f))
        return out.real if np.isrealobj(f) else out

    def gradient_sq(self, f: np.ndarray) -> np.ndarray:
        """|grad f|^2 pointwise, spectral."""
        fh = sfft.fft2(f)
        fx = sfft.ifft2(1j * self.k[:, None] * fh)
        fy = sfft.ifft2(1j * self.k[None, :] * fh)
        return np.abs(fx) ** 2 + np.abs(fy) ** 2

    # norms and pairings -------------------------------------------------

    def norm_lp(self, f: np.ndarray, p: float) -> float:
        if not p >= 1:
            raise ValueError(f"L^p norm needs p >= 1, got {p}")
        a = np.abs(self.check(f))
        if np.isinf(p):
            return float(a.max())
        if p == 2:
            return float(np.sqrt(np.sum(a * a) * self.cell))
        m = a.max()
        if m == 0.0:
            return 0.0
        # scale first so that large p does not underflow
        return float(m * (np.sum((a / m) ** p) * self.cell) ** (1.0 / p))

    def norm_l2(self, f: np.ndarray) -> float:
        return self.norm_lp(f, 2)

    def norm_weighted_l2(self, f: np.ndarray, sigma: float) -> float:
        f = self.check(f)
        if sigma == 0:
            return self.norm_lp(f, 2)
        return self.norm_lp(self.japanese(sigma) * f, 2)

    def norm_sobolev(self, f: np.ndarray, s: int) -> float:
        if s not in (0, 1, 2):
            raise ValueError(f"Sobolev index must be 0, 1 or 2, got {s}")
        f = self.check(f)
        if s == 0:
            return self.norm_lp(f, 2)
        fh = sfft.fft2(f)
        w = (1.0 + self.k2) ** s
        # discrete Parseval: sum |f|^2 dx^2 = sum |fh|^2 dx^2 / n^2
        return float(np.sqrt(np.sum(w * np.abs(fh) ** 2) * self.cell / self.n**2))

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """<f, g> = integral of conj(f) g."""
        return complex(np.vdot(f, g) * self.cell)

    def inner_real(self, f: np.ndarray, g: np.ndarray) -> float:
        f = np.asarray(f)
        g = np.asarray(g)
        if f.shape != g.shape or f.shape != self.shape:
            raise FieldError(f"shape mismatch: {f.shape} vs {g.shape} on grid {self.shape}")
        return float(np.vdot(f, g).real * self.cell)


# snapshot files -----------------------------------------------------------
#
# Layout (all little-endian float64): n, L, then n*n (re, im) pairs in C order.

def save_field(path: str | Path, grid: Grid, f: np.ndarray) -> None:
    f = np.ascontiguousarray(grid.check(f), dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2d", float(grid.n), float(grid.L)))
        fh.write(f.astype("<c16").tobytes())


def load_field(path: str | Path) -> tuple[Grid, np.ndarray]:
    raw = Path(path).read_bytes()
    n, L = struct.unpack("<2d", raw[:16])
    n = int(n)
    body = np.frombuffer(raw[16:], dtype="<c16")
    if body.size != n * n:
        raise FieldError(f"snapshot {path} holds {body.size} samples, expected {n * n}")
    grid = Grid(n, L)
    return grid, body.reshape(n, n).astype(np.complex128)
