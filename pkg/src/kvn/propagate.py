"""Unitary wavefunction propagation, Born densities and the oracles used to check them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .dictionary import Dictionary
from .estimator import DEFAULT_TRUNCATION, RankError, WhitenedRepresentation
from .systems import BenchmarkSystem, flow, flow_with_divergence

Array = np.ndarray


@dataclass(frozen=True)
class Wavefunction:
    """Complex coefficients in whitened coordinates, ``psi(x) = c^T phi~(x)``."""

    coeffs: Array
    white: WhitenedRepresentation
    dct: Dictionary
    time: float = 0.0
    fit_residual: Optional[float] = None

    def values(self, points) -> Array:
        return self.white.whitened_values(self.dct, points) @ self.coeffs

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))


@dataclass(frozen=True)
class DensityField:
    points: Array
    values: Array
    mass: Optional[float] = None


def fit_wavefunction(
    dct: Dictionary,
    white: WhitenedRepresentation,
    target: Callable[[Array], Array],
    points,
    weights=None,
    truncation: float = DEFAULT_TRUNCATION,
) -> Wavefunction:
    """Weighted least-squares fit of ``target`` in the whitened basis.

    Solves the normal equations with the estimator's relative eigenvalue
    truncation; fails when the points do not determine all ``k`` coefficients.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    k = white.k
    if len(points) < k:
        raise RankError(f"need at least k = {k} points to fit (got {len(points)})")
    w = np.full(len(points), 1.0 / len(points)) if weights is None else np.asarray(weights, dtype=float)
    P = white.whitened_values(dct, points)
    y = np.asarray(target(points), dtype=complex)
    M = (P * w[:, None]).T @ P
    lam, V = np.linalg.eigh(0.5 * (M + M.T))
    keep = lam > truncation * lam[-1]
    if keep.sum() < k:
        raise RankError(f"fit is rank deficient: {int(keep.sum())} of {k} directions above tolerance")
    c = (V / lam) @ (V.T @ (P.T @ (w * y)))
    resid = P @ c - y
    denom = np.sqrt(np.sum(w * np.abs(y) ** 2))
    rel = float(np.sqrt(np.sum(w * np.abs(resid) ** 2)) / denom) if denom > 0 else float(np.linalg.norm(resid))
    return Wavefunction(coeffs=c.astype(complex), white=white, dct=dct, time=0.0, fit_residual=rel)


def evolve(psi: Wavefunction, dt: float) -> Wavefunction:
    """Advance by ``dt`` with ``exp(dt Qt)``, applied through the cached Hermitian solve."""
    if not np.isfinite(dt):
        raise ValueError("dt must be finite")
    if dt == 0:
        return replace(psi, coeffs=np.array(psi.coeffs, dtype=complex))
    h, U = psi.white.hermitian_eigh
    c = U @ (np.exp(-1j * dt * h) * (U.conj().T @ psi.coeffs))
    return replace(psi, coeffs=c, time=psi.time + dt)


def characteristic_solution(
    sys: BenchmarkSystem,
    psi0: Callable[[Array], Array],
    x,
    t: float,
    dt: float = 1e-3,
    on_escape: str = "raise",
) -> Array:
    """``psi0(Phi^{-t} x) exp(-1/2 int_0^t div b(Phi^{s-t} x) ds)``.

    The backward flow is integrated together with the divergence. With
    ``on_escape="mask"`` points whose backward trajectory leaves the domain get
    the value 0: they were fed by the zero boundary inflow.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if t == 0:
        out = np.asarray(psi0(xb), dtype=complex)
        return out[0] if single else out
    origin, acc, escaped = flow_with_divergence(sys, xb, -t, dt, on_escape=on_escape)
    # acc integrates div b over backward time [0, -t], i.e. minus the forward integral
    vals = np.asarray(psi0(origin), dtype=complex) * np.exp(0.5 * acc)
    if on_escape == "mask":
        dead = escaped | ~sys.domain.indicator(origin)
        vals = np.where(dead, 0.0, vals)
    return vals[0] if single else vals


def born_density(psi: Wavefunction, points, weights=None) -> DensityField:
    points = np.atleast_2d(points)
    rho = np.abs(psi.values(points)) ** 2
    mass = None if weights is None else float(np.sum(np.asarray(weights) * rho))
    return DensityField(points=points, values=rho, mass=mass)


def expectation(psi: Wavefunction, f: Callable[[Array], Array], points, weights=None, return_stderr: bool = False):
    """``int |psi|^2 f / int |psi|^2`` by quadrature or Monte Carlo.

    With uniform Monte Carlo points ``return_stderr`` adds the delta-method
    standard error of the ratio estimator.
    """
    points = np.atleast_2d(points)
    w = np.full(len(points), 1.0 / len(points)) if weights is None else np.asarray(weights, dtype=float)
    rho = np.abs(psi.values(points)) ** 2
    fx = np.real(np.asarray(f(points)))
    mass = np.sum(w * rho)
    if not mass > 0:
        raise ValueError("wavefunction has zero mass on the given points")
    val = float(np.sum(w * rho * fx) / mass)
    if not return_stderr:
        return val
    m = len(points)
    terms = rho * (fx - val) / np.mean(rho)
    return val, float(np.std(terms, ddof=1) / np.sqrt(m))


def particle_ensemble(sys: BenchmarkSystem, sampler: Callable[[int, int], Array], count: int, t: float, seed: int = 0, dt: float = 1e-3) -> Array:
    """Sample ``count`` initial states with ``sampler(count, seed)`` and flow them to time ``t``."""
    x0 = np.atleast_2d(sampler(count, seed))
    return flow(sys, x0, t, dt)


# --------------------------------------------------------------------------
# initial conditions

DAMPED_CENTERS = ((0.4, 0.0), (-0.4, 0.0))
DAMPED_BANDWIDTH = 0.15
LV_CENTER = (0.5, 0.5)
LV_BANDWIDTH = float(np.sqrt(0.02))


def gaussian_superposition(centers, bandwidth: float, taper: Optional[Callable[[Array], Array]] = None):
    """``sum_j exp(-|x - mu_j|^2 / (2 bw^2))``, optionally times ``max(taper, 0)``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))

    def psi0(x):
        x = np.asarray(x)
        val = sum(np.exp(-np.sum((x - c) ** 2, axis=-1) / (2.0 * bandwidth**2)) for c in centers)
        if taper is not None:
            val = val * np.maximum(np.real(taper(x)), 0.0)
        return val

    return psi0


def default_initial_condition(sys: BenchmarkSystem):
    if sys.name == "lotka_volterra":
        return gaussian_superposition([LV_CENTER], LV_BANDWIDTH, sys.taper().f0)
    if sys.name == "damped_oscillator":
        return gaussian_superposition(DAMPED_CENTERS, DAMPED_BANDWIDTH, sys.taper().f0)
    # undamped: exactly representable in the degree-2 monomial basis
    return lambda x: sys.law.f0(x) * (1.0 + np.asarray(x)[..., 0])


def lv_invariant_wavefunction(sys: BenchmarkSystem):
    """``sqrt((3 - raw) / (x1 x2))``, the square root of the invariant density."""

    def psi(x):
        x = np.asarray(x)
        return np.sqrt(np.maximum(sys.law.f0(x), 0.0) / (x[..., 0] * x[..., 1]))

    return psi


# --------------------------------------------------------------------------
# CSV


def snapshot_name(name: str, t: float) -> str:
    return f"{name}_t{float(t):.3}.csv"


def write_snapshot_csv(path, points: Array, inside: Array, psi_values: Array) -> None:
    """Columns ``x1,x2,re_psi,im_psi,rho``; fields are empty outside the domain.

    ``psi_values`` holds values for the inside points only, in grid order.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "re_psi", "im_psi", "rho"])
        j = 0
        for x, ok in zip(points, inside):
            row = [f"{x[0]:.17g}", f"{x[1]:.17g}"]
            if ok:
                v = psi_values[j]
                j += 1
                row += [f"{v.real:.17g}", f"{v.imag:.17g}", f"{abs(v) ** 2:.17g}"]
            else:
                row += ["", "", ""]
            w.writerow(row)

