"""Closed-form Galerkin matrices of the undamped oscillator and the Monte Carlo convergence study.

The basis is ``f0 * [1, x1, x2, x1^2, x1 x2, x2^2]`` with
``f0 = 1 - x1^2 - x2^2 / 2``; integrals are against plain ``dx`` on the ellipse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dictionary import MonomialTaperedSpec, build_monomial_tapered
from .estimator import DEFAULT_TRUNCATION, assemble_from_samples, estimate_generators, whiten
from .spectral import eig_skew
from .systems import make_undamped_oscillator, sample_uniform

_S = np.sqrt(2.0) * np.pi

ANALYTIC_G = _S * np.array(
    [
        [1 / 3, 0, 0, 1 / 24, 0, 1 / 12],
        [0, 1 / 24, 0, 0, 0, 0],
        [0, 0, 1 / 12, 0, 0, 0],
        [1 / 24, 0, 0, 1 / 80, 0, 1 / 120],
        [0, 0, 0, 0, 1 / 120, 0],
        [1 / 12, 0, 0, 1 / 120, 0, 1 / 20],
    ]
)

ANALYTIC_A = _S * np.array(
    [
        [0, 0, 0, 0, 0, 0],
        [0, 0, -1 / 12, 0, 0, 0],
        [0, 1 / 12, 0, 0, 0, 0],
        [0, 0, 0, 0, -1 / 60, 0],
        [0, 0, 0, 1 / 60, 0, -1 / 30],
        [0, 0, 0, 0, 1 / 30, 0],
    ]
)

ANALYTIC_Q = np.array(
    [
        [0, 0, 0, 0, 0, 0],
        [0, 0, 2, 0, 0, 0],
        [0, -1, 0, 0, 0, 0],
        [0, 0, 0, 0, 2, 0],
        [0, 0, 0, -2, 0, 4],
        [0, 0, 0, 0, -1, 0],
    ],
    dtype=float,
)

OMEGA = np.sqrt(2.0)
PERIOD = 2.0 * np.pi / OMEGA
ANALYTIC_SPECTRUM = np.array([0, 0, 1j * OMEGA, -1j * OMEGA, 2j * OMEGA, -2j * OMEGA])


@dataclass
class ConvergenceRow:
    m: int
    seed: int
    matrix_error: float
    eig_error_1: float
    eig_error_2: float


def convergence_study(m_values, seeds: int = 10, master_seed: int = 0, truncation: float = DEFAULT_TRUNCATION) -> list:
    """Errors of the sampled KvN matrix and its first two frequencies against the analytic values.

    Sample stream for seed index ``s`` and grid index ``i`` is ``master_seed + 1000 s + i``.
    """
    sys = make_undamped_oscillator()
    dct = build_monomial_tapered(MonomialTaperedSpec(2, sys.law))
    rows = []
    for s in range(seeds):
        for i, m in enumerate(m_values):
            x = sample_uniform(sys.domain, int(m), master_seed + 1000 * s + i)
            gen = estimate_generators(assemble_from_samples(dct, sys.field, x), truncation=truncation)
            nu = eig_skew(whiten(gen).Qt).eigenvalues
            freq = nu.imag[nu.imag > 0.5 * OMEGA]
            e1 = float(np.min(np.abs(freq - OMEGA), initial=np.inf))
            e2 = float(np.min(np.abs(freq - 2 * OMEGA), initial=np.inf))
            rows.append(ConvergenceRow(int(m), s, float(np.linalg.norm(gen.Q - ANALYTIC_Q)), e1, e2))
    return rows


def convergence_slopes(rows) -> tuple:
    """Log-log regression slopes of the seed-averaged errors; None for a single m."""
    ms = sorted({r.m for r in rows})
    if len(ms) < 2:
        return None
    means = np.array([[np.mean([getattr(r, k) for r in rows if r.m == m]) for k in ("matrix_error", "eig_error_1", "eig_error_2")] for m in ms])
    lm = np.log10(ms)
    return tuple(float(np.polyfit(lm, np.log10(means[:, j]), 1)[0]) for j in range(3))


def m_grid(exponents) -> list:
    return [int(round(10.0**e)) for e in exponents]
