"""Eigenvalues, residual scores and eigenfunction evaluation.

KvN eigenvectors live in whitened coordinates; Koopman and Perron-Frobenius
eigenvectors live in the original coordinates of the dictionary.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dictionary import Dictionary
from .estimator import GeneratorMatrices, WhitenedRepresentation

Array = np.ndarray

SKEW_TOL = 1e-10
DEFAULT_THRESHOLD = 1e-2


class NotSkewError(ValueError):
    pass


class EigenSolverError(np.linalg.LinAlgError):
    def __init__(self, message: str, iterations: Optional[int] = None):
        super().__init__(message if iterations is None else f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class UndefinedScoreError(ValueError):
    pass


@dataclass
class SpectrumResult:
    eigenvalues: Array  # complex, shape (p,)
    eigenvectors: Array  # complex, columns are unit-norm eigenvectors, shape (k, p)
    residuals: Optional[Array] = None
    basis_ref: dict = field(default_factory=dict)
    coordinates: str = "whitened"  # or "original"

    def __len__(self) -> int:
        return len(self.eigenvalues)

    def subset(self, idx) -> "SpectrumResult":
        idx = np.asarray(idx, dtype=int)
        res = None if self.residuals is None else self.residuals[idx]
        return replace(self, eigenvalues=self.eigenvalues[idx], eigenvectors=self.eigenvectors[:, idx], residuals=res)


def _order(nu: Array) -> Array:
    # |Im| ascending, positive imaginary part first, then real part descending
    return np.lexsort((-nu.real, -np.sign(nu.imag), np.round(np.abs(nu.imag), 12)))


def _real_basis(U: Array) -> Array:
    """Real orthonormal basis of a conjugation-closed complex subspace."""
    if U.shape[1] == 0:
        return U.real
    W, s, _ = np.linalg.svd(np.hstack([U.real, U.imag]), full_matrices=False)
    return W[:, : U.shape[1]]


def eig_skew(Qt, tol: float = SKEW_TOL, basis_ref: Optional[dict] = None) -> SpectrumResult:
    """Spectrum of a real skew-symmetric matrix through the Hermitian matrix ``i Qt``.

    Nonzero eigenvalues come in exact pairs ``(nu, conj nu)`` with conjugate
    eigenvectors; the zero eigenspace is returned with a real basis.
    """
    Qt = np.asarray(Qt, dtype=float)
    if Qt.ndim != 2 or Qt.shape[0] != Qt.shape[1]:
        raise ValueError("Qt must be square")
    scale = max(1.0, float(np.max(np.abs(Qt), initial=0.0)))
    defect = float(np.max(np.abs(Qt + Qt.T), initial=0.0))
    if defect > tol * scale:
        raise NotSkewError(f"matrix is not skew-symmetric: max|Qt + Qt^T| = {defect:.3g}")
    k = Qt.shape[0]
    if k == 0:
        return SpectrumResult(np.zeros(0, complex), np.zeros((0, 0), complex), basis_ref=dict(basis_ref or {}))
    h, U = np.linalg.eigh(1j * Qt)
    zero_tol = 1e-12 * scale * k
    pos = np.flatnonzero(h > zero_tol)
    neg = np.flatnonzero(h < -zero_tol)
    zero = np.flatnonzero(np.abs(h) <= zero_tol)
    if len(pos) != len(neg):
        # unpaired roundoff; fall back to the raw Hermitian solve
        nu = -1j * h
        order = _order(nu)
        return SpectrumResult(nu[order], U[:, order], basis_ref=dict(basis_ref or {}))
    # Qt v = nu v with nu = -i h; the partner of (nu, v) is (conj nu, conj v)
    vals, vecs = [], []
    for j in pos:
        nu = -1j * h[j]
        vals += [nu, np.conj(nu)]
        vecs += [U[:, j], np.conj(U[:, j])]
    Z = _real_basis(U[:, zero])
    vals += [0j] * Z.shape[1]
    vecs += list(Z.T.astype(complex))
    nu = np.array(vals, dtype=complex)
    V = np.array(vecs, dtype=complex).T
    V = V / np.linalg.norm(V, axis=0)
    order = _order(nu)
    return SpectrumResult(nu[order], V[:, order], basis_ref=dict(basis_ref or {}))


def eig_general(M, basis_ref: Optional[dict] = None, coordinates: str = "original") -> SpectrumResult:
    """Eigenpairs of a general real matrix; conjugate pairs are adjacent."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    try:
        nu, V = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"nonsymmetric eigensolver did not converge: {exc}", iterations=30 * max(M.shape[0], 1)) from None
    nu = nu.astype(complex)
    V = V.astype(complex)
    V = V / np.linalg.norm(V, axis=0)
    order = _order(nu)
    return SpectrumResult(nu[order], V[:, order], basis_ref=dict(basis_ref or {}), coordinates=coordinates)


# --------------------------------------------------------------------------
# residuals


@dataclass
class ResidualMatrices:
    """Gram, KvN cross and second-order matrices in one coordinate system."""

    G: Array
    B: Array
    C: Array

    @classmethod
    def from_generators(cls, gen: GeneratorMatrices, white: Optional[WhitenedRepresentation] = None):
        if gen.B is None or gen.C is None:
            raise UndefinedScoreError("residuals need KvN cross/second-order matrices (not available for trajectory data)")
        if white is None:
            return cls(gen.G, gen.B, gen.C)
        T = white.T
        return cls(T.T @ gen.G @ T, T.T @ gen.B @ T, T.T @ gen.C @ T)

    def score(self, nu: complex, v: Array) -> float:
        v = np.asarray(v, dtype=complex)
        if not np.any(v):
            raise UndefinedScoreError("eigenvector is zero")
        norm2 = float(np.real(v.conj() @ self.G @ v))
        if not norm2 > 0:
            raise UndefinedScoreError(f"v* G v = {norm2:.3g} is not positive")
        Bv = self.B @ v
        quad = v.conj() @ (self.C @ v) - np.conj(nu) * (v.conj() @ Bv) - nu * np.conj(v.conj() @ Bv) + abs(nu) ** 2 * norm2
        return float(np.sqrt(max(0.0, float(np.real(quad))) / norm2))


def residual_score(gen: GeneratorMatrices, nu: complex, v, white: Optional[WhitenedRepresentation] = None) -> float:
    """Sampled estimate of ``||(Q - nu) psi|| / ||psi||`` for ``psi = v^T phi``.

    With ``white`` given, ``v`` is taken in whitened coordinates.
    """
    return ResidualMatrices.from_generators(gen, white).score(nu, v)


def score_spectrum(spec: SpectrumResult, gen: GeneratorMatrices, white: Optional[WhitenedRepresentation] = None) -> SpectrumResult:
    mats = ResidualMatrices.from_generators(gen, white if spec.coordinates == "whitened" else None)
    res = np.array([mats.score(nu, spec.eigenvectors[:, j]) for j, nu in enumerate(spec.eigenvalues)])
    return replace(spec, residuals=res)


def galerkin_kvn_spectrum(gen: GeneratorMatrices, white: WhitenedRepresentation) -> SpectrumResult:
    """Eigenpairs of the sampled Galerkin KvN matrix ``T^T B T`` (not antisymmetrized), scored.

    Used for residual filtering: with finite samples the symmetric part of the
    whitened stiffness matrix is not small, and eigenvectors of the
    antisymmetrized matrix are then poor residual minimizers.
    """
    mats = ResidualMatrices.from_generators(gen, white)
    spec = eig_general(mats.B, coordinates="whitened")
    res = np.array([mats.score(nu, spec.eigenvectors[:, j]) for j, nu in enumerate(spec.eigenvalues)])
    return replace(spec, residuals=res)


def filter_spectrum(spec: SpectrumResult, threshold: float = DEFAULT_THRESHOLD) -> SpectrumResult:
    if spec.residuals is None:
        raise ValueError("spectrum has no residual scores")
    return spec.subset(np.flatnonzero(spec.residuals < threshold))


def eigenfunction_values(spec: SpectrumResult, dct: Dictionary, white: Optional[WhitenedRepresentation], j: int, points) -> Array:
    if not -len(spec) <= j < len(spec):
        raise IndexError(f"eigenpair index {j} out of range for {len(spec)} eigenpairs")
    coeffs = spec.eigenvectors[:, j]
    if white is not None and spec.coordinates == "whitened":
        coeffs = white.T @ coeffs
    return np.atleast_2d(dct.eval(np.atleast_2d(points))) @ coeffs


# --------------------------------------------------------------------------
# CSV


def fmt(x: float) -> str:
    return f"{x:.17g}"


def write_spectrum_csv(path, spec: SpectrumResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re", "im", "residual"])
        for j, nu in enumerate(spec.eigenvalues):
            res = "" if spec.residuals is None else fmt(spec.residuals[j])
            w.writerow([fmt(nu.real), fmt(nu.imag), res])


def read_spectrum_csv(path):
    """Return ``(eigenvalues, residuals)``; residuals are NaN where absent."""
    nus, res = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["re", "im", "residual"]:
            raise ValueError(f"unexpected spectrum header {header}")
        for row in reader:
            nus.append(complex(float(row[0]), float(row[1])))
            res.append(float(row[2]) if row[2] else np.nan)
    return np.array(nus, dtype=complex), np.array(res)


def write_field_csv(path, points: Array, values: Array) -> None:
    """Eigenfunction field export ``x1,x2,re_psi,im_psi``."""
    values = np.asarray(values, dtype=complex)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "re_psi", "im_psi"])
        for x, v in zip(points, values):
            w.writerow([fmt(x[0]), fmt(x[1]), fmt(v.real), fmt(v.imag)])
