"""Benchmark dynamical systems, their domains and conservation laws.

Every map here is vectorized: states are arrays of shape ``(..., d)`` and the
maps broadcast over the leading axes. The maps are also written so that they
accept complex input, which lets tests differentiate them with the complex
step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray


class EscapeError(RuntimeError):
    """A trajectory left the bounding box of its domain."""

    def __init__(self, message: str, indices: Sequence[int] = (), time: float = float("nan")):
        super().__init__(message)
        self.indices = list(indices)
        self.time = time


class DegenerateDomainError(RuntimeError):
    pass


@dataclass(frozen=True)
class VectorField:
    dim: int
    b: Callable[[Array], Array]
    div_b: Callable[[Array], Array]
    jac_b: Callable[[Array], Array]
    matrix: Optional[Array] = None  # set for linear fields b(x) = Bx


@dataclass(frozen=True)
class ConservationLaw:
    """A function vanishing on the domain boundary; usually conserved by the flow.

    ``conserved`` is False for tapers built from a non-invariant boundary level
    set (damped oscillator), which still vanish on the boundary.
    """

    f0: Callable[[Array], Array]
    grad_f0: Callable[[Array], Array]
    conserved: bool = True


@dataclass(frozen=True)
class Domain:
    indicator: Callable[[Array], Array]
    bounding_box: Array  # shape (d, 2): lower/upper per coordinate
    level_fn: Callable[[Array], Array]
    level_value: float
    level_grad: Optional[Callable[[Array], Array]] = None
    volume: Optional[float] = None  # exact |Omega| where known

    @property
    def dim(self) -> int:
        return self.bounding_box.shape[0]

    def in_box(self, x: Array) -> Array:
        x = np.asarray(x)
        lo, hi = self.bounding_box[:, 0], self.bounding_box[:, 1]
        return np.all((x >= lo) & (x <= hi), axis=-1)


@dataclass(frozen=True)
class BenchmarkSystem:
    name: str
    field: VectorField
    domain: Domain
    law: Optional[ConservationLaw] = None
    reference_eigenvalues: tuple = ()
    reference_note: str = ""

    @property
    def dim(self) -> int:
        return self.field.dim

    def taper(self) -> ConservationLaw:
        """Function used to enforce zero boundary values on a dictionary.

        The conservation law when there is one, otherwise ``c - g`` built from
        the boundary level set ``{g = c}``.
        """
        if self.law is not None:
            return self.law
        g, c, grad = self.domain.level_fn, self.domain.level_value, self.domain.level_grad
        return ConservationLaw(f0=lambda x: c - g(x), grad_f0=lambda x: -grad(x), conserved=False)


def _linear_field(B: Array) -> VectorField:
    B = np.asarray(B, dtype=float)
    tr = float(np.trace(B))

    def b(x):
        return np.asarray(x) @ B.T

    def div_b(x):
        x = np.asarray(x)
        return np.full(x.shape[:-1], tr, dtype=x.dtype if np.iscomplexobj(x) else float)

    def jac_b(x):
        x = np.asarray(x)
        return np.broadcast_to(B, x.shape[:-1] + B.shape).copy()

    return VectorField(dim=B.shape[0], b=b, div_b=div_b, jac_b=jac_b, matrix=B)


def _ellipse_box(M: Array, c: float = 1.0, pad: float = 1e-12) -> Array:
    # extremes of x_i over {x^T M x = c} are +-sqrt(c (M^-1)_ii)
    half = np.sqrt(c * np.diag(np.linalg.inv(M)))
    return np.stack([-half - pad, half + pad], axis=1)


def _quadratic_domain(M: Array, volume: float) -> Domain:
    M = np.asarray(M, dtype=float)

    def g(x):
        x = np.asarray(x)
        return np.einsum("...i,ij,...j->...", x, M, x)

    return Domain(
        indicator=lambda x: np.real(g(x)) < 1.0,
        bounding_box=_ellipse_box(M),
        level_fn=g,
        level_value=1.0,
        level_grad=lambda x: 2.0 * np.asarray(x) @ M,
        volume=volume,
    )


_UNDAMPED_M = np.array([[1.0, 0.0], [0.0, 0.5]])
_DAMPED_M = np.array([[1.0, 0.5], [0.5, 0.5]])


def make_undamped_oscillator() -> BenchmarkSystem:
    field_ = _linear_field([[0.0, 1.0], [-2.0, 0.0]])
    domain = _quadratic_domain(_UNDAMPED_M, volume=np.pi * np.sqrt(2.0))

    def f0(x):
        x = np.asarray(x)
        return 1.0 - x[..., 0] ** 2 - 0.5 * x[..., 1] ** 2

    def grad_f0(x):
        x = np.asarray(x)
        return np.stack([-2.0 * x[..., 0], -x[..., 1]], axis=-1)

    return BenchmarkSystem(
        name="undamped_oscillator",
        field=field_,
        domain=domain,
        law=ConservationLaw(f0, grad_f0),
        reference_eigenvalues=(1j * np.sqrt(2.0), -1j * np.sqrt(2.0)),
        reference_note="principal Koopman eigenvalues +-i*sqrt(2) (omega = sqrt 2)",
    )


def make_damped_oscillator() -> BenchmarkSystem:
    field_ = _linear_field([[0.0, 1.0], [-2.0, -2.0]])
    # ellipse x^T M x < 1 has area pi / sqrt(det M)
    domain = _quadratic_domain(_DAMPED_M, volume=np.pi / np.sqrt(np.linalg.det(_DAMPED_M)))
    return BenchmarkSystem(
        name="damped_oscillator",
        field=field_,
        domain=domain,
        law=None,
        reference_eigenvalues=(-1 + 1j, -1 - 1j),
        reference_note="principal Koopman eigenvalues -1 +- i (omega = sqrt 2, gamma = 2)",
    )


def _lv_raw(x):
    x = np.asarray(x)
    return x[..., 0] + x[..., 1] - np.log(x[..., 0]) - np.log(x[..., 1])


def _bisect(fn, lo: float, hi: float, tol: float = 1e-12) -> float:
    flo = fn(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


LV_LEVEL = 3.0


def lotka_volterra_axis_roots(level: float = LV_LEVEL) -> tuple:
    """Roots of ``1 + x - log x = level``; the level set's axis extremes."""
    fn = lambda x: 1.0 + x - np.log(x) - level  # noqa: E731
    return _bisect(fn, 1e-8, 1.0), _bisect(fn, 1.0, 10.0 * level)


def make_lotka_volterra() -> BenchmarkSystem:
    def b(x):
        x = np.asarray(x)
        return np.stack([x[..., 0] * (1.0 - x[..., 1]), x[..., 1] * (x[..., 0] - 1.0)], axis=-1)

    def div_b(x):
        x = np.asarray(x)
        return x[..., 0] - x[..., 1]

    def jac_b(x):
        x = np.asarray(x)
        x1, x2 = x[..., 0], x[..., 1]
        row1 = np.stack([1.0 - x2, -x1], axis=-1)
        row2 = np.stack([x2, x1 - 1.0], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def indicator(x):
        x = np.real(np.asarray(x))
        pos = np.all(x > 0, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = _lv_raw(np.where(pos[..., None], x, 1.0))
        return pos & (val < LV_LEVEL)

    def f0(x):
        return LV_LEVEL - _lv_raw(x)

    def grad_f0(x):
        x = np.asarray(x)
        return np.stack([1.0 / x[..., 0] - 1.0, 1.0 / x[..., 1] - 1.0], axis=-1)

    lo, hi = lotka_volterra_axis_roots()
    box = np.array([[lo, hi], [lo, hi]])
    domain = Domain(
        indicator=indicator,
        bounding_box=box,
        level_fn=_lv_raw,
        level_value=LV_LEVEL,
        level_grad=lambda x: -grad_f0(x),
    )
    return BenchmarkSystem(
        name="lotka_volterra",
        field=VectorField(dim=2, b=b, div_b=div_b, jac_b=jac_b),
        domain=domain,
        law=ConservationLaw(f0, grad_f0),
    )


SYSTEMS = {
    "undamped_oscillator": make_undamped_oscillator,
    "damped_oscillator": make_damped_oscillator,
    "lotka_volterra": make_lotka_volterra,
}


def get_system(name: str) -> BenchmarkSystem:
    try:
        return SYSTEMS[name]()
    except KeyError:
        raise ValueError(f"unknown system {name!r}; expected one of {sorted(SYSTEMS)}") from None


# --------------------------------------------------------------------------
# integration


def _rk4_step(b, x, h):
    k1 = b(x)
    k2 = b(x + 0.5 * h * k1)
    k3 = b(x + 0.5 * h * k2)
    k4 = b(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _step_count(t: float, dt: float) -> int:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return int(np.ceil(abs(t) / dt - 1e-9)) if t != 0 else 0


def flow(sys: BenchmarkSystem, x0, t: float, dt: float = 1e-3) -> Array:
    """Approximate the flow map with fixed-step classical RK4.

    ``x0`` may be a single state or a batch ``(N, d)``. Negative ``t``
    integrates backward. The step is shrunk so that an integer number of
    steps lands exactly on ``t``. Raises :class:`EscapeError` when a state
    leaves the bounding box.
    """
    x = np.array(x0, dtype=float)
    nsteps = _step_count(t, dt)
    if nsteps == 0:
        return x
    h = t / nsteps
    box = sys.domain
    b = sys.field.b
    for i in range(nsteps):
        x = _rk4_step(b, x, h)
        inside = box.in_box(x)
        if not np.all(inside):
            bad = np.flatnonzero(~np.atleast_1d(inside))
            raise EscapeError(
                f"{len(bad)} state(s) left the bounding box at t={(i + 1) * h:.6g}",
                indices=bad,
                time=(i + 1) * h,
            )
    return x


def flow_with_divergence(sys: BenchmarkSystem, x, t: float, dt: float = 1e-3, on_escape: str = "raise"):
    """Integrate states together with the accumulated divergence ``int_0^t div b``.

    Returns ``(states, integral, escaped_mask)``. With ``on_escape="mask"``
    escaped states are frozen and flagged instead of raising.
    """
    x = np.array(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    acc = np.zeros(x.shape[0])
    escaped = np.zeros(x.shape[0], dtype=bool)
    nsteps = _step_count(t, dt)
    if nsteps:
        h = t / nsteps
        b, div = sys.field.b, sys.field.div_b

        def rhs(z):
            return np.concatenate([b(z[:, :-1]), div(z[:, :-1])[:, None]], axis=1)

        z = np.concatenate([x, acc[:, None]], axis=1)
        for i in range(nsteps):
            live = ~escaped
            z[live] = _rk4_step(rhs, z[live], h)
            out = live & ~sys.domain.in_box(z[:, :-1])
            if np.any(out):
                if on_escape == "raise":
                    raise EscapeError(
                        f"{out.sum()} trajectory(ies) left the bounding box at t={(i + 1) * h:.6g}",
                        indices=np.flatnonzero(out),
                        time=(i + 1) * h,
                    )
                escaped |= out
        x, acc = z[:, :-1], z[:, -1]
    if single:
        return x[0], acc[0], escaped[0]
    return x, acc, escaped


# --------------------------------------------------------------------------
# sampling

MAX_PROPOSALS_CHECK = 10**6
MIN_ACCEPTANCE = 1e-4


@dataclass
class SampleResult:
    points: Array
    proposals: int
    accepted: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals


def _rejection(domain: Domain, m: int, rng: np.random.Generator, accept=None, batch: int = 65536) -> SampleResult:
    lo, hi = domain.bounding_box[:, 0], domain.bounding_box[:, 1]
    chunks, have, proposals = [], 0, 0
    while have < m:
        cand = rng.uniform(lo, hi, size=(batch, domain.dim))
        proposals += batch
        keep = domain.indicator(cand)
        if accept is not None:
            keep &= accept(cand, rng)
        cand = cand[keep]
        chunks.append(cand)
        have += len(cand)
        if proposals >= MAX_PROPOSALS_CHECK and have / proposals < MIN_ACCEPTANCE:
            raise DegenerateDomainError(
                f"acceptance rate {have / proposals:.3g} below {MIN_ACCEPTANCE} after {proposals} proposals"
            )
    return SampleResult(points=np.concatenate(chunks)[:m], proposals=proposals, accepted=have)


def sample_uniform(domain: Domain, m: int, seed: int, worker: int = 0) -> Array:
    """Draw ``m`` i.i.d. uniform points from the domain by rejection from its box.

    Parallel workers use the stream ``seed + worker``.
    """
    return sample_uniform_with_stats(domain, m, seed, worker).points


def sample_uniform_with_stats(domain: Domain, m: int, seed: int, worker: int = 0) -> SampleResult:
    if m < 1:
        raise ValueError(f"sample count m must be >= 1 (got {m})")
    rng = np.random.default_rng(seed + worker)
    return _rejection(domain, m, rng)


def sample_density(domain: Domain, density: Callable[[Array], Array], m: int, seed: int, bound: float) -> Array:
    """Rejection-sample ``m`` points from an unnormalized density bounded by ``bound``."""
    if m < 1:
        raise ValueError(f"sample count m must be >= 1 (got {m})")
    rng = np.random.default_rng(seed)

    def accept(cand, rng_):
        u = rng_.uniform(0.0, bound, size=len(cand))
        vals = np.zeros(len(cand))
        inside = domain.indicator(cand)
        vals[inside] = density(cand[inside])
        if np.any(vals > bound):
            raise ValueError("density exceeds the supplied bound")
        return u < vals

    return _rejection(domain, m, rng, accept=accept).points


def estimate_volume(domain: Domain, m: int = 10**6, seed: int = 0) -> float:
    """|Omega|: exact when known, else box volume times acceptance rate."""
    if domain.volume is not None:
        return domain.volume
    res = sample_uniform_with_stats(domain, m, seed)
    box = float(np.prod(domain.bounding_box[:, 1] - domain.bounding_box[:, 0]))
    return box * res.acceptance_rate


def regular_grid(domain: Domain, n: int):
    """Cell-centred ``n x n`` grid on the bounding box and its inside-domain mask."""
    if n < 1:
        raise ValueError("grid size must be >= 1")
    box = domain.bounding_box
    axes = [lo + (np.arange(n) + 0.5) * (hi - lo) / n for lo, hi in box]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return pts, domain.indicator(pts)


def write_points_csv(path, points: Array) -> None:
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i + 1}" for i in range(points.shape[1])])
        for row in points:
            w.writerow([f"{v:.17g}" for v in row])


def read_points_csv(path) -> Array:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)
