"""Galerkin/gEDMD estimation of the projected K, PF and KvN generators.

Monte Carlo samples (weights ``1/m``) and midpoint quadrature nodes (weights
equal to cell volumes) go through the same weighted reduction. Basis values
are evaluated in fixed-size column chunks and the chunk contributions are
summed by a binary tree in a fixed order, so results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .dictionary import Dictionary, generator_values
from .systems import DegenerateDomainError, Domain, VectorField

Array = np.ndarray

DEFAULT_TRUNCATION = 1e-10
DEFAULT_CHUNK = 8192


class NonFiniteError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"non-finite basis value at sample index {index}")
        self.index = index


class RankError(np.linalg.LinAlgError):
    pass


@dataclass
class DataMatrices:
    """Sample/quadrature nodes plus lazily evaluated basis matrices.

    ``phi``, ``dphi`` and ``qphi`` are ``n x m`` (basis values, Koopman
    generator values, KvN generator values). They are computed on first access;
    the estimator streams them in chunks instead.
    """

    dictionary: Dictionary
    points: Array
    weights: Array
    field: Optional[VectorField] = None
    velocities: Optional[Array] = None  # finite-difference b(x) estimates

    @property
    def m(self) -> int:
        return len(self.points)

    @property
    def has_kvn(self) -> bool:
        # divergence is not estimable from trajectory differences
        return self.velocities is None

    def _block(self, sl: slice):
        x = self.points[sl]
        dct = self.dictionary
        vals = dct.eval_fn(x)
        grads = dct.grad_fn(x)
        if self.velocities is not None:
            dvals = np.einsum("nkd,nd->nk", grads, self.velocities[sl])
            qvals = None
        else:
            dvals = generator_values(vals, grads, self.field, x, "K")
            div = self.field.div_b(x)[:, None]
            qvals = -dvals - 0.5 * div * vals
        bad = ~np.all(np.isfinite(vals), axis=1) | ~np.all(np.isfinite(dvals), axis=1)
        if np.any(bad):
            raise NonFiniteError(int(sl.start + np.flatnonzero(bad)[0]))
        return vals, dvals, qvals

    def chunk_at(self, start: int, size: int = DEFAULT_CHUNK) -> tuple:
        """``(phi, dphi, qphi, w)`` for columns ``start:start+size`` (``n x size`` blocks)."""
        sl = slice(start, min(start + size, self.m))
        vals, dvals, qvals = self._block(sl)
        return vals.T, dvals.T, (None if qvals is None else qvals.T), self.weights[sl]

    def chunks(self, size: int = DEFAULT_CHUNK) -> Iterator[tuple]:
        for start in range(0, self.m, size):
            yield self.chunk_at(start, size)

    def _full(self, idx):
        parts = [c[idx] for c in self.chunks()]
        if parts and parts[0] is None:
            return None
        return np.concatenate(parts, axis=1)

    @cached_property
    def phi(self) -> Array:
        return self._full(0)

    @cached_property
    def dphi(self) -> Array:
        return self._full(1)

    @cached_property
    def qphi(self) -> Optional[Array]:
        return self._full(2)


def assemble_from_samples(dct: Dictionary, field: VectorField, points, domain: Optional[Domain] = None) -> DataMatrices:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(points)
    if m < 1:
        raise ValueError("need at least one sample (m >= 1)")
    if domain is not None:
        inside = domain.indicator(points)
        if not np.all(inside):
            raise ValueError(f"sample index {int(np.flatnonzero(~inside)[0])} is outside the domain")
    return DataMatrices(dct, points, np.full(m, 1.0 / m), field=field)


def assemble_from_trajectories(dct: Dictionary, snapshots, h: float) -> DataMatrices:
    """Use pairs ``(x_t, x_{t+h})`` with the forward difference as velocity."""
    if not h > 0:
        raise ValueError(f"step h must be positive (got {h})")
    snaps = np.asarray(snapshots, dtype=float)
    if snaps.ndim != 3 or snaps.shape[1] != 2:
        raise ValueError("snapshots must have shape (m, 2, d)")
    x, y = snaps[:, 0, :], snaps[:, 1, :]
    m = len(x)
    if m < 1:
        raise ValueError("need at least one snapshot pair (m >= 1)")
    return DataMatrices(dct, x, np.full(m, 1.0 / m), velocities=(y - x) / h)


def quadrature_nodes(domain: Domain, grid_per_dim: int):
    """Midpoints of a tensor grid on the bounding box that fall inside the domain."""
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    box = domain.bounding_box
    axes = [lo + (np.arange(grid_per_dim) + 0.5) * (hi - lo) / grid_per_dim for lo, hi in box]
    cell = float(np.prod((box[:, 1] - box[:, 0]) / grid_per_dim))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    nodes = mesh[domain.indicator(mesh)]
    if len(nodes) == 0:
        raise DegenerateDomainError("no quadrature node lies inside the domain")
    return nodes, np.full(len(nodes), cell)


def assemble_by_quadrature(dct: Dictionary, field: VectorField, domain: Domain, grid_per_dim: int) -> DataMatrices:
    nodes, weights = quadrature_nodes(domain, grid_per_dim)
    return DataMatrices(dct, nodes, weights, field=field)


class _TreeSum:
    """Pairwise summation whose association depends only on the item count."""

    def __init__(self):
        self._stack = []  # (level, value)

    def add(self, value):
        level = 0
        while self._stack and self._stack[-1][0] == level:
            _, prev = self._stack.pop()
            value = tuple(None if a is None else a + b for a, b in zip(prev, value))
            level += 1
        self._stack.append((level, value))

    def total(self):
        if not self._stack:
            raise ValueError("empty reduction")
        acc = self._stack[-1][1]
        for _, value in reversed(self._stack[:-1]):
            acc = tuple(None if a is None else b + a for a, b in zip(acc, value))
        return acc


def _products(block):
    phi, dphi, qphi, w = block
    pw = phi * w
    G = pw @ phi.T
    A = pw @ dphi.T
    if qphi is None:
        return G, A, None, None
    return G, A, pw @ qphi.T, (qphi * w) @ qphi.T


def reduce_data(data: DataMatrices, chunk: int = DEFAULT_CHUNK, threads: int = 1):
    """Weighted ``(G, A, B, C)`` with ``B = sum w phi qphi^T``, ``C = sum w qphi qphi^T``."""
    acc = _TreeSum()
    # single-threaded BLAS per chunk keeps every chunk product bit-identical
    with threadpool_limits(limits=1, user_api="blas"):
        return _reduce(data, chunk, threads, acc)


def _reduce(data, chunk, threads, acc):
    starts = range(0, data.m, chunk)
    if threads <= 1:
        for start in starts:
            acc.add(_products(data.chunk_at(start, chunk)))
        return acc.total()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded window; results are added in chunk order
        window = 2 * threads
        for lo in range(0, len(starts), window):
            batch = starts[lo : lo + window]
            for part in pool.map(lambda st: _products(data.chunk_at(st, chunk)), batch):
                acc.add(part)
    return acc.total()


@dataclass
class GeneratorMatrices:
    G: Array
    A: Array
    B: Optional[Array]  # KvN cross matrix <phi_i, Q phi_j>
    C: Optional[Array]  # KvN second-order matrix <Q phi_i, Q phi_j>
    L: Array
    Lstar: Array
    Q: Array
    rank: int
    truncation: float
    m: int
    eigvals: Array  # retained eigenvalues of G, ascending
    eigvecs: Array  # matching eigenvectors, n x rank

    @property
    def n(self) -> int:
        return self.G.shape[0]

    def pinv_G(self) -> Array:
        return (self.eigvecs / self.eigvals) @ self.eigvecs.T


def _truncated_eigh(G: Array, truncation: float):
    lam, V = np.linalg.eigh(G)
    lmax = lam[-1]
    if not lmax > 0:
        raise RankError("Gram matrix has no positive eigenvalue")
    keep = lam > truncation * lmax
    if not np.any(keep):
        raise RankError("all Gram eigenvalues truncated (rank zero)")
    return lam[keep], V[:, keep]


def generators_from_gram(G, A, B=None, C=None, truncation: float = DEFAULT_TRUNCATION, m: int = 0) -> GeneratorMatrices:
    """Projected generators from Gram/stiffness matrices via the truncated pseudoinverse."""
    G = np.asarray(G, dtype=float)
    G = 0.5 * (G + G.T)
    A = np.asarray(A, dtype=float)
    lam, V = _truncated_eigh(G, truncation)
    Gp = (V / lam) @ V.T
    return GeneratorMatrices(
        G=G,
        A=A,
        B=None if B is None else np.asarray(B, dtype=float),
        C=None if C is None else np.asarray(C, dtype=float),
        L=Gp @ A,
        Lstar=Gp @ A.T,
        Q=0.5 * Gp @ (A.T - A),
        rank=int(len(lam)),
        truncation=truncation,
        m=m,
        eigvals=lam,
        eigvecs=V,
    )


def estimate_generators(
    data: DataMatrices, truncation: float = DEFAULT_TRUNCATION, threads: int = 1, chunk: int = DEFAULT_CHUNK
) -> GeneratorMatrices:
    G, A, B, C = reduce_data(data, chunk=chunk, threads=threads)
    return generators_from_gram(G, A, B, C, truncation=truncation, m=data.m)


@dataclass
class WhitenedRepresentation:
    """Orthonormalized basis ``phi~ = T^T phi`` and the skew KvN matrix in it.

    Whitened coefficients ``c`` correspond to original coefficients ``T c``.
    """

    T: Array
    Qt: Array
    eig_threshold: float

    @property
    def k(self) -> int:
        return self.Qt.shape[0]

    def to_original(self, coeffs: Array) -> Array:
        return self.T @ coeffs

    def whitened_values(self, dct: Dictionary, x, chunk: int = DEFAULT_CHUNK) -> Array:
        """``phi~(x)`` for a batch of points, shape ``(N, k)``."""
        x = np.atleast_2d(x)
        out = np.empty((len(x), self.k), dtype=np.result_type(x, float))
        for start in range(0, len(x), chunk):
            out[start : start + chunk] = dct.eval_fn(x[start : start + chunk]) @ self.T
        return out

    @cached_property
    def hermitian_eigh(self):
        """Eigendecomposition ``(h, U)`` of the Hermitian matrix ``i Qt``, computed once."""
        return np.linalg.eigh(1j * self.Qt)

    def propagator(self, t: float) -> Array:
        """``exp(t Qt) = U exp(-i t h) U^*``; unitary up to roundoff."""
        h, U = self.hermitian_eigh
        return (U * np.exp(-1j * t * h)) @ U.conj().T


def whiten(gen: GeneratorMatrices) -> WhitenedRepresentation:
    if gen.rank < 1:
        raise RankError("whitening needs rank >= 1")
    T = gen.eigvecs / np.sqrt(gen.eigvals)
    At = T.T @ gen.A @ T
    Qt = 0.5 * (At.T - At)
    Qt = 0.5 * (Qt - Qt.T)
    return WhitenedRepresentation(T=T, Qt=Qt, eig_threshold=gen.truncation)


def whitened_second_order(gen: GeneratorMatrices, white: WhitenedRepresentation):
    """``(G~, B~, C~)``: Gram, cross and second-order KvN matrices in whitened coordinates."""
    if gen.B is None or gen.C is None:
        raise ValueError("KvN cross/second-order matrices unavailable (trajectory data)")
    T = white.T
    return T.T @ gen.G @ T, T.T @ gen.B @ T, T.T @ gen.C @ T


# --------------------------------------------------------------------------
# archive

MAGIC = b"KVNGEN1\n"
ARCHIVE_VERSION = 1
_BLOCK_ORDER = ("G", "A", "C", "L", "Lstar", "Q", "T", "Qt", "B", "V")


class ArchiveError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_matrices(gen: GeneratorMatrices, white: WhitenedRepresentation, path, meta: Optional[dict] = None) -> None:
    """Write the binary archive: magic, length-prefixed JSON header, float64 blocks."""
    arrays = {
        "G": gen.G, "A": gen.A, "C": gen.C, "L": gen.L, "Lstar": gen.Lstar,
        "Q": gen.Q, "T": white.T, "Qt": white.Qt, "B": gen.B, "V": gen.eigvecs,
    }
    blocks = [(name, np.ascontiguousarray(arrays[name], dtype="<f8")) for name in _BLOCK_ORDER if arrays[name] is not None]
    meta = dict(meta or {})
    header = {
        "version": ARCHIVE_VERSION,
        "n": gen.n,
        "k": white.k,
        "m": gen.m,
        "rank": gen.rank,
        "truncation": gen.truncation,
        "eig_threshold": white.eig_threshold,
        "basis": meta.pop("basis", None),
        "system": meta.pop("system", None),
        "gram_eigvals": [float(v) for v in gen.eigvals],
        "blocks": [{"name": name, "shape": list(a.shape)} for name, a in blocks],
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for _, a in blocks:
            fh.write(a.tobytes(order="C"))


def read_archive(path):
    """Parse an archive into ``(header, {name: array})``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise ArchiveError("bad magic; not a KVNGEN1 archive", 0)
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ArchiveError("truncated header length", pos)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise ArchiveError("truncated header", pos)
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"malformed header: {exc}", pos + getattr(exc, "pos", 0)) from None
    if header.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {header.get('version')!r}", pos)
    pos += hlen
    arrays = {}
    for blk in header.get("blocks", []):
        shape = tuple(int(s) for s in blk["shape"])
        nbytes = 8 * int(np.prod(shape))
        if len(raw) < pos + nbytes:
            raise ArchiveError(f"truncated block {blk['name']!r}", pos)
        arrays[blk["name"]] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(float)
        pos += nbytes
    if pos != len(raw):
        raise ArchiveError("trailing bytes after last block", pos)
    return header, arrays


def load_matrices(path):
    header, arr = read_archive(path)
    missing = [k for k in ("G", "A", "L", "Lstar", "Q", "T", "Qt", "V") if k not in arr]
    if missing:
        raise ArchiveError(f"missing blocks {missing}", 0)
    lam = np.asarray(header["gram_eigvals"], dtype=float)
    T, V = arr["T"], arr["V"]
    gen = GeneratorMatrices(
        G=arr["G"], A=arr["A"], B=arr.get("B"), C=arr.get("C"), L=arr["L"], Lstar=arr["Lstar"], Q=arr["Q"],
        rank=int(header["rank"]), truncation=float(header["truncation"]), m=int(header["m"]),
        eigvals=lam, eigvecs=V,
    )
    white = WhitenedRepresentation(T=T, Qt=arr["Qt"], eig_threshold=float(header["eig_threshold"]))
    return gen, white, header
