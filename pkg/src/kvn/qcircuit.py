"""Compilation of the 2 + 4 block-structured KvN propagator into Ry/CRy/X gates.

Qubit ``q[0]`` is the most significant bit: the basis of a two-qubit register
is ordered ``|00>, |01>, |10>, |11>`` with the left digit on ``q[0]``.
Gate lists are stored in circuit (time) order, so the simulated matrix is the
product of the gate matrices with the first gate rightmost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Array = np.ndarray

DETECT_TOL = 1e-8
GATE_KINDS = ("ry", "cry", "x")


class StructureNotFoundError(ValueError):
    pass


class CircuitFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class BlockStructure:
    """``D Qt D`` restricted to ``permutation`` equals ``blockdiag(two_block, arrow_block)``.

    ``signs`` is the diagonal of ``D`` (flips that make every ``z_i`` positive).
    """

    two_block: Array
    arrow_block: Array
    permutation: Array
    signs: Array
    tolerance: float

    @property
    def a(self) -> float:
        return float(self.two_block[1, 0])

    @property
    def z(self) -> Array:
        return -self.arrow_block[0, 1:].copy()

    def embed(self, two: Array, four: Array) -> Array:
        """Place block matrices back into the coordinates of ``Qt``."""
        out = np.zeros((6, 6), dtype=np.result_type(two, four))
        out[np.ix_(self.permutation, self.permutation)] = _blockdiag(two, four)
        return self.signs[:, None] * out * self.signs[None, :]

    def reassemble(self) -> Array:
        return self.embed(self.two_block, self.arrow_block)


def _blockdiag(two: Array, four: Array) -> Array:
    out = np.zeros((6, 6), dtype=np.result_type(two, four))
    out[:2, :2] = two
    out[2:, 2:] = four
    return out


def _components(adj: Array) -> list:
    n = len(adj)
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.flatnonzero(adj[u]):
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def arrowhead(z) -> Array:
    """4x4 skew matrix with first row ``(0, -z1, -z2, -z3)``."""
    z = np.asarray(z, dtype=float)
    A = np.zeros((4, 4))
    A[0, 1:] = -z
    A[1:, 0] = z
    return A


def detect_structure(Qt, tol: float = DETECT_TOL) -> BlockStructure:
    """Find a simultaneous permutation splitting a 6x6 skew matrix into 2 + 4 blocks.

    Entries with ``|q| <= tol * max|Qt|`` count as zero. The 4-block must be a
    star (an arrowhead): one hub coupled to three leaves, no leaf-leaf entries.
    """
    Qt = np.asarray(Qt, dtype=float)
    if Qt.shape != (6, 6):
        raise StructureNotFoundError(f"expected a 6x6 matrix, got {Qt.shape}")
    scale = max(float(np.max(np.abs(Qt))), 1e-300)
    if np.max(np.abs(Qt + Qt.T)) > tol * scale:
        raise StructureNotFoundError("matrix is not skew-symmetric")
    adj = np.abs(Qt) > tol * scale
    np.fill_diagonal(adj, False)
    comps = sorted(_components(adj), key=len)
    if [len(c) for c in comps] != [2, 4]:
        raise StructureNotFoundError(f"coupling graph has components of sizes {[len(c) for c in comps]}, need 2 and 4")
    pair, quad = comps
    deg = {u: int(adj[u].sum()) for u in quad}
    hubs = [u for u in quad if deg[u] == 3]
    if len(hubs) != 1 or any(deg[u] != 1 for u in quad if u != hubs[0]):
        raise StructureNotFoundError("4-block is not an arrowhead (need one hub coupled to three leaves only)")
    hub = hubs[0]
    leaves = [u for u in quad if u != hub]
    i, j = pair
    if Qt[i, j] > 0:
        i, j = j, i
    signs = np.ones(6)
    for leaf in leaves:
        if Qt[hub, leaf] > 0:
            signs[leaf] = -1.0
    perm = np.array([i, j, hub, *leaves])
    Qs = signs[:, None] * Qt * signs[None, :]
    sub = Qs[np.ix_(perm, perm)]
    a = 0.5 * (sub[1, 0] - sub[0, 1])
    z = 0.5 * (sub[3:, 2] - sub[2, 3:])
    two = np.array([[0.0, -a], [a, 0.0]])
    blocks = BlockStructure(two_block=two, arrow_block=arrowhead(z), permutation=perm, signs=signs, tolerance=tol)
    err = np.max(np.abs(blocks.reassemble() - Qt))
    if err > tol * scale:
        raise StructureNotFoundError(f"reassembled blocks differ from Qt by {err:.3g}")
    return blocks


# --------------------------------------------------------------------------
# gates


@dataclass(frozen=True)
class Gate:
    kind: str
    target: int
    control: Optional[int] = None
    angle: float = 0.0


@dataclass(frozen=True)
class GateList:
    num_qubits: int
    gates: tuple
    meta: dict = field(default_factory=dict)


def ry(alpha: float) -> Array:
    c, s = np.cos(alpha / 2), np.sin(alpha / 2)
    return np.array([[c, -s], [s, c]])


_X = np.array([[0.0, 1.0], [1.0, 0.0]])


def arrow_angles(z):
    """``(theta, phi, r, s)`` for positive ``z``; atan2 also covers zero entries."""
    z1, z2, z3 = (float(v) for v in z)
    r = float(np.sqrt(z1**2 + z2**2 + z3**2))
    s = float(np.sqrt(z2**2 + z3**2))
    return 2.0 * np.arctan2(s, z1), 2.0 * np.arctan2(z2, z3), r, s


def rotation_circuit(a: float, t: float) -> GateList:
    return GateList(1, (Gate("ry", 0, None, 2.0 * a * t),), {"t": float(t), "a": float(a)})


def arrow_circuit(z, t: float) -> GateList:
    """``V^T U V`` with ``V = CRy(q1->q0, -theta) CRy(q0->q1, phi)`` and ``U = X CRy(q0->q1, 2rt) X``."""
    theta, phi, r, _ = arrow_angles(z)
    beta = 2.0 * r * t
    gates = (
        Gate("cry", 1, 0, phi),
        Gate("cry", 0, 1, -theta),
        Gate("x", 0),
        Gate("cry", 1, 0, beta),
        Gate("x", 0),
        Gate("cry", 0, 1, theta),
        Gate("cry", 1, 0, -phi),
    )
    z = np.asarray(z, dtype=float)
    return GateList(2, gates, {"t": float(t), "z1": float(z[0]), "z2": float(z[1]), "z3": float(z[2])})


def decompose(blocks: BlockStructure, t: float):
    """Circuits for ``exp(t two_block)`` (one qubit) and ``exp(t arrow_block)`` (two qubits)."""
    one = rotation_circuit(blocks.a, t)
    two = arrow_circuit(blocks.z, t)
    meta = {"t": float(t), "a": blocks.a, "z1": float(blocks.z[0]), "z2": float(blocks.z[1]), "z3": float(blocks.z[2])}
    return GateList(1, one.gates, dict(meta)), GateList(2, two.gates, dict(meta))


def _embed_single(U2: Array, q: int, n: int) -> Array:
    out = np.ones((1, 1))
    for k in range(n):
        out = np.kron(out, U2 if k == q else np.eye(2))
    return out


def _embed_controlled(U2: Array, control: int, target: int, n: int) -> Array:
    P0 = np.diag([1.0, 0.0])
    P1 = np.diag([0.0, 1.0])
    idle = np.ones((1, 1))
    act = np.ones((1, 1))
    for k in range(n):
        idle = np.kron(idle, P0 if k == control else np.eye(2))
        act = np.kron(act, P1 if k == control else (U2 if k == target else np.eye(2)))
    return idle + act


def gate_matrix(g: Gate, n: int) -> Array:
    qubits = [g.target] + ([] if g.control is None else [g.control])
    if any(not 0 <= q < n for q in qubits):
        raise IndexError(f"gate {g.kind} addresses qubit outside 0..{n - 1}")
    if g.kind == "x":
        return _embed_single(_X, g.target, n)
    if g.kind == "ry":
        return _embed_single(ry(g.angle), g.target, n)
    if g.kind == "cry":
        if g.control is None or g.control == g.target:
            raise ValueError("cry needs a control distinct from its target")
        return _embed_controlled(ry(g.angle), g.control, g.target, n)
    raise ValueError(f"unknown gate kind {g.kind!r}")


def simulate(gl: GateList) -> Array:
    n = gl.num_qubits
    M = np.eye(2**n)
    for g in gl.gates:
        M = gate_matrix(g, n) @ M
    return M


def circuit_propagator(blocks: BlockStructure, one: GateList, two: GateList) -> Array:
    """6x6 matrix of the compiled circuits in the coordinates of ``Qt``."""
    return blocks.embed(simulate(one), simulate(two))


# --------------------------------------------------------------------------
# text format


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def format_circuit(gl: GateList, fmt: str = "text") -> str:
    if fmt not in ("text", "qasm-lite"):
        raise ValueError(f"unknown circuit format {fmt!r}")
    meta = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(gl.meta.items()))
    lines = [f"# kvn circuit num_qubits={gl.num_qubits}" + (f" {meta}" if meta else "")]
    if fmt == "qasm-lite":
        lines.append(f"qreg q[{gl.num_qubits}];")
    for g in gl.gates:
        if g.kind == "x":
            lines.append(f"x q[{g.target}]")
        elif g.kind == "ry":
            lines.append(f"ry q[{g.target}] {_fmt(g.angle)}")
        else:
            lines.append(f"cry q[{g.control}] q[{g.target}] {_fmt(g.angle)}")
    return "\n".join(lines) + "\n"


def export_circuit(gl: GateList, path, fmt: str = "text") -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_circuit(gl, fmt))


def _qubit(tok: str, lineno: int) -> int:
    if not (tok.startswith("q[") and tok.endswith("]")):
        raise CircuitFormatError(f"bad qubit reference {tok!r}", lineno)
    try:
        return int(tok[2:-1])
    except ValueError:
        raise CircuitFormatError(f"bad qubit index in {tok!r}", lineno) from None


def parse_circuit(text: str) -> GateList:
    num_qubits, meta, gates = None, {}, []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            toks = line[1:].split()
            if toks[:2] == ["kvn", "circuit"]:
                for tok in toks[2:]:
                    key, _, val = tok.partition("=")
                    if key == "num_qubits":
                        num_qubits = int(val)
                    else:
                        meta[key] = float(val)
            continue
        if line.startswith("qreg"):
            n = int(line[line.index("[") + 1 : line.index("]")])
            if num_qubits is not None and n != num_qubits:
                raise CircuitFormatError("qreg size disagrees with header", lineno)
            num_qubits = n
            continue
        toks = line.split()
        try:
            if toks[0] == "x" and len(toks) == 2:
                gates.append(Gate("x", _qubit(toks[1], lineno)))
            elif toks[0] == "ry" and len(toks) == 3:
                gates.append(Gate("ry", _qubit(toks[1], lineno), None, float(toks[2])))
            elif toks[0] == "cry" and len(toks) == 4:
                gates.append(Gate("cry", _qubit(toks[2], lineno), _qubit(toks[1], lineno), float(toks[3])))
            else:
                raise CircuitFormatError(f"unrecognized gate line {line!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, CircuitFormatError):
                raise
            raise CircuitFormatError(str(exc), lineno) from None
    if num_qubits is None:
        num_qubits = 1 + max((max(g.target, -1 if g.control is None else g.control) for g in gates), default=0)
    return GateList(num_qubits, tuple(gates), meta)


def read_circuit(path) -> GateList:
    with open(path) as fh:
        return parse_circuit(fh.read())
