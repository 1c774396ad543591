from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvn.qcircuit import (
    CircuitFormatError,
    Gate,
    GateList,
    StructureNotFoundError,
    arrow_angles,
    arrow_circuit,
    arrowhead,
    circuit_propagator,
    decompose,
    detect_structure,
    export_circuit,
    format_circuit,
    gate_matrix,
    parse_circuit,
    read_circuit,
    rotation_circuit,
    simulate,
)
from kvn.reference import PERIOD

FIXTURES = Path(__file__).parent / "fixtures"

# arrowhead entries of the whitened analytic oscillator generator, frozen from the verified pipeline
GOLDEN_A = 1.4142135623730954
GOLDEN_Z = (1.6987009920384994, 2.2582578836247666, 0.12118692459998859)


def skew_expm(M, t):
    """exp(tM) for real skew M through the Hermitian solve of iM (independent of the circuits)."""
    h, U = np.linalg.eigh(1j * M)
    return np.real((U * np.exp(-1j * t * h)) @ U.conj().T)


def closed_form(z, t):
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z)
    c, s = np.cos(r * t), np.sin(r * t)
    E = np.empty((4, 4))
    E[0, 0] = c
    E[0, 1:] = -s * z / r
    E[1:, 0] = s * z / r
    E[1:, 1:] = np.eye(3) - (1 - c) * np.outer(z, z) / r**2
    return E


@pytest.fixture(scope="module")
def blocks(analytic_white):
    return detect_structure(analytic_white.Qt)


def test_golden_structure(blocks):
    assert blocks.a == pytest.approx(np.sqrt(2.0), abs=1e-14)
    assert np.all(blocks.z > 0)
    assert np.allclose(blocks.z, GOLDEN_Z, rtol=0, atol=1e-12)
    # |z| is fixed by the spectrum: the arrowhead has eigenvalues 0, 0, +-i|z|
    assert np.linalg.norm(blocks.z) == pytest.approx(2 * np.sqrt(2.0), abs=1e-12)


def test_reassembly(blocks, analytic_white):
    assert np.max(np.abs(blocks.reassemble() - analytic_white.Qt)) < 1e-12


def test_random_dense_matrix_rejected():
    X = np.random.default_rng(0).normal(size=(6, 6))
    with pytest.raises(StructureNotFoundError):
        detect_structure(X - X.T)
    with pytest.raises(StructureNotFoundError):
        detect_structure(np.zeros((4, 4)))


def test_detect_permuted_and_sign_flipped():
    rng = np.random.default_rng(1)
    z = np.array([0.3, 1.1, 0.7])
    M = np.zeros((6, 6))
    M[:2, :2] = [[0, -0.9], [0.9, 0]]
    M[2:, 2:] = arrowhead(z)
    P = np.eye(6)[rng.permutation(6)]
    S = np.diag([1, -1, -1, 1, -1, 1.0])
    Qt = S @ P @ M @ P.T @ S
    b = detect_structure(Qt)
    assert b.a == pytest.approx(0.9)
    assert np.allclose(sorted(b.z), sorted(z))
    assert np.max(np.abs(b.reassemble() - Qt)) < 1e-15


def test_end_to_end_equivalence(blocks, analytic_white):
    for t in (0.1, 0.5, 1.0, PERIOD):
        one, two = decompose(blocks, t)
        assert np.max(np.abs(circuit_propagator(blocks, one, two) - skew_expm(analytic_white.Qt, t))) < 1e-10


def test_zero_time_is_identity(blocks):
    one, two = decompose(blocks, 0.0)
    assert np.max(np.abs(simulate(one) - np.eye(2))) < 1e-14
    assert np.max(np.abs(simulate(two) - np.eye(4))) < 1e-14
    theta, phi, _, _ = arrow_angles(blocks.z)
    angles = [g.angle for g in two.gates if g.kind == "cry"]
    assert angles == [phi, -theta, 0.0, theta, -phi]


@settings(max_examples=100, deadline=None)
@given(
    z=st.tuples(*[st.floats(1e-3, 2.0) for _ in range(3)]),
    t=st.floats(0.0, 5.0),
)
def test_arrow_circuit_matches_closed_form(z, t):
    U = simulate(arrow_circuit(z, t))
    assert np.max(np.abs(U - closed_form(z, t))) < 1e-12
    assert np.max(np.abs(U - skew_expm(arrowhead(z), t))) < 1e-12
    assert np.max(np.abs(U.T @ U - np.eye(4))) < 1e-12


def test_random_draws_for_acceptance():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        z, t = rng.uniform(0, 2, 3), rng.uniform(0, 5)
        assert np.max(np.abs(simulate(arrow_circuit(z, t)) - closed_form(z, t))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(z=st.tuples(*[st.floats(1e-3, 5.0) for _ in range(3)]))
def test_angle_identities(z):
    theta, phi, r, s = arrow_angles(z)
    z1, z2, z3 = z
    assert np.cos(theta / 2) == pytest.approx(z1 / r, abs=1e-14)
    assert np.sin(theta / 2) == pytest.approx(s / r, abs=1e-14)
    assert np.cos(phi / 2) == pytest.approx(z3 / s, abs=1e-14)
    assert np.sin(phi / 2) == pytest.approx(z2 / s, abs=1e-14)


def test_zero_entries_handled_by_atan2():
    assert arrow_angles([0.0, 1.0, 0.0])[:2] == (np.pi, np.pi)
    U = simulate(arrow_circuit([0.0, 1.0, 0.0], 0.7))
    assert np.max(np.abs(U - closed_form([0.0, 1.0, 0.0], 0.7))) < 1e-12


def test_rotation_block():
    for t in (0.0, 0.3, 2.0):
        c, s = np.cos(np.sqrt(2) * t), np.sin(np.sqrt(2) * t)
        assert np.max(np.abs(simulate(rotation_circuit(np.sqrt(2), t)) - [[c, -s], [s, c]])) < 1e-15


def test_gate_matrices():
    assert np.array_equal(simulate(GateList(1, (Gate("x", 0),))), [[0, 1], [1, 0]])
    theta = 0.8
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    # control q[1] (least significant), target q[0]; Ry(-theta) acts on rows/cols 1 and 3
    want = np.array([[1, 0, 0, 0], [0, c, 0, s], [0, 0, 1, 0], [0, -s, 0, c]])
    assert np.max(np.abs(gate_matrix(Gate("cry", 0, 1, -theta), 2) - want)) < 1e-15
    with pytest.raises(IndexError):
        gate_matrix(Gate("x", 2), 2)
    with pytest.raises(ValueError):
        gate_matrix(Gate("cry", 0, 0, 1.0), 2)
    # gates apply in list order: second gate acts after the first
    gl = GateList(1, (Gate("ry", 0, None, 0.4), Gate("x", 0)))
    assert np.allclose(simulate(gl), np.array([[0, 1], [1, 0]]) @ gate_matrix(Gate("ry", 0, None, 0.4), 1))


def test_golden_files(blocks):
    one, two = decompose(blocks, 1.0)
    assert format_circuit(one) == (FIXTURES / "oscillator_t1_1q.txt").read_text()
    assert format_circuit(two) == (FIXTURES / "oscillator_t1_2q.txt").read_text()


def test_roundtrip(tmp_path, blocks):
    for t in (0.0, 1.0, 3.3):
        for gl in decompose(blocks, t):
            for fmt in ("text", "qasm-lite"):
                path = tmp_path / f"c_{fmt}.txt"
                export_circuit(gl, path, fmt)
                back = read_circuit(path)
                assert back.gates == gl.gates and back.num_qubits == gl.num_qubits
                assert back.meta == pytest.approx(gl.meta)
    text = format_circuit(decompose(blocks, 1.0)[1], "qasm-lite")
    assert text.splitlines()[1] == "qreg q[2];"


@pytest.mark.parametrize(
    "text,line",
    [("ry q[0]\n", 1), ("x q[0]\nfoo q[1] 2\n", 2), ("cry q[0] r1 0.5\n", 1), ("ry q[0] abc\n", 1)],
)
def test_parse_errors(text, line):
    with pytest.raises(CircuitFormatError) as err:
        parse_circuit(text)
    assert err.value.line == line
