import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from kvn.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_STRUCTURE, main, verify_archive
from kvn.config import ExperimentConfig, load_config
from kvn.dictionary import ConfigError
from kvn.reference import ANALYTIC_SPECTRUM


def write_cfg(tmp_path, name="cfg.json", **over):
    cfg = {
        "system": "undamped_oscillator",
        "basis": {"basis": "monomial", "max_degree": 2},
        "source": {"kind": "quadrature", "grid": 300},
        "outputs": str(tmp_path / "out"),
    }
    cfg.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def oscillator(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("osc")
    cfg = write_cfg(tmp)
    assert main(["estimate", cfg]) == EXIT_OK
    return tmp, cfg, str(tmp / "out" / "matrices.kvn")


def test_estimate_summary(oscillator):
    tmp, _, _ = oscillator
    summary = json.loads((tmp / "out" / "estimate_summary.json").read_text())
    assert summary["rank"] == 6 and summary["n"] == 6 and summary["k"] == 6
    assert summary["skew_defect"] < 1e-10


def test_estimate_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, source={"kind": "samples", "m": 3000, "seed": 5})
    a, b = tmp_path / "a.kvn", tmp_path / "b.kvn"
    assert main(["estimate", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["--threads", "3", "estimate", cfg, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["estimate", write_cfg(tmp_path, source={"kind": "samples", "m": 0})]) == EXIT_CONFIG
    assert "source.m" in capsys.readouterr().err
    assert main(["estimate", write_cfg(tmp_path, system="pendulum")]) == EXIT_CONFIG
    assert main(["estimate", write_cfg(tmp_path, colour="blue")]) == EXIT_CONFIG
    assert main(["estimate", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_malformed_archive(tmp_path, oscillator):
    _, cfg, _ = oscillator
    bad = tmp_path / "bad.kvn"
    bad.write_bytes(b"KVNGEN1\n\x05")
    assert main(["spectrum", cfg, str(bad)]) == EXIT_CONFIG
    assert main(["verify", str(bad)]) == EXIT_CONFIG


def test_spectrum_export(tmp_path, oscillator):
    _, _, archive = oscillator
    cfg = write_cfg(tmp_path, spectrum={"eigenfunctions": [0, 2], "grid": 40})
    assert main(["spectrum", cfg, archive]) == EXIT_OK
    out = tmp_path / "out"
    first = (out / "spectrum.csv").read_bytes()
    rows = list(csv.reader((out / "spectrum.csv").open()))
    assert rows[0] == ["re", "im", "residual"]
    nu = np.array([complex(float(r[0]), float(r[1])) for r in rows[1:]])
    assert np.max(np.abs(np.sort(nu.imag) - np.sort(ANALYTIC_SPECTRUM.imag))) < 1e-3
    assert len(list(csv.reader((out / "spectrum_filtered.csv").open()))) == 7
    field = list(csv.reader((out / "eigenfunction_2.csv").open()))
    assert field[0] == ["x1", "x2", "re_psi", "im_psi"] and len(field) > 100
    # re-export is identical
    assert main(["spectrum", cfg, archive]) == EXIT_OK
    assert (out / "spectrum.csv").read_bytes() == first


def test_converge_single_m(tmp_path):
    cfg = write_cfg(tmp_path, converge={"m_exponents": [2.0], "seeds": 2})
    assert main(["converge", cfg]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "out" / "converge.csv").open()))
    assert rows[0] == ["m", "seed", "matrix_error", "eig_error_1", "eig_error_2"]
    assert len(rows) == 4 and rows[-1] == ["slope", "", "", "", ""]
    first = (tmp_path / "out" / "converge.csv").read_bytes()
    assert main(["converge", cfg]) == EXIT_OK
    assert (tmp_path / "out" / "converge.csv").read_bytes() == first


def test_converge_requires_reference_setup(tmp_path):
    assert main(["converge", write_cfg(tmp_path, system="damped_oscillator")]) == EXIT_CONFIG


def test_propagate(tmp_path, oscillator):
    _, _, archive = oscillator
    cfg = write_cfg(tmp_path, propagate={"times": [0, 2.5], "grid": 30, "fit_grid": 100, "particles": 50})
    assert main(["propagate", cfg, archive]) == EXIT_OK
    out = tmp_path / "out"
    names = sorted(p.name for p in out.iterdir())
    assert names == [
        "undamped_oscillator_particles_t0.0.csv",
        "undamped_oscillator_particles_t2.5.csv",
        "undamped_oscillator_t0.0.csv",
        "undamped_oscillator_t2.5.csv",
    ]
    rows = list(csv.reader((out / "undamped_oscillator_t2.5.csv").open()))
    assert rows[0] == ["x1", "x2", "re_psi", "im_psi", "rho"]
    assert any(r[4] == "" for r in rows[1:]) and any(r[4] != "" for r in rows[1:])
    assert all(float(r[4]) >= 0 for r in rows[1:] if r[4])


def test_propagate_empty_times(tmp_path, oscillator):
    _, _, archive = oscillator
    assert main(["propagate", write_cfg(tmp_path), archive]) == EXIT_OK
    assert not (tmp_path / "out").exists() or not any((tmp_path / "out").iterdir())


def test_circuit(tmp_path, oscillator):
    _, _, archive = oscillator
    for t in (0.0, 1.0):
        cfg = write_cfg(tmp_path, circuit={"t": t, "format": "qasm-lite"})
        assert main(["circuit", cfg, archive]) == EXIT_OK
        report = json.loads((tmp_path / "out" / "circuit_report.json").read_text())
        assert report["max_entry_error"] < 1e-10
        assert all(z > 0 for z in report["z"])
    assert "qreg q[2];" in (tmp_path / "out" / "circuit_2q.txt").read_text()


def test_circuit_structure_not_found(tmp_path):
    cfg = write_cfg(
        tmp_path,
        basis={"basis": "rff", "n": 6, "bandwidth": 0.5, "seed": 0},
        source={"kind": "samples", "m": 2000, "seed": 0},
    )
    assert main(["estimate", cfg]) == EXIT_OK
    assert main(["circuit", cfg, str(tmp_path / "out" / "matrices.kvn")]) == EXIT_STRUCTURE


def test_verify(oscillator, tmp_path):
    _, _, archive = oscillator
    assert main(["verify", archive]) == EXIT_OK
    assert all(r["passed"] for r in verify_archive(archive).values())
    # a tampered archive fails the Q reproducibility check
    from kvn.estimator import load_matrices, save_matrices

    gen, white, header = load_matrices(archive)
    gen.Q = gen.Q + 1e-3
    bad = tmp_path / "tampered.kvn"
    save_matrices(gen, white, bad, {"system": header["system"], "basis": header["basis"]})
    assert main(["verify", str(bad)]) == EXIT_NUMERICAL


def test_trajectory_source(tmp_path):
    from kvn.systems import flow, make_undamped_oscillator, sample_uniform

    sys_ = make_undamped_oscillator()
    x = sample_uniform(sys_.domain, 500, 1)
    y = flow(sys_, x, 1e-3, dt=1e-4)
    traj = tmp_path / "traj.csv"
    np.savetxt(traj, np.hstack([x, y]), delimiter=",", header="x1,x2,y1,y2", comments="", fmt="%.17g")
    cfg = write_cfg(tmp_path, source={"kind": "trajectories", "file": str(traj), "h": 1e-3})
    assert main(["estimate", cfg]) == EXIT_OK
    archive = str(tmp_path / "out" / "matrices.kvn")
    assert main(["spectrum", cfg, archive]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "out" / "spectrum.csv").open()))
    assert all(r[2] == "" for r in rows[1:])  # no residuals from trajectory data


def test_config_roundtrip(tmp_path):
    cfg = load_config(write_cfg(tmp_path, spectrum={"threshold": 0.05, "eigenfunctions": [1]}))
    again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"source": {"kind": "magic"}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"spectrum": {"nope": 1}})


def test_entry_point(tmp_path, oscillator):
    _, _, archive = oscillator
    proc = subprocess.run([sys.executable, "-m", "kvn.cli", "verify", archive], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["Qt_skew"]["passed"]
    proc = subprocess.run([sys.executable, "-m", "kvn.cli", "bogus"], capture_output=True, text=True)
    assert proc.returncode == 2
