"""``kvn`` command-line interface.

Exit codes: 0 success, 2 configuration or precondition error, 3 block
structure not found, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import estimator as est
from . import propagate as prop
from . import qcircuit as qc
from . import spectral as sp
from .config import ExperimentConfig, load_config
from .dictionary import ConfigError, build_from_description
from .reference import convergence_slopes, convergence_study, m_grid
from .systems import (
    DegenerateDomainError,
    EscapeError,
    flow,
    get_system,
    regular_grid,
    sample_density,
    sample_uniform,
    write_points_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_STRUCTURE, EXIT_NUMERICAL = 0, 2, 3, 4


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_json(path: Path, obj) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.outputs)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_trajectories(path):
    """CSV with header ``x1..xd,y1..yd``: pairs ``(x_t, x_{t+h})`` per row."""
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory file {path}: {exc}") from None
    d = arr.shape[1] // 2
    return np.stack([arr[:, :d], arr[:, d:]], axis=1)


def build_data(cfg: ExperimentConfig):
    system = get_system(cfg.system)
    dct = build_from_description(cfg.basis, system.taper(), system.dim)
    src = cfg.source
    if src.kind == "samples":
        data = est.assemble_from_samples(dct, system.field, sample_uniform(system.domain, src.m, src.seed))
    elif src.kind == "quadrature":
        data = est.assemble_by_quadrature(dct, system.field, system.domain, src.grid)
    else:
        data = est.assemble_from_trajectories(dct, _read_trajectories(src.file), src.h)
    return system, dct, data


def cmd_estimate(cfg: ExperimentConfig, args) -> int:
    system, dct, data = build_data(cfg)
    gen = est.estimate_generators(data, truncation=cfg.truncation, threads=args.threads)
    white = est.whiten(gen)
    out = _outdir(cfg)
    archive = Path(args.out) if args.out else out / "matrices.kvn"
    est.save_matrices(gen, white, archive, meta={"basis": dct.description, "system": system.name, "source": vars(cfg.source)})
    lam_all = np.linalg.eigvalsh(gen.G)
    summary = {
        "n": gen.n,
        "k": white.k,
        "m": gen.m,
        "rank": gen.rank,
        "skew_defect": float(np.max(np.abs(white.Qt + white.Qt.T))),
        "gram_condition": float(lam_all[-1] / lam_all[0]) if lam_all[0] > 0 else float("inf"),
        "gram_condition_retained": float(gen.eigvals[-1] / gen.eigvals[0]),
        "archive": str(archive),
    }
    _write_json(out / "estimate_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _load(archive):
    gen, white, header = est.load_matrices(archive)
    system = get_system(header["system"])
    dct = build_from_description(header["basis"], system.taper(), system.dim)
    return gen, white, header, system, dct


def cmd_spectrum(cfg: ExperimentConfig, args) -> int:
    gen, white, header, system, dct = _load(args.archive)
    route = cfg.spectrum.route
    have_residuals = gen.B is not None and gen.C is not None
    if route == "auto":
        route = "galerkin" if have_residuals else "skew"
    if route == "galerkin":
        if not have_residuals:
            raise ConfigError("galerkin route needs residual matrices; archive was built from trajectories")
        spec = sp.galerkin_kvn_spectrum(gen, white)
    else:
        spec = sp.eig_skew(white.Qt, basis_ref=header["basis"])
        if have_residuals:
            spec = sp.score_spectrum(spec, gen, white)
    out = _outdir(cfg)
    sp.write_spectrum_csv(out / "spectrum.csv", spec)
    if spec.residuals is not None:
        sp.write_spectrum_csv(out / "spectrum_filtered.csv", sp.filter_spectrum(spec, cfg.spectrum.threshold))
    pts, inside = regular_grid(system.domain, cfg.spectrum.grid)
    for j in cfg.spectrum.eigenfunctions:
        vals = sp.eigenfunction_values(spec, dct, white, int(j), pts[inside])
        sp.write_field_csv(out / f"eigenfunction_{int(j)}.csv", pts[inside], vals)
    print(f"{len(spec)} eigenvalues ({route} route) written to {out / 'spectrum.csv'}")
    return EXIT_OK


def cmd_converge(cfg: ExperimentConfig, args) -> int:
    if cfg.system != "undamped_oscillator" or cfg.basis.get("basis") != "monomial" or int(cfg.basis.get("max_degree", -1)) != 2:
        raise ConfigError("converge compares against closed-form matrices: needs undamped_oscillator with monomial max_degree 2")
    ms = m_grid(cfg.converge.m_exponents)
    rows = convergence_study(ms, cfg.converge.seeds, cfg.converge.master_seed, cfg.truncation)
    slopes = convergence_slopes(rows)
    out = _outdir(cfg)
    with open(out / "converge.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "seed", "matrix_error", "eig_error_1", "eig_error_2"])
        for r in rows:
            w.writerow([r.m, r.seed, _fmt(r.matrix_error), _fmt(r.eig_error_1), _fmt(r.eig_error_2)])
        w.writerow(["slope", ""] + (["", "", ""] if slopes is None else [_fmt(s) for s in slopes]))
    print("slopes:", "n/a (single m)" if slopes is None else ", ".join(f"{s:.3f}" for s in slopes))
    return EXIT_OK


def cmd_propagate(cfg: ExperimentConfig, args) -> int:
    gen, white, header, system, dct = _load(args.archive)
    pc = cfg.propagate
    out = _outdir(cfg)
    if not pc.times:
        print("no times requested")
        return EXIT_OK
    psi0 = prop.lv_invariant_wavefunction(system) if pc.initial == "lv_invariant" else prop.default_initial_condition(system)
    nodes, weights = est.quadrature_nodes(system.domain, pc.fit_grid)
    psi = prop.fit_wavefunction(dct, white, psi0, nodes, weights, truncation=cfg.truncation)
    pts, inside = regular_grid(system.domain, pc.grid)
    phi_grid = white.whitened_values(dct, pts[inside])
    if pc.particles > 0:

        def rho0(x):
            return np.abs(np.asarray(psi0(x))) ** 2

        bound = 1.05 * float(np.max(rho0(nodes)))
        x0 = sample_density(system.domain, rho0, pc.particles, pc.seed, bound)
    for t in pc.times:
        cur = prop.evolve(psi, float(t))
        prop.write_snapshot_csv(out / prop.snapshot_name(system.name, t), pts, inside, phi_grid @ cur.coeffs)
        if pc.particles > 0:
            write_points_csv(out / prop.snapshot_name(f"{system.name}_particles", t), flow(system, x0, float(t)))
    print(f"fit residual {psi.fit_residual:.3e}; wrote {len(pc.times)} snapshot(s) to {out}")
    return EXIT_OK


def cmd_circuit(cfg: ExperimentConfig, args) -> int:
    gen, white, header, system, dct = _load(args.archive)
    cc = cfg.circuit
    blocks = qc.detect_structure(white.Qt, cc.tol)
    one, two = qc.decompose(blocks, cc.t)
    out = _outdir(cfg)
    qc.export_circuit(one, out / "circuit_1q.txt", cc.format)
    qc.export_circuit(two, out / "circuit_2q.txt", cc.format)
    err = float(np.max(np.abs(qc.circuit_propagator(blocks, one, two) - white.propagator(cc.t))))
    report = {
        "t": cc.t,
        "a": blocks.a,
        "z": [float(v) for v in blocks.z],
        "permutation": [int(p) for p in blocks.permutation],
        "signs": [int(s) for s in blocks.signs],
        "max_entry_error": err,
    }
    _write_json(out / "circuit_report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if err < 1e-10 else EXIT_NUMERICAL


def verify_archive(archive) -> dict:
    """Property checks on a stored archive; each entry is ``(value, passed)``."""
    gen, white, header = est.load_matrices(archive)
    checks = {}
    checks["gram_symmetric"] = float(np.max(np.abs(gen.G - gen.G.T)))
    checks["gram_min_retained_eigenvalue"] = float(gen.eigvals[0])
    rebuilt = est.generators_from_gram(gen.G, gen.A, truncation=gen.truncation)
    checks["Q_reproducible"] = float(np.max(np.abs(rebuilt.Q - gen.Q)))
    checks["Qt_skew"] = float(np.max(np.abs(white.Qt + white.Qt.T)))
    checks["whitening_identity"] = float(np.max(np.abs(white.T.T @ gen.G @ white.T - np.eye(white.k))))
    nu = sp.eig_skew(white.Qt).eigenvalues
    checks["spectrum_closed_under_negation"] = float(np.max(np.abs(np.sort_complex(nu) - np.sort_complex(-nu)), initial=0.0))
    limits = {
        "gram_symmetric": 1e-12 * max(1.0, float(np.max(np.abs(gen.G)))),
        "Q_reproducible": 1e-12 * max(1.0, float(np.max(np.abs(gen.Q)))),
        "Qt_skew": 1e-14,
        # roundoff in T^T G T grows with the retained condition number
        "whitening_identity": max(1e-10, 100 * np.finfo(float).eps * float(gen.eigvals[-1] / gen.eigvals[0])),
        "spectrum_closed_under_negation": 1e-10,
    }
    result = {}
    for name, value in checks.items():
        ok = value > 0 if name == "gram_min_retained_eigenvalue" else value <= limits[name]
        result[name] = {"value": value, "passed": bool(ok)}
    return result


def cmd_verify(cfg, args) -> int:
    result = verify_archive(args.archive)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK if all(r["passed"] for r in result.values()) else EXIT_NUMERICAL


COMMANDS = {
    "estimate": cmd_estimate,
    "spectrum": cmd_spectrum,
    "converge": cmd_converge,
    "propagate": cmd_propagate,
    "circuit": cmd_circuit,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvn", description="Koopman / Perron-Frobenius / KvN generator toolkit")
    p.add_argument("--threads", type=int, default=None, help="worker cap (falls back to KVN_THREADS, then 1)")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("estimate", "converge"):
        s = sub.add_parser(name)
        s.add_argument("config")
        if name == "estimate":
            s.add_argument("--out", help="archive path (default <outputs>/matrices.kvn)")
    for name in ("spectrum", "propagate", "circuit"):
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("archive")
    s = sub.add_parser("verify")
    s.add_argument("archive")
    return p


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("KVN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"KVN_THREADS must be an integer (got {env!r})") from None
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.threads = _threads(args.threads)
        cfg = None if args.command == "verify" else load_config(args.config)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except qc.StructureNotFoundError as exc:
        print(f"error: block structure not found: {exc}", file=sys.stderr)
        return EXIT_STRUCTURE
    except (np.linalg.LinAlgError, est.NonFiniteError, EscapeError, DegenerateDomainError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, est.ArchiveError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
