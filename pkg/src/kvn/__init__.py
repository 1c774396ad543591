"""Data-driven Koopman, Perron-Frobenius and Koopman-von Neumann generators."""

from .dictionary import Dictionary, MonomialTaperedSpec, RFFTaperedSpec, apply_generator, build_monomial_tapered, build_rff_tapered
from .estimator import (
    DataMatrices,
    GeneratorMatrices,
    WhitenedRepresentation,
    assemble_by_quadrature,
    assemble_from_samples,
    assemble_from_trajectories,
    estimate_generators,
    load_matrices,
    save_matrices,
    whiten,
)
from .propagate import Wavefunction, born_density, characteristic_solution, evolve, expectation, fit_wavefunction
from .qcircuit import decompose, detect_structure, simulate
from .spectral import eig_general, eig_skew, filter_spectrum, residual_score
from .systems import get_system, make_damped_oscillator, make_lotka_volterra, make_undamped_oscillator

__version__ = "0.1.0"
