"""Nonuniform exponential dichotomies of linear and triangular systems on the half line."""
from __future__ import annotations

from .dichotomy import (DichotomyAnalyzer, DichotomyCertificate, GrowthCertificate, ProjectorFamily,
                        estimate_projectors, fit_dichotomy, fit_growth, growth_rates, is_contraction,
                        verify_certificate)
from .errors import NudichError
from .evolution import EvolutionGrid, TimeGrid, build_grid, integrate_transition, load_grid, save_grid
from .normfam import NormFamily, build_lyapunov_family, uniformize
from .spectrum import SpectrumResult, compute_spectrum, dichotomy_test
from .sysdef import SystemDef, load_system

__version__ = "0.1.0"

__all__ = [
    "DichotomyAnalyzer", "DichotomyCertificate", "EvolutionGrid", "GrowthCertificate", "NormFamily",
    "NudichError", "ProjectorFamily", "SpectrumResult", "SystemDef", "TimeGrid", "build_grid",
    "build_lyapunov_family", "compute_spectrum", "dichotomy_test", "estimate_projectors", "fit_dichotomy",
    "fit_growth", "growth_rates", "integrate_transition", "is_contraction", "load_grid", "load_system",
    "save_grid", "uniformize", "verify_certificate",
]
