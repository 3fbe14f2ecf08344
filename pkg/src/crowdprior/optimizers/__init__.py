"""Per-agent trajectory optimizers and the alternating outer loop."""
from .direct import DirectConfig, DirectResult, direct_solve, project_speed
from .mpa import (DivergenceError, MpaConfig, MpaResult, mpa_min_kinetic, mpa_min_maxvel,
                  mpa_min_pair, mpa_min_prior, mpa_min_tracker, mpa_solve)
from .outer import OPTIMIZERS, OptimizeResult, RoundRecord, alternate_optimize, solve_round
from .uks import CovarianceError, UksConfig, UksResult, soft_limiter, uks_solve, uks_transition

__all__ = [
    "DirectConfig", "DirectResult", "direct_solve", "project_speed",
    "DivergenceError", "MpaConfig", "MpaResult", "mpa_min_kinetic", "mpa_min_maxvel",
    "mpa_min_pair", "mpa_min_prior", "mpa_min_tracker", "mpa_solve",
    "OPTIMIZERS", "OptimizeResult", "RoundRecord", "alternate_optimize", "solve_round",
    "CovarianceError", "UksConfig", "UksResult", "soft_limiter", "uks_solve", "uks_transition",
]
