"""Multilevel detection of differential item functioning in simulated CAT data."""
from .irt import Item, IrtConfig, ResponseVector, estimate_eap, estimate_mle, prob_correct
from .pool import DifConfig, PoolConfig, generate_cohort, generate_pool, inject_dif
from .engine import CatConfig, simulate_cohort
from .prep import IntervalGrid, build_frames
from .glm import GLM_SPECS, fit_glm, wald_test
from .glmm import GLMM_SPECS, fit_glmm, icc, icc_screen
from .harness import StudyConfig, run_study

__all__ = [
    "Item", "IrtConfig", "ResponseVector", "estimate_eap", "estimate_mle", "prob_correct",
    "DifConfig", "PoolConfig", "generate_cohort", "generate_pool", "inject_dif",
    "CatConfig", "simulate_cohort", "IntervalGrid", "build_frames",
    "GLM_SPECS", "fit_glm", "wald_test", "GLMM_SPECS", "fit_glmm", "icc", "icc_screen",
    "StudyConfig", "run_study",
]
