"""Conditional sequential Monte Carlo on finite-state hidden Markov models.

Exact oracles, particle samplers and the experiments that check the
stability bound, ergodicity and central limit behaviour of the conditional
SMC kernel.
"""

__version__ = "0.1.0"

from .model import HmmModel, TestFunction, build_model, check_assumptions, load_model, m2_model  # noqa: E402
from .smc import ParticleSystem, run_smc, trace_ancestry  # noqa: E402
from .csmc import KernelDraw, eta_hat, kernel_chain, kernel_step, run_conditional_system  # noqa: E402

__all__ = [
    "HmmModel",
    "KernelDraw",
    "ParticleSystem",
    "TestFunction",
    "build_model",
    "check_assumptions",
    "eta_hat",
    "kernel_chain",
    "kernel_step",
    "load_model",
    "m2_model",
    "run_conditional_system",
    "run_smc",
    "trace_ancestry",
]
