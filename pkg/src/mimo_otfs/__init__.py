"""Uplink-aided downlink channel estimation for massive MIMO-OTFS.

Modules: ``channel`` (geometric paths), ``otfs`` (modulation and the
delay-Doppler-angle relation), ``observation`` (UL training model),
``emvb`` and ``fast`` (sparse Bayesian solvers), ``reconstruct`` (UL to DL
mapping and signatures), ``dl_estimate`` (DL pilot schemes, scheduling,
overhead) and ``harness`` (Monte-Carlo sweeps).
"""

from .channel import ConfigurationError, GeometryConfig, PathParams, ScenarioConfig, UserChannel, sample_paths
from .emvb import run_emvb
from .fast import run_fast_emvb
from .harness import ExperimentConfig, run_point, run_sweep
from .otfs import OtfsConfig, dd_io_predict, demodulate, modulate

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "GeometryConfig", "PathParams", "ScenarioConfig", "UserChannel",
           "sample_paths", "run_emvb", "run_fast_emvb", "ExperimentConfig", "run_point", "run_sweep",
           "OtfsConfig", "dd_io_predict", "demodulate", "modulate"]
