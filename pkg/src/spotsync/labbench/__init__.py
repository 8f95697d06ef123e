"""Trace-driven evaluation: noise injection, protocol comparison, Allan analysis."""

from spotsync.labbench.allan import AllanSeries, allan_deviation
from spotsync.labbench.harness import (
    BenchConfig,
    ErrorStats,
    ExperimentReport,
    NoiseLevel,
    polling_profile,
    rate_error_report,
    run_comparison,
    simulate_spot,
)
from spotsync.labbench.noise import MeasurementStream, NoiseModel, synthesize_measurements
from spotsync.labbench.report import emit_report

__all__ = [
    "AllanSeries",
    "BenchConfig",
    "ErrorStats",
    "ExperimentReport",
    "MeasurementStream",
    "NoiseLevel",
    "NoiseModel",
    "allan_deviation",
    "emit_report",
    "polling_profile",
    "rate_error_report",
    "run_comparison",
    "simulate_spot",
    "synthesize_measurements",
]
