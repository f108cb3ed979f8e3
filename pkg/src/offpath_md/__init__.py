"""Lennard-Jones molecular dynamics with neighbor-list construction overlapped
against force computation on auxiliary offload nodes."""

from __future__ import annotations

from .analysis import (
    PerfMeasurement,
    TdrReport,
    ThermoSample,
    TimingBreakdown,
    compute_tdr,
    estimate_offpath_time,
    improvement,
    max_comm_offload_improvement,
)
from .core import AtomStore, ConfigError, Decomposition, GlobalBox, SimParams, create_lattice
from .dynamics import NumericalBlowup, force_compute
from .halo import MigrationError
from .neighbor import NeighborList, neighbor_build, sort_atoms
from .scheduler import RunMode, RunOptions, SimulationResult, run, run_baseline, run_offpath
from .transport import ProtocolDesync

__all__ = [
    "AtomStore", "ConfigError", "Decomposition", "GlobalBox", "MigrationError", "NeighborList",
    "NumericalBlowup", "PerfMeasurement", "ProtocolDesync", "RunMode", "RunOptions", "SimParams",
    "SimulationResult", "TdrReport", "ThermoSample", "TimingBreakdown", "compute_tdr", "create_lattice",
    "estimate_offpath_time", "force_compute", "improvement", "max_comm_offload_improvement",
    "neighbor_build", "run", "run_baseline", "run_offpath", "sort_atoms",
]
