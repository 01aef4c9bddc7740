"""Trace-driven DRAM controller simulator with a RowHammer fault model."""

from .dram import Command, Geometry, Kind, RowAddress, TimingParams
from .engine import EccConfig, Engine, Metrics, MitigationConfig, SimConfig, run
from .faults import PROFILES, FlipRecord, VictimMap, VictimProfile, generate_victim_map

__version__ = "0.1.0"

__all__ = [
    "Command",
    "EccConfig",
    "Engine",
    "FlipRecord",
    "Geometry",
    "Kind",
    "Metrics",
    "MitigationConfig",
    "PROFILES",
    "RowAddress",
    "SimConfig",
    "TimingParams",
    "VictimMap",
    "VictimProfile",
    "generate_victim_map",
    "run",
]
