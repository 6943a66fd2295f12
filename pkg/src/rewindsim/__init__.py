"""Cycle-level out-of-order core model for contention covert channels."""

from .core import (
    BranchInfo,
    CoreConfig,
    FunctionalUnitSpec,
    MicroOp,
    ModelError,
    OpClass,
    Port,
    Program,
    ProgramBuilder,
    SchedulerPolicy,
    StageSpec,
    build_program,
    default_config,
    preset_fu,
)
from .sim import SimulationError, Trace, UopRecord, run

__version__ = "0.1.0"
