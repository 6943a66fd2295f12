"""Hand-built traces for attacks the simulator does not model."""

from __future__ import annotations

from .core import OpClass, Program, build_program
from .sim import Trace, UopRecord, make_trace


def forward_stateful_fixture() -> tuple[Program, Trace]:
    """Bounds-check-bypass gadget leaking into a cache, probed afterwards.

    The bounds branch waits on a slow length load, so the secret load, the
    scaling and the probe-array load run transiently and are squashed. The
    timed probe (TimerStart, Load, TimerStop) runs on the correct path after
    the squash and only sees the cache state left behind.
    """
    program = build_program(
        [
            {
                "op": OpClass.BRANCH,
                "branch": {
                    "predicted": True,
                    "actual": False,
                    "alt_path": [
                        {"op": OpClass.TIMER_START},
                        {"op": OpClass.LOAD},
                        {"op": OpClass.TIMER_STOP},
                    ],
                },
            },
            {"op": OpClass.LOAD},
            {"op": OpClass.INT_ALU, "deps": [1]},
            {"op": OpClass.LOAD, "deps": [2]},
        ],
        label="forward_stateful_fixture",
    )
    R = UopRecord
    records = [
        R(0, OpClass.BRANCH, "int_alu", 0, 40, 41, 41, None, (40,), 41),
        R(1, OpClass.LOAD, "load", 0, 1, 5, None, 41, (1,)),
        R(2, OpClass.INT_ALU, "int_alu", 0, 5, 6, None, 41, (5,)),
        R(3, OpClass.LOAD, "load", 0, 6, 10, None, 41, (6,)),
        R(4, OpClass.TIMER_START, None, 42, 42, 42, 42),
        R(5, OpClass.LOAD, "load", 42, 43, 44, 44, None, (43,)),
        R(6, OpClass.TIMER_STOP, None, 42, 45, 45, 45),
    ]
    return program, make_trace(records)
