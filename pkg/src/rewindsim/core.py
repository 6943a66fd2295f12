"""Domain types for µop programs, functional units and core configuration."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

SCHEMA_VERSION = 1


class ModelError(ValueError):
    """Raised when a program or configuration violates a model invariant."""


class OpClass(str, Enum):
    FP_DIV = "FpDiv"
    FP_MUL = "FpMul"
    INT_ALU = "IntAlu"
    LOAD = "Load"
    BRANCH = "Branch"
    TIMER_START = "TimerStart"
    TIMER_STOP = "TimerStop"
    NOP = "Nop"

    @property
    def is_timer(self) -> bool:
        return self in (OpClass.TIMER_START, OpClass.TIMER_STOP)


# FU kind consumed by default; None means the µop never occupies a unit.
DEFAULT_FU_KIND: dict[OpClass, str | None] = {
    OpClass.FP_DIV: "fp_div",
    OpClass.FP_MUL: "fp_mul",
    OpClass.INT_ALU: "int_alu",
    OpClass.LOAD: "load",
    OpClass.BRANCH: "int_alu",
    OpClass.TIMER_START: None,
    OpClass.TIMER_STOP: None,
    OpClass.NOP: None,
}


@dataclass(frozen=True)
class BranchInfo:
    """Prediction payload of a Branch µop.

    ``alt_path`` is what the front end fetches after a mispredict. Its µops
    use alt-local numbering: ``seq`` is the index inside the path and
    ``deps`` refer to earlier entries of the same path. The simulator maps
    them onto fresh global sequence numbers at re-steer time.
    """

    predicted: bool
    actual: bool
    alt_path: tuple["MicroOp", ...] = ()

    @property
    def mispredicted(self) -> bool:
        return self.predicted != self.actual


@dataclass(frozen=True)
class MicroOp:
    seq: int
    op: OpClass
    deps: frozenset[int] = frozenset()
    fu_kind: str | None = None
    branch: BranchInfo | None = None


@dataclass(frozen=True)
class StageSpec:
    latency: int
    pipelined: bool

    def __post_init__(self) -> None:
        if self.latency < 1:
            raise ModelError(f"stage latency must be >= 1, got {self.latency}")


@dataclass(frozen=True)
class FunctionalUnitSpec:
    kind: str
    stages: tuple[StageSpec, ...]
    count: int = 1

    def __post_init__(self) -> None:
        if not self.stages:
            raise ModelError(f"functional unit {self.kind!r} has no stages")
        if self.count < 1:
            raise ModelError(f"functional unit {self.kind!r} needs count >= 1")

    @property
    def total_latency(self) -> int:
        return sum(s.latency for s in self.stages)

    @property
    def initiation_interval(self) -> int:
        first = self.stages[0]
        return 1 if first.pipelined else first.latency

    @property
    def fully_pipelined(self) -> bool:
        return all(s.pipelined for s in self.stages)


class SchedulerPolicy(str, Enum):
    OLDEST_FIRST_READY = "OldestFirstReady"
    STRICT_IN_ORDER = "StrictInOrder"


@dataclass(frozen=True)
class Port:
    port_id: int
    kinds: frozenset[str]


@dataclass(frozen=True)
class CoreConfig:
    rob_size: int
    scheduler_size: int
    dispatch_width: int
    retire_width: int
    ports: tuple[Port, ...]
    fus: tuple[FunctionalUnitSpec, ...]
    policy: SchedulerPolicy = SchedulerPolicy.OLDEST_FIRST_READY
    resteer_delay: int = 1

    def __post_init__(self) -> None:
        if not self.rob_size >= self.scheduler_size >= 1:
            raise ModelError(
                f"need rob_size >= scheduler_size >= 1, got {self.rob_size}/{self.scheduler_size}"
            )
        if self.dispatch_width < 1 or self.retire_width < 1:
            raise ModelError("dispatch_width and retire_width must be >= 1")
        if self.resteer_delay < 0:
            raise ModelError("resteer_delay must be >= 0")
        kinds = [fu.kind for fu in self.fus]
        if len(set(kinds)) != len(kinds):
            raise ModelError(f"duplicate functional unit kinds: {kinds}")
        ids = [p.port_id for p in self.ports]
        if len(set(ids)) != len(ids):
            raise ModelError(f"duplicate port ids: {ids}")
        for port in self.ports:
            missing = port.kinds - set(kinds)
            if missing:
                raise ModelError(f"port {port.port_id} references unknown FU kinds {sorted(missing)}")

    def fu(self, kind: str) -> FunctionalUnitSpec:
        for spec in self.fus:
            if spec.kind == kind:
                return spec
        raise ModelError(f"no functional unit of kind {kind!r} in config")

    def replace_fu(self, spec: FunctionalUnitSpec) -> "CoreConfig":
        """Copy of this config with the unit of ``spec.kind`` swapped out."""
        fus = tuple(spec if f.kind == spec.kind else f for f in self.fus)
        if spec.kind not in {f.kind for f in self.fus}:
            fus = fus + (spec,)
        return replace(self, fus=fus)


@dataclass(frozen=True)
class Program:
    ops: tuple[MicroOp, ...]
    label: str = ""

    def __len__(self) -> int:
        return len(self.ops)

    def fu_kinds(self) -> set[str]:
        kinds: set[str] = set()

        def walk(ops: Iterable[MicroOp]) -> None:
            for u in ops:
                if u.fu_kind is not None:
                    kinds.add(u.fu_kind)
                if u.branch is not None:
                    walk(u.branch.alt_path)

        walk(self.ops)
        return kinds


# --- presets -----------------------------------------------------------------

def _divider(kind: str, latency: int, throughput: int) -> FunctionalUnitSpec:
    # non-pipelined head of length=throughput, pipelined tail for the rest
    stages = [StageSpec(throughput, pipelined=False)]
    if latency > throughput:
        stages.append(StageSpec(latency - throughput, pipelined=True))
    return FunctionalUnitSpec(kind, tuple(stages))


_PRESETS: dict[str, Any] = {
    "skylake_divsd": lambda: _divider("fp_div", 13, 4),
    "haswell_divsd": lambda: _divider("fp_div", 16, 8),
    "fully_pipelined_divsd": lambda: FunctionalUnitSpec("fp_div", (StageSpec(13, True),)),
    "appendix_unit": lambda: FunctionalUnitSpec(
        "fp_div", (StageSpec(3, False), StageSpec(1, True))
    ),
    "fp_mul": lambda: FunctionalUnitSpec("fp_mul", (StageSpec(4, True),)),
    "int_alu": lambda: FunctionalUnitSpec("int_alu", (StageSpec(1, True),), count=4),
    "load": lambda: FunctionalUnitSpec("load", (StageSpec(1, True),), count=2),
}

PRESET_NAMES = tuple(_PRESETS)


def preset_fu(name: str) -> FunctionalUnitSpec:
    """Return the functional unit preset called ``name``.

    Divider presets are two-stage: a non-pipelined stage whose latency equals
    the vendor-listed throughput, followed by a pipelined stage covering the
    remaining latency (minimum of the listed latency range).
    """
    try:
        factory = _PRESETS[name]
    except KeyError:
        raise ModelError(
            f"unknown FU preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}"
        ) from None
    return factory()


def default_ports() -> tuple[Port, ...]:
    return (
        Port(0, frozenset({"fp_div", "fp_mul", "int_alu"})),
        Port(1, frozenset({"fp_mul", "int_alu"})),
        Port(2, frozenset({"load"})),
        Port(3, frozenset({"load"})),
        Port(5, frozenset({"int_alu"})),
        Port(6, frozenset({"int_alu"})),
    )


def default_config(divider: str = "skylake_divsd", **overrides: Any) -> CoreConfig:
    """Skylake-like core with the named divider preset."""
    params: dict[str, Any] = dict(
        rob_size=224,
        scheduler_size=97,
        dispatch_width=4,
        retire_width=4,
        ports=default_ports(),
        fus=(
            preset_fu(divider),
            preset_fu("fp_mul"),
            preset_fu("int_alu"),
            preset_fu("load"),
        ),
        policy=SchedulerPolicy.OLDEST_FIRST_READY,
        resteer_delay=1,
    )
    params.update(overrides)
    if isinstance(params["policy"], str):
        params["policy"] = SchedulerPolicy(params["policy"])
    return CoreConfig(**params)


# --- program construction ----------------------------------------------------

def _coerce_op(value: OpClass | str) -> OpClass:
    if isinstance(value, OpClass):
        return value
    try:
        return OpClass(value)
    except ValueError:
        raise ModelError(
            f"unknown op class {value!r}; valid: {', '.join(o.value for o in OpClass)}"
        ) from None


def _make_ops(entries: Sequence[Mapping[str, Any]], where: str) -> tuple[MicroOp, ...]:
    ops: list[MicroOp] = []
    timers = {OpClass.TIMER_START: 0, OpClass.TIMER_STOP: 0}
    for seq, entry in enumerate(entries):
        op = _coerce_op(entry["op"])
        deps = frozenset(int(d) for d in entry.get("deps", ()))
        bad = sorted(d for d in deps if d >= seq or d < 0)
        if bad:
            raise ModelError(
                f"{where}seq {seq}: dependence on {bad} is not an older µop"
            )
        fu_kind = entry.get("fu_kind", DEFAULT_FU_KIND[op])
        if op.is_timer or op is OpClass.NOP:
            fu_kind = None
        branch = None
        raw = entry.get("branch")
        if op is OpClass.BRANCH:
            raw = raw or {}
            alt = _make_ops(raw.get("alt_path", ()), f"{where}seq {seq} alt_path ")
            branch = BranchInfo(
                predicted=bool(raw.get("predicted", False)),
                actual=bool(raw.get("actual", raw.get("predicted", False))),
                alt_path=alt,
            )
        elif raw is not None:
            raise ModelError(f"{where}seq {seq}: branch info on non-branch op {op.value}")
        if op.is_timer:
            timers[op] += 1
        ops.append(MicroOp(seq, op, deps, fu_kind, branch))
    if timers[OpClass.TIMER_START] > 1:
        raise ModelError(f"{where}more than one TimerStart")
    if timers[OpClass.TIMER_STOP] > 1:
        raise ModelError(f"{where}more than one TimerStop")
    return tuple(ops)


def _check_timers(program: Program) -> None:
    """At most one timer of each kind anywhere; start precedes stop."""
    starts: list[tuple[int, ...]] = []
    stops: list[tuple[int, ...]] = []

    def walk(ops: Sequence[MicroOp], prefix: tuple[int, ...]) -> None:
        for u in ops:
            pos = prefix + (u.seq,)
            if u.op is OpClass.TIMER_START:
                starts.append(pos)
            elif u.op is OpClass.TIMER_STOP:
                stops.append(pos)
            if u.branch is not None:
                walk(u.branch.alt_path, pos)

    walk(program.ops, ())
    if len(starts) > 1:
        raise ModelError(f"{len(starts)} TimerStart µops; at most one allowed")
    if len(stops) > 1:
        raise ModelError(f"{len(stops)} TimerStop µops; at most one allowed")
    if starts and stops and not starts[0] < stops[0]:
        raise ModelError("TimerStart must precede TimerStop")


def build_program(entries: Sequence[Mapping[str, Any]], label: str = "") -> Program:
    """Build a validated Program from a declarative list of op entries.

    Each entry is a mapping with ``op`` (an :class:`OpClass` or its name),
    optional ``deps`` (indices of earlier entries), optional ``fu_kind`` and,
    for branches, ``branch={"predicted", "actual", "alt_path"}`` where
    ``alt_path`` is itself a list of entries.
    """
    program = Program(_make_ops(entries, ""), label)
    _check_timers(program)
    return program


class ProgramBuilder:
    """Fluent helper: each call appends a µop and returns its seq."""

    def __init__(self, label: str = "") -> None:
        self.label = label
        self._entries: list[dict[str, Any]] = []

    def add(self, op: OpClass | str, deps: Iterable[int] = (), **extra: Any) -> int:
        self._entries.append({"op": op, "deps": list(deps), **extra})
        return len(self._entries) - 1

    def div(self, *deps: int) -> int:
        return self.add(OpClass.FP_DIV, deps)

    def alu(self, *deps: int) -> int:
        return self.add(OpClass.INT_ALU, deps)

    def load(self, *deps: int) -> int:
        return self.add(OpClass.LOAD, deps)

    def timer_start(self) -> int:
        return self.add(OpClass.TIMER_START)

    def timer_stop(self) -> int:
        return self.add(OpClass.TIMER_STOP)

    def branch(
        self,
        *deps: int,
        predicted: bool,
        actual: bool,
        alt_path: Sequence[Mapping[str, Any]] = (),
    ) -> int:
        info = {"predicted": predicted, "actual": actual, "alt_path": list(alt_path)}
        return self.add(OpClass.BRANCH, deps, branch=info)

    def build(self) -> Program:
        return build_program(self._entries, self.label)


# --- JSON schema v1 ----------------------------------------------------------

def _op_to_dict(u: MicroOp) -> dict[str, Any]:
    d: dict[str, Any] = {"seq": u.seq, "op": u.op.value, "deps": sorted(u.deps)}
    if u.fu_kind is not None:
        d["fu_kind"] = u.fu_kind
    if u.branch is not None:
        d["branch_info"] = {
            "predicted_outcome": u.branch.predicted,
            "actual_outcome": u.branch.actual,
            "alt_path": [_op_to_dict(a) for a in u.branch.alt_path],
        }
    return d


def _op_from_dict(d: Mapping[str, Any]) -> MicroOp:
    op = _coerce_op(d["op"])
    branch = None
    if "branch_info" in d:
        b = d["branch_info"]
        branch = BranchInfo(
            bool(b["predicted_outcome"]),
            bool(b["actual_outcome"]),
            tuple(_op_from_dict(a) for a in b.get("alt_path", ())),
        )
    return MicroOp(int(d["seq"]), op, frozenset(d.get("deps", ())), d.get("fu_kind"), branch)


def program_to_dict(program: Program) -> dict[str, Any]:
    return {"v": SCHEMA_VERSION, "label": program.label, "ops": [_op_to_dict(u) for u in program.ops]}


def _check_version(d: Mapping[str, Any], what: str) -> None:
    if d.get("v") != SCHEMA_VERSION:
        raise ModelError(f"{what}: unsupported schema version {d.get('v')!r}, expected {SCHEMA_VERSION}")


def program_from_dict(d: Mapping[str, Any]) -> Program:
    _check_version(d, "program")
    ops = tuple(_op_from_dict(o) for o in d["ops"])
    for i, u in enumerate(ops):
        if u.seq != i:
            raise ModelError(f"program: op at position {i} has seq {u.seq}")
        bad = sorted(x for x in u.deps if x >= i or x < 0)
        if bad:
            raise ModelError(f"program: seq {i}: dependence on {bad} is not an older µop")
    program = Program(ops, d.get("label", ""))
    _check_timers(program)
    return program


def config_to_dict(config: CoreConfig) -> dict[str, Any]:
    return {
        "v": SCHEMA_VERSION,
        "rob_size": config.rob_size,
        "scheduler_size": config.scheduler_size,
        "dispatch_width": config.dispatch_width,
        "retire_width": config.retire_width,
        "ports": [{"port_id": p.port_id, "kinds": sorted(p.kinds)} for p in config.ports],
        "fus": [
            {
                "kind": f.kind,
                "count": f.count,
                "stages": [{"latency": s.latency, "pipelined": s.pipelined} for s in f.stages],
            }
            for f in config.fus
        ],
        "policy": config.policy.value,
        "resteer_delay": config.resteer_delay,
    }


def config_from_dict(d: Mapping[str, Any]) -> CoreConfig:
    _check_version(d, "core config")
    try:
        return CoreConfig(
            rob_size=int(d["rob_size"]),
            scheduler_size=int(d["scheduler_size"]),
            dispatch_width=int(d["dispatch_width"]),
            retire_width=int(d["retire_width"]),
            ports=tuple(Port(int(p["port_id"]), frozenset(p["kinds"])) for p in d["ports"]),
            fus=tuple(
                FunctionalUnitSpec(
                    f["kind"],
                    tuple(StageSpec(int(s["latency"]), bool(s["pipelined"])) for s in f["stages"]),
                    int(f.get("count", 1)),
                )
                for f in d["fus"]
            ),
            policy=SchedulerPolicy(d.get("policy", SchedulerPolicy.OLDEST_FIRST_READY.value)),
            resteer_delay=int(d.get("resteer_delay", 1)),
        )
    except KeyError as exc:
        raise ModelError(f"core config: missing field {exc.args[0]!r}") from None


def dumps(obj: Program | CoreConfig) -> str:
    if isinstance(obj, Program):
        return json.dumps(program_to_dict(obj), indent=2)
    return json.dumps(config_to_dict(obj), indent=2)
