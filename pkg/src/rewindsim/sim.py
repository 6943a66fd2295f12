"""Deterministic cycle-level out-of-order core.

Each cycle runs five phases in a fixed order: branch resolution (and squash),
select/issue, stage advance/completion, dispatch, retire. Functional-unit
occupancy is tracked as reserved stage intervals, so a non-pipelined stage
entered at cycle ``t`` with latency ``L`` accepts its next µop at ``t + L``.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field

from .core import (
    CoreConfig,
    FunctionalUnitSpec,
    MicroOp,
    ModelError,
    OpClass,
    Program,
    SchedulerPolicy,
)

DEFAULT_MAX_CYCLES = 1_000_000

# tie order inside one cycle
EVENT_ORDER = {"resolve": 0, "squash": 1, "issue": 2, "complete": 3, "dispatch": 4, "retire": 5}


class SimulationError(RuntimeError):
    pass


@dataclass
class UopRecord:
    seq: int
    op: OpClass
    fu_kind: str | None
    dispatch_cycle: int
    issue_cycle: int | None = None
    complete_cycle: int | None = None
    retire_cycle: int | None = None
    squash_cycle: int | None = None
    stage_entries: tuple[int, ...] = ()
    resolve_cycle: int | None = None
    mispredicted: bool = False

    @property
    def transient(self) -> bool:
        return self.squash_cycle is not None

    @property
    def end_cycle(self) -> int | None:
        """First cycle the µop no longer occupies its unit."""
        if self.squash_cycle is not None:
            if self.complete_cycle is not None:
                return self.complete_cycle
            return self.squash_cycle + 1
        return self.complete_cycle


@dataclass
class Trace:
    records: list[UopRecord]
    attack_time: int | None
    total_cycles: int
    events: list[tuple[int, str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_seq = {r.seq: r for r in self.records}

    def __getitem__(self, seq: int) -> UopRecord:
        return self._by_seq[seq]

    def __contains__(self, seq: int) -> bool:
        return seq in self._by_seq

    def retired(self) -> list[UopRecord]:
        return [r for r in self.records if r.retire_cycle is not None]

    def transients(self) -> list[UopRecord]:
        return [r for r in self.records if r.transient]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "op", "dispatch", "issue", "complete", "retire", "squash", "transient"])
        for r in self.records:
            w.writerow([
                r.seq, r.op.value, r.dispatch_cycle,
                _blank(r.issue_cycle), _blank(r.complete_cycle),
                _blank(r.retire_cycle), _blank(r.squash_cycle),
                int(r.transient),
            ])
        return buf.getvalue()


def _blank(v: int | None) -> str | int:
    return "" if v is None else v


class _Unit:
    """One functional-unit instance: reserved [start, end, seq) per stage."""

    def __init__(self, spec: FunctionalUnitSpec) -> None:
        self.spec = spec
        self.stages: list[list[list[int]]] = [[] for _ in spec.stages]

    def _free(self, k: int, start: int, end: int) -> bool:
        return all(e <= start or s >= end for s, e, _ in self.stages[k])

    def plan(self, cycle: int) -> list[int] | None:
        """Stage entry cycles for a µop issued now, or None if it cannot enter."""
        stages = self.spec.stages
        if not self._free(0, cycle, cycle + 1):
            return None
        entries = [cycle]
        for k in range(1, len(stages)):
            t = entries[-1] + stages[k - 1].latency
            span = 1 if stages[k].pipelined else stages[k].latency
            while not self._free(k, t, t + span):
                t += 1
            entries.append(t)
        for k, st in enumerate(stages):
            if st.pipelined:
                continue
            exit_ = entries[k + 1] if k + 1 < len(stages) else entries[k] + st.latency
            if not self._free(k, entries[k], exit_):
                return None
        return entries

    def reserve(self, entries: list[int], seq: int) -> int:
        stages = self.spec.stages
        for k, st in enumerate(stages):
            if st.pipelined:
                end = entries[k] + 1
            else:
                end = entries[k + 1] if k + 1 < len(stages) else entries[k] + st.latency
            self.stages[k].append([entries[k], end, seq])
        return entries[-1] + stages[-1].latency

    def vacate(self, seqs: set[int], cycle: int) -> None:
        # squashed µops leave at the start of the next cycle
        for k, intervals in enumerate(self.stages):
            kept = []
            for iv in intervals:
                if iv[2] in seqs:
                    if iv[0] > cycle:
                        continue
                    iv[1] = min(iv[1], cycle + 1)
                kept.append(iv)
            self.stages[k] = kept


@dataclass
class _Entry:
    uop: MicroOp
    rec: UopRecord
    in_sched: bool = False
    resolved: bool = False

    @property
    def seq(self) -> int:
        return self.uop.seq


class Simulator:
    """Single-use simulation instance; call :meth:`run` once."""

    def __init__(self, program: Program, config: CoreConfig, max_cycles: int = DEFAULT_MAX_CYCLES):
        missing = program.fu_kinds() - {f.kind for f in config.fus}
        if missing:
            raise ModelError(f"program uses FU kinds absent from config: {sorted(missing)}")
        reachable = set().union(*(p.kinds for p in config.ports)) if config.ports else set()
        unreachable = program.fu_kinds() - reachable
        if unreachable:
            raise ModelError(f"no issue port reaches FU kinds {sorted(unreachable)}")
        self.program = program
        self.config = config
        self.max_cycles = max_cycles
        self.units = {f.kind: [_Unit(f) for _ in range(f.count)] for f in config.fus}
        self.fetch: deque[MicroOp] = deque(program.ops)
        self.fetch_resume = 0
        self.next_seq = len(program.ops)
        self.rob: list[_Entry] = []
        self.entries: dict[int, _Entry] = {}
        self.cycle = 0

    # -- phases ---------------------------------------------------------------

    def _resolve(self) -> None:
        for e in list(self.rob):
            if e.uop.op is not OpClass.BRANCH or e.resolved:
                continue
            done = e.rec.complete_cycle
            if done is None or done > self.cycle:
                continue
            e.resolved = True
            e.rec.resolve_cycle = self.cycle
            if e.uop.branch is not None and e.uop.branch.mispredicted:
                self._squash(e)
                return

    def squash_set(self, branch_seq: int) -> set[int]:
        """Seqs a mispredict of ``branch_seq`` removes: younger, dispatched, unretired."""
        e = self.entries.get(branch_seq)
        if e is None or e.uop.branch is None or not e.uop.branch.mispredicted:
            raise SimulationError(f"seq {branch_seq} is not a mispredicted branch")
        return {x.seq for x in self.rob if x.seq > branch_seq}

    def _squash(self, branch: _Entry) -> None:
        victims = self.squash_set(branch.seq)
        for x in self.rob:
            if x.seq in victims:
                x.rec.squash_cycle = self.cycle
                if x.rec.complete_cycle is not None and x.rec.complete_cycle > self.cycle:
                    x.rec.complete_cycle = None
        self.rob = [x for x in self.rob if x.seq not in victims]
        for units in self.units.values():
            for u in units:
                u.vacate(victims, self.cycle)
        # re-steer onto the alternate path with fresh sequence numbers
        base = self.next_seq
        alt = branch.uop.branch.alt_path
        self.fetch = deque(
            MicroOp(base + a.seq, a.op, frozenset(base + d for d in a.deps), a.fu_kind, a.branch)
            for a in alt
        )
        self.next_seq = base + len(alt)
        self.fetch_resume = self.cycle + self.config.resteer_delay

    def _ready(self, e: _Entry) -> bool:
        for d in e.uop.deps:
            dep = self.entries[d]
            c = dep.rec.complete_cycle
            if c is None or c > self.cycle:
                return False
        return True

    def _issue(self) -> None:
        used_ports: set[int] = set()
        strict = self.config.policy is SchedulerPolicy.STRICT_IN_ORDER
        older_all_issued = True
        for e in self.rob:
            if e.uop.op.is_timer:
                continue
            if e.rec.issue_cycle is not None:
                continue
            can = e.in_sched and (older_all_issued or not strict) and self._ready(e)
            if can:
                can = self._try_issue(e, used_ports)
            if not can:
                older_all_issued = False

    def _try_issue(self, e: _Entry, used_ports: set[int]) -> bool:
        kind = e.uop.fu_kind
        rec = e.rec
        if kind is None:
            rec.issue_cycle = self.cycle
            rec.complete_cycle = self.cycle + (1 if e.uop.op is OpClass.BRANCH else 0)
            e.in_sched = False
            return True
        # prefer the most specialised free port so shared ports stay available
        free = [p for p in self.config.ports if kind in p.kinds and p.port_id not in used_ports]
        if not free:
            return False
        port = min(free, key=lambda p: (len(p.kinds), p.port_id))
        for unit in self.units[kind]:
            plan = unit.plan(self.cycle)
            if plan is not None:
                rec.complete_cycle = unit.reserve(plan, e.seq)
                rec.issue_cycle = self.cycle
                rec.stage_entries = tuple(plan)
                used_ports.add(port.port_id)
                e.in_sched = False
                return True
        return False

    def _dispatch(self) -> None:
        if self.cycle >= self.fetch_resume:
            n = 0
            while self.fetch and n < self.config.dispatch_width and len(self.rob) < self.config.rob_size:
                uop = self.fetch.popleft()
                rec = UopRecord(uop.seq, uop.op, uop.fu_kind, self.cycle)
                rec.mispredicted = uop.branch is not None and uop.branch.mispredicted
                e = _Entry(uop, rec)
                self.rob.append(e)
                self.entries[uop.seq] = e
                n += 1
        waiting = sum(1 for e in self.rob if e.in_sched)
        for e in self.rob:
            if waiting >= self.config.scheduler_size:
                break
            if not e.in_sched and e.rec.issue_cycle is None and not e.uop.op.is_timer:
                e.in_sched = True
                waiting += 1

    def _retire(self) -> None:
        n = 0
        while self.rob and n < self.config.retire_width:
            head = self.rob[0]
            rec = head.rec
            if head.uop.op.is_timer:
                # serializing: executes once everything older has retired
                rec.issue_cycle = rec.complete_cycle = self.cycle
            elif rec.complete_cycle is None or rec.complete_cycle > self.cycle:
                break
            rec.retire_cycle = self.cycle
            self.rob.pop(0)
            n += 1

    # -- driver ---------------------------------------------------------------

    @property
    def done(self) -> bool:
        return not self.fetch and not self.rob

    def step(self) -> None:
        """Advance one cycle."""
        if self.cycle > self.max_cycles:
            raise SimulationError(f"exceeded {self.max_cycles} cycles without draining")
        self._resolve()
        self._issue()
        self._dispatch()
        self._retire()
        self.cycle += 1

    def run(self) -> Trace:
        while not self.done:
            self.step()
        return self._trace()

    def _trace(self) -> Trace:
        return make_trace(e.rec for e in self.entries.values())


def make_trace(records) -> Trace:
    """Assemble a Trace (events, attack time, total cycles) from records."""
    records = sorted(records, key=lambda r: r.seq)
    events: list[tuple[int, str, int]] = []
    for r in records:
        events.append((r.dispatch_cycle, "dispatch", r.seq))
        for kind, cyc in (
            ("issue", r.issue_cycle),
            ("complete", r.complete_cycle),
            ("resolve", r.resolve_cycle),
            ("retire", r.retire_cycle),
            ("squash", r.squash_cycle),
        ):
            if cyc is not None:
                events.append((cyc, kind, r.seq))
    events.sort(key=lambda ev: (ev[0], EVENT_ORDER[ev[1]], ev[2]))
    start = stop = None
    for r in records:
        if r.op is OpClass.TIMER_START and r.retire_cycle is not None:
            start = r.retire_cycle
        elif r.op is OpClass.TIMER_STOP and r.retire_cycle is not None:
            stop = r.retire_cycle
    attack = stop - start if start is not None and stop is not None else None
    total = events[-1][0] if events else 0
    return Trace(records, attack, total, events)


def run(program: Program, config: CoreConfig, max_cycles: int = DEFAULT_MAX_CYCLES) -> Trace:
    """Simulate ``program`` on ``config`` and return its lifecycle trace."""
    return Simulator(program, config, max_cycles).run()
