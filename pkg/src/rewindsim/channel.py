"""Experiment program generators and the bit transmission driver."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import (
    CoreConfig,
    ModelError,
    OpClass,
    Port,
    Program,
    ProgramBuilder,
    StageSpec,
    FunctionalUnitSpec,
    default_config,
    preset_fu,
)
from .sim import run

SENDER_MARGIN = 8


@dataclass(frozen=True)
class ChannelParams:
    n_recv_divs: int = 12
    n_send_divs: int | None = None
    fu_preset: str = "skylake_divsd"
    secret_bits: str = "01"
    trials_per_bit: int = 1000

    def __post_init__(self) -> None:
        if self.n_recv_divs < 1:
            raise ModelError("n_recv_divs must be >= 1: no speculation window otherwise")
        if self.n_send_divs is not None and self.n_send_divs < 0:
            raise ModelError("n_send_divs must be >= 0")
        if self.trials_per_bit < 1:
            raise ModelError("trials_per_bit must be >= 1")
        if any(b not in "01" for b in self.secret_bits):
            raise ModelError(f"secret_bits must be a 0/1 string, got {self.secret_bits!r}")
        preset_fu(self.fu_preset)

    def sender_count(self) -> int:
        """Senders needed to keep the divider busy for the whole window."""
        if self.n_send_divs is not None:
            return self.n_send_divs
        fu = preset_fu(self.fu_preset)
        ii = fu.initiation_interval
        window = self.n_recv_divs * (fu.total_latency + ii)
        return math.ceil(window / ii) + SENDER_MARGIN


@dataclass(frozen=True)
class BitSamples:
    bit: int
    samples: tuple[int, ...]


@dataclass(frozen=True)
class NoiseModel:
    """Additive integer jitter on measured attack time.

    ``kind`` is ``none``, ``uniform`` (inclusive ``lo..hi``) or ``gaussian``
    (``sigma``; draws are rounded and negative jitter is clipped to zero so
    samples never undercut the uncontended floor).
    """

    kind: str = "none"
    lo: int = 0
    hi: int = 0
    sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "uniform", "gaussian"):
            raise ModelError(f"unknown noise model {self.kind!r}")
        if self.kind == "uniform" and not 0 <= self.lo <= self.hi:
            raise ModelError("uniform noise needs 0 <= lo <= hi")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ModelError("gaussian sigma must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "NoiseModel":
        """Parse ``none``, ``uniform:LO:HI`` or ``gaussian:SIGMA``."""
        parts = text.split(":")
        try:
            if parts[0] == "none" and len(parts) == 1:
                return cls()
            if parts[0] == "uniform" and len(parts) == 3:
                return cls("uniform", lo=int(parts[1]), hi=int(parts[2]))
            if parts[0] == "gaussian" and len(parts) == 2:
                return cls("gaussian", sigma=float(parts[1]))
        except ValueError:
            pass
        raise ModelError(f"bad noise spec {text!r}; use none, uniform:LO:HI or gaussian:SIGMA")

    def __str__(self) -> str:
        if self.kind == "uniform":
            return f"uniform:{self.lo}:{self.hi}"
        if self.kind == "gaussian":
            return f"gaussian:{self.sigma:g}"
        return "none"

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.integers(self.lo, self.hi + 1, size=n)
        if self.kind == "gaussian":
            return np.maximum(np.rint(rng.normal(0.0, self.sigma, size=n)), 0).astype(np.int64)
        return np.zeros(n, dtype=np.int64)


def gen_channel_program(bit: int, params: ChannelParams) -> Program:
    """Receiver chain, mistrained outer branch, secret-dependent sender burst.

    The static stream is the predicted path: the outer branch is predicted
    taken so the load of the secret, the inner branch and the not-taken
    filler run transiently. For bit 1 the inner branch mispredicts and
    re-steers to independent divisions. The outer branch's real successor
    is the TimerStop.
    """
    if bit not in (0, 1):
        raise ModelError(f"bit must be 0 or 1, got {bit!r}")
    n_send = params.sender_count()
    b = ProgramBuilder(f"channel{bit}_r{params.n_recv_divs}")
    b.timer_start()
    prev = b.div()
    for _ in range(params.n_recv_divs - 1):
        prev = b.div(prev)
    b.branch(prev, predicted=True, actual=False, alt_path=[{"op": OpClass.TIMER_STOP}])
    secret = b.load()
    senders = [{"op": OpClass.FP_DIV} for _ in range(n_send)]
    b.branch(secret, predicted=False, actual=bool(bit), alt_path=senders)
    for _ in range(n_send):
        b.alu()
    return b.build()


def gen_fig4_scenario(variant: str, attacker: bool = True) -> tuple[Program, CoreConfig]:
    """Victim/attacker pair on a shared unit.

    a: both ready in the same cycle, pipelined unit.
    b: attacker ready one cycle before the victim, pipelined unit.
    c: attacker ready while the victim waits on a producer, unit with a
       3-cycle non-pipelined first stage.
    With ``attacker=False`` the attacker slot holds a Nop instead.
    """
    if variant not in ("a", "b", "c"):
        raise ModelError(f"unknown contention variant {variant!r}; use a, b or c")
    if variant == "c":
        unit = preset_fu("appendix_unit")
    else:
        unit = FunctionalUnitSpec("fp_div", (StageSpec(3, True), StageSpec(1, True)))
    config = CoreConfig(
        rob_size=32,
        scheduler_size=32,
        dispatch_width=8,
        retire_width=4,
        ports=(Port(0, frozenset({"fp_div"})), Port(1, frozenset({"int_alu"}))),
        fus=(unit, preset_fu("int_alu")),
        resteer_delay=1,
    )
    b = ProgramBuilder(f"fig4{variant}" + ("" if attacker else "_noattacker"))
    b.timer_start()
    if variant == "a":
        victim = b.div()
    else:
        producer = b.alu()
        victim = b.div(producer)
    b.branch(victim, predicted=True, actual=False, alt_path=[{"op": OpClass.TIMER_STOP}])
    if attacker:
        b.div()
    else:
        b.add(OpClass.NOP)
    return b.build(), config


APPENDIX_VICTIMS = (1, 2, 3)


def appendix_config() -> CoreConfig:
    # the re-steered attackers must reach the unit as soon as µop0 leaves
    # stage 1, so the alternate path dispatches in the resolution cycle
    return CoreConfig(
        rob_size=32,
        scheduler_size=32,
        dispatch_width=8,
        retire_width=4,
        ports=(
            Port(0, frozenset({"fp_div", "int_alu"})),
            Port(1, frozenset({"int_alu"})),
            Port(2, frozenset({"load"})),
        ),
        fus=(preset_fu("appendix_unit"), preset_fu("int_alu"), preset_fu("load")),
        resteer_delay=0,
    )


def gen_appendix_example(attack: bool = True) -> tuple[Program, CoreConfig]:
    """Three dependent victim divisions, two transient attacker divisions.

    seq 0 is the TimerStart, seqs 1-3 the victims (µop0..µop2 in the CLI
    output), seq 4 the mistrained branch. The bit test (load + branch) and
    two non-contending filler µops follow; with ``attack`` the bit branch
    mispredicts and re-steers to the two attacker divisions.
    """
    b = ProgramBuilder("appendix" + ("" if attack else "_noattack"))
    b.timer_start()
    v0 = b.div()
    v1 = b.div(v0)
    v2 = b.div(v1)
    b.branch(v2, predicted=True, actual=False, alt_path=[{"op": OpClass.TIMER_STOP}])
    bit = b.load()
    attackers = [{"op": OpClass.FP_DIV}, {"op": OpClass.FP_DIV}]
    b.branch(bit, predicted=False, actual=attack, alt_path=attackers)
    b.alu()
    b.alu()
    return b.build(), appendix_config()


def channel_config(params: ChannelParams, base: CoreConfig | None = None) -> CoreConfig:
    """``base`` (default Skylake-like core) with the params' divider preset."""
    config = base or default_config()
    return config.replace_fu(preset_fu(params.fu_preset))


def channel_times(params: ChannelParams, config: CoreConfig) -> tuple[int, int]:
    """Noise-free attack time for bit 0 and bit 1."""
    times = []
    for bit in (0, 1):
        t = run(gen_channel_program(bit, params), config).attack_time
        if t is None:
            raise ModelError("channel program did not retire both timers")
        times.append(t)
    return times[0], times[1]


def transmit(
    params: ChannelParams,
    config: CoreConfig,
    noise: NoiseModel = NoiseModel(),
    seed: int = 0,
) -> list[BitSamples]:
    """Send ``params.secret_bits`` through the simulated channel.

    The simulator is deterministic, so each bit value is simulated once and
    reused for every trial; noise for bit ``i`` comes from a PRNG stream
    keyed on ``(seed, i)`` so results do not depend on evaluation order.
    """
    base = dict(zip((0, 1), channel_times(params, config)))
    out = []
    for i, ch in enumerate(params.secret_bits):
        bit = int(ch)
        rng = np.random.default_rng([seed, i])
        jitter = noise.draw(rng, params.trials_per_bit)
        out.append(BitSamples(bit, tuple(int(base[bit] + j) for j in jitter)))
    return out


def samples_to_csv(samples: Sequence[BitSamples], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bit_index", "bit", "trial", "cycles"])
    for i, bs in enumerate(samples):
        for t, c in enumerate(bs.samples):
            w.writerow([i, bs.bit, t, c])
    return buf.getvalue()


def with_preset(params: ChannelParams, preset: str) -> ChannelParams:
    return replace(params, fu_preset=preset)


def attack_footprint(params: ChannelParams) -> int:
    """ROB entries needed to hold the receiver chain, outer branch, secret
    load, inner branch and one sender at the same time."""
    return params.n_recv_divs + 4
