"""Command-line driver: scenarios, transmission, sweeps and classification.

Exit codes: 0 success, 1 runtime error, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import analysis
from .channel import (
    APPENDIX_VICTIMS,
    ChannelParams,
    NoiseModel,
    channel_config,
    channel_times,
    gen_appendix_example,
    gen_channel_program,
    gen_fig4_scenario,
    samples_to_csv,
    transmit,
)
from .core import (
    SCHEMA_VERSION,
    CoreConfig,
    ModelError,
    SchedulerPolicy,
    config_from_dict,
    config_to_dict,
    default_config,
)
from .diagram import render_diagram
from .fixtures import forward_stateful_fixture
from .sim import SimulationError, run

SCENARIOS = ("fig4a", "fig4b", "fig4c", "appendix", "channel0", "channel1")
CLASSIFY_SCENARIOS = SCENARIOS + ("forward_stateful_fixture",)
DEFAULT_LENGTHS = "3,6,9,12,15,24,48,72"
POLICIES = {"oldest-first": SchedulerPolicy.OLDEST_FIRST_READY,
            "strict-in-order": SchedulerPolicy.STRICT_IN_ORDER}


class ConfigError(ValueError):
    """Malformed experiment config or flags; maps to exit status 2."""


@dataclass
class ExperimentConfig:
    core: CoreConfig
    channel: ChannelParams
    noise: NoiseModel
    seed: int | None
    outputs: Path
    scenario: str = "channel1"

    def digest(self) -> str:
        blob = json.dumps(
            {
                "core": config_to_dict(self.core),
                "channel": asdict(self.channel),
                "noise": str(self.noise),
                "seed": self.seed,
                "scenario": self.scenario,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def header(self) -> str:
        return f"# rewindsim schema_v={SCHEMA_VERSION} seed={self.seed} config={self.digest()}\n"


def _field(d: dict, name: str, kind: type, default: Any = None) -> Any:
    if name not in d:
        return default
    try:
        return kind(d[name])
    except (TypeError, ValueError):
        raise ConfigError(f"config field {name!r}: expected {kind.__name__}, got {d[name]!r}") from None


def load_experiment(path: str | None) -> ExperimentConfig:
    """Parse a JSON experiment config; every field is optional."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if raw.get("v", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"config field 'v': unsupported schema version {raw.get('v')!r}")
    ch = raw.get("channel", {})
    if not isinstance(ch, dict):
        raise ConfigError("config field 'channel': expected an object")
    try:
        channel = ChannelParams(
            n_recv_divs=_field(ch, "n_recv_divs", int, 12),
            n_send_divs=_field(ch, "n_send_divs", int, None),
            fu_preset=_field(ch, "fu_preset", str, "skylake_divsd"),
            secret_bits=_field(ch, "secret_bits", str, "01"),
            trials_per_bit=_field(ch, "trials_per_bit", int, 1000),
        )
        core_raw = raw.get("core", "skylake")
        if core_raw == "skylake":
            core = default_config()
        elif isinstance(core_raw, dict):
            core = config_from_dict({"v": SCHEMA_VERSION, **core_raw})
        else:
            raise ConfigError(f"config field 'core': expected 'skylake' or an object, got {core_raw!r}")
        noise = NoiseModel.parse(_field(raw, "noise", str, "none"))
    except ModelError as exc:
        raise ConfigError(f"config: {exc}") from None
    scenario = _field(raw, "scenario", str, "channel1")
    if scenario not in CLASSIFY_SCENARIOS:
        raise ConfigError(f"config field 'scenario': unknown scenario {scenario!r}")
    return ExperimentConfig(
        core=core,
        channel=channel,
        noise=noise,
        seed=_field(raw, "seed", int, None),
        outputs=Path(_field(raw, "outputs", str, "out")),
        scenario=scenario,
    )


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _bits(value: str) -> str:
    if value.startswith("@"):
        try:
            value = Path(value[1:]).read_text()
        except OSError as exc:
            raise ConfigError(f"--bits: cannot read {value[1:]}: {exc.strerror}") from None
    bits = "".join(value.split())
    if not bits or any(b not in "01" for b in bits):
        raise ConfigError(f"--bits: expected a non-empty 0/1 string, got {value!r}")
    return bits


def _apply_flags(exp: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    ch = exp.channel
    try:
        if getattr(args, "bits", None):
            ch = replace(ch, secret_bits=_bits(args.bits))
        if getattr(args, "trials", None) is not None:
            ch = replace(ch, trials_per_bit=args.trials)
        if getattr(args, "recv_divs", None) is not None:
            ch = replace(ch, n_recv_divs=args.recv_divs)
        if getattr(args, "preset", None):
            ch = replace(ch, fu_preset=args.preset)
        noise = NoiseModel.parse(args.noise) if getattr(args, "noise", None) else exp.noise
    except ModelError as exc:
        raise ConfigError(str(exc)) from None
    core = exp.core
    if getattr(args, "policy", None):
        core = replace(core, policy=POLICIES[args.policy])
    seed = args.seed if getattr(args, "seed", None) is not None else exp.seed
    out = Path(args.out) if getattr(args, "out", None) else exp.outputs
    return replace(exp, channel=ch, core=core, noise=noise, seed=seed, outputs=out)


def _require_seed(exp: ExperimentConfig) -> int:
    if exp.seed is None:
        raise ConfigError("a seed is required: pass --seed or set 'seed' in the config")
    return exp.seed


# --- commands ---------------------------------------------------------------

def _scenario_pair(name: str, exp: ExperimentConfig):
    """(program, config, baseline program, baseline config) for a scenario."""
    if name.startswith("fig4"):
        p, c = gen_fig4_scenario(name[-1])
        bp, bc = gen_fig4_scenario(name[-1], attacker=False)
    elif name == "appendix":
        p, c = gen_appendix_example(attack=True)
        bp, bc = gen_appendix_example(attack=False)
    else:
        c = bc = channel_config(exp.channel, exp.core)
        p = gen_channel_program(int(name[-1]), exp.channel)
        bp = gen_channel_program(0, exp.channel)
    return p, c, bp, bc


def cmd_run_scenario(args: argparse.Namespace) -> int:
    exp = _apply_flags(load_experiment(args.config), args)
    p, c, bp, bc = _scenario_pair(args.name, exp)
    trace = run(p, c)
    base = run(bp, bc)
    header = exp.header()
    _write(exp.outputs / f"{args.name}_trace.csv", header + trace.to_csv())
    _write(exp.outputs / f"{args.name}_diagram.txt", render_diagram(trace, args.width))
    print(f"scenario={args.name} attack_time={trace.attack_time} baseline={base.attack_time}")
    if trace.attack_time is not None and base.attack_time is not None:
        print(f"delta={trace.attack_time - base.attack_time:+d} cycles")
    if args.name == "appendix":
        for k, seq in enumerate(APPENDIX_VICTIMS):
            rec = trace[seq]
            ready = max((trace[d].complete_cycle for d in p.ops[seq].deps), default=rec.dispatch_cycle + 1)
            shift = rec.issue_cycle - base[seq].issue_cycle
            print(f"uop{k} issue shift={shift:+d} wait_after_ready={rec.issue_cycle - ready} cycles")
    if args.show:
        print(render_diagram(trace, args.width), end="")
    return 0


def cmd_transmit(args: argparse.Namespace) -> int:
    exp = _apply_flags(load_experiment(args.config), args)
    seed = _require_seed(exp)
    config = channel_config(exp.channel, exp.core)
    samples = transmit(exp.channel, config, exp.noise, seed)
    zeros, ones = analysis.split_by_bit(samples)
    header = exp.header()
    _write(exp.outputs / "samples.csv", samples_to_csv(samples, header))
    if zeros and ones:
        threshold = analysis.calibrate(zeros, ones)
    else:
        # single-valued message: no calibration possible, use the noise-free midpoint
        t0, t1 = channel_times(exp.channel, config)
        threshold = (t0 + t1) / 2
    stats = analysis.rates(samples, threshold)
    _write(exp.outputs / "calibration.json", json.dumps(
        {"v": SCHEMA_VERSION, "seed": seed, "config": exp.digest(), "threshold": threshold,
         "p99_0": stats.p99_0, "p1_1": stats.p1_1, "median0": stats.median0, "median1": stats.median1},
        indent=2, sort_keys=True) + "\n")
    _write(exp.outputs / "stats.csv", analysis.stats_to_csv(stats, header))
    for bit, group in ((0, zeros), (1, ones)):
        if group:
            hist = analysis.histogram(group, args.bin_width)
            _write(exp.outputs / f"histogram{bit}.csv", analysis.histogram_to_csv(hist, header))
    print(f"bits={len(samples)} trials_per_bit={exp.channel.trials_per_bit} threshold={threshold:g}")
    print(f"error_rate={stats.error_rate:.4f}")
    print(f"transfer_rate={float(stats.transfer_rate_bits_per_cycle):.6g} bits/cycle "
          f"({stats.transfer_rate_kbps:.1f} KB/s at nominal {stats.clock_hz / 1e9:g} GHz)")
    return 0


def _lengths(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--lengths: expected comma-separated positive integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"--lengths: expected comma-separated positive integers, got {text!r}")
    return values


def cmd_sweep(args: argparse.Namespace) -> int:
    lengths = _lengths(args.lengths)
    exp = _apply_flags(load_experiment(args.config), args)
    seed = _require_seed(exp)
    rows = analysis.sweep_receiver_length(lengths, exp.channel, exp.core, exp.noise, seed)
    _write(exp.outputs / "sweep.csv", analysis.sweep_to_csv(rows, exp.header()))
    print(f"{'#divs':>6} {'0':>7} {'1':>7} {'diff':>6} {'bits/cycle':>11} {'KB/s*':>8} {'error':>8}")
    for r in rows:
        print(f"{r.n_divs:>6} {r.median0:>7g} {r.median1:>7g} {r.diff:>6g} "
              f"{float(r.bits_per_cycle):>11.6f} {r.kbps:>8.1f} {r.error_rate:>8.4f}")
    diff_ok = analysis.non_decreasing([r.diff for r in rows])
    rate_ok = analysis.non_increasing([r.bits_per_cycle for r in rows])
    print(f"diff non-decreasing: {'yes' if diff_ok else 'no'}")
    print(f"transfer non-increasing: {'yes' if rate_ok else 'no'}")
    print("(* KB/s at nominal clock, illustrative only)")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    exp = _apply_flags(load_experiment(args.config), args)
    name = args.scenario or exp.scenario
    if name == "forward_stateful_fixture":
        program, trace = forward_stateful_fixture()
    else:
        program, config, _, _ = _scenario_pair(name, exp)
        trace = run(program, config)
    try:
        tax = analysis.classify(program, trace)
    except analysis.AnalysisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"scenario={name}")
    print(str(tax))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rewindsim",
        description="Cycle-level simulation of transient-execution contention covert channels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_positional: bool) -> None:
        if config_positional:
            p.add_argument("config", nargs="?", help="JSON experiment config (schema v1); defaults apply if omitted")
        else:
            p.add_argument("--config", help="JSON experiment config (schema v1)")
        p.add_argument("--out", help="output directory (default: config 'outputs' or ./out)")
        p.add_argument("--recv-divs", type=int, help="receiver chain length (dependent divisions)")
        p.add_argument("--preset", help="divider preset, e.g. skylake_divsd, fully_pipelined_divsd")
        p.add_argument("--policy", choices=sorted(POLICIES), help="scheduler policy")

    p = sub.add_parser("run-scenario", help="simulate one scenario and its baseline")
    p.add_argument("name", choices=SCENARIOS, help="scenario to run")
    common(p, config_positional=False)
    p.add_argument("--width", type=int, default=120, help="diagram width in columns (default 120)")
    p.add_argument("--show", action="store_true", help="also print the timing diagram")
    p.set_defaults(func=cmd_run_scenario)

    p = sub.add_parser("transmit", help="send secret bits through the channel and measure it")
    common(p, config_positional=True)
    p.add_argument("--bits", help="bit string to send, or @FILE to read it from a file")
    p.add_argument("--trials", type=int, help="trials per bit (default 1000)")
    p.add_argument("--noise", help="none | uniform:LO:HI | gaussian:SIGMA")
    p.add_argument("--seed", type=int, help="PRNG seed (required unless set in the config)")
    p.add_argument("--bin-width", type=int, default=1, help="histogram bin width in cycles (default 1)")
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("sweep", help="channel characteristics versus receiver length")
    common(p, config_positional=True)
    p.add_argument("--lengths", default=DEFAULT_LENGTHS, help=f"comma-separated lengths (default {DEFAULT_LENGTHS})")
    p.add_argument("--trials", type=int, help="trials per bit (default 1000)")
    p.add_argument("--noise", help="none | uniform:LO:HI | gaussian:SIGMA")
    p.add_argument("--seed", type=int, help="PRNG seed (required unless set in the config)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("classify", help="print the attack taxonomy of a scenario")
    common(p, config_positional=True)
    p.add_argument("--scenario", choices=CLASSIFY_SCENARIOS, help="override the config's scenario")
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (ModelError, SimulationError, analysis.AnalysisError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
