import random
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rewindsim.analysis import calibrate, rates, split_by_bit
from rewindsim.channel import (
    BitSamples,
    ChannelParams,
    NoiseModel,
    attack_footprint,
    channel_config,
    channel_times,
    gen_appendix_example,
    gen_channel_program,
    gen_fig4_scenario,
    samples_to_csv,
    transmit,
)
from rewindsim.core import ModelError, OpClass, Program, default_config
from rewindsim.sim import run

LADDER = (3, 6, 9, 12, 15, 24)


def times(n, preset="skylake_divsd", **core):
    p = ChannelParams(n_recv_divs=n, fu_preset=preset)
    return channel_times(p, channel_config(p, default_config(**core) if core else None))


def test_channel_program_structure(skylake_params):
    p = gen_channel_program(1, skylake_params)
    ops = p.ops
    assert ops[0].op is OpClass.TIMER_START
    recv = ops[1:13]
    assert all(u.op is OpClass.FP_DIV for u in recv)
    assert all(set(u.deps) == {u.seq - 1} for u in recv[1:])
    outer = ops[13]
    assert outer.op is OpClass.BRANCH and set(outer.deps) == {12}
    assert outer.branch.predicted and not outer.branch.actual
    assert [a.op for a in outer.branch.alt_path] == [OpClass.TIMER_STOP]
    assert ops[14].op is OpClass.LOAD
    inner = ops[15]
    assert set(inner.deps) == {14} and not inner.branch.predicted and inner.branch.actual
    senders = inner.branch.alt_path
    assert len(senders) == skylake_params.sender_count()
    assert all(s.op is OpClass.FP_DIV and not s.deps for s in senders)
    # bit 0: same filler footprint, inner branch predicted correctly
    p0 = gen_channel_program(0, skylake_params)
    assert not p0.ops[15].branch.mispredicted
    assert len(p0.ops) == len(p.ops)
    assert all(u.op is OpClass.INT_ALU for u in p0.ops[16:])


def test_channel_rejects_empty_receiver():
    with pytest.raises(ModelError, match="n_recv_divs"):
        ChannelParams(n_recv_divs=0)


def test_channel_rejects_bad_bit(skylake_params):
    with pytest.raises(ModelError):
        gen_channel_program(2, skylake_params)


def test_bit0_equals_sender_free_baseline(skylake_params, skylake_config):
    no_send = replace(skylake_params, n_send_divs=0)
    base = run(gen_channel_program(1, no_send), skylake_config).attack_time
    assert run(gen_channel_program(0, skylake_params), skylake_config).attack_time == base


def test_bit1_slower_than_bit0():
    t0, t1 = times(12)
    assert t1 > t0


def test_short_window_gives_smaller_difference():
    d3 = np.subtract(*times(3)[::-1])
    d12 = np.subtract(*times(12)[::-1])
    assert 0 <= d3 < d12


def test_monotone_window():
    rows = [times(n) for n in LADDER]
    zeros = [t0 for t0, _ in rows]
    diffs = [t1 - t0 for t0, t1 in rows]
    assert zeros == sorted(zeros)
    assert diffs == sorted(diffs)


def test_haswell_divider_phase_aligned():
    # latency 16 = 2 x initiation interval 8: each sender fits exactly in the
    # gap between dependent receivers, so the deterministic model shows no delay
    t0, t1 = times(12, "haswell_divsd")
    assert t1 == t0


def test_sender_direction(skylake_params, skylake_config):
    t = run(gen_channel_program(1, skylake_params), skylake_config)
    receivers = [t[s] for s in range(1, 13)]
    senders = [r for r in t.records if r.op is OpClass.FP_DIV and r.seq > 13]
    issued = [s for s in senders if s.issue_cycle is not None]
    assert issued
    for s in senders:
        assert s.transient
    for s in issued:
        assert any(s.issue_cycle < r.complete_cycle for r in receivers)


def test_inclusivity(skylake_params, skylake_config):
    t = run(gen_channel_program(1, skylake_params), skylake_config)
    start = next(r for r in t.records if r.op is OpClass.TIMER_START)
    stop = next(r for r in t.records if r.op is OpClass.TIMER_STOP)
    outer_squash = t[14].squash_cycle
    issued = [r.issue_cycle for r in t.records if r.seq > 13 and r.op is OpClass.FP_DIV and r.issue_cycle is not None]
    assert start.retire_cycle < min(issued)
    assert stop.retire_cycle > outer_squash


def _permuted(program: Program, seed: int, inner_seq: int) -> Program:
    inner = program.ops[inner_seq]
    alt = list(inner.branch.alt_path)
    random.Random(seed).shuffle(alt)
    alt = tuple(replace(a, seq=i) for i, a in enumerate(alt))
    ops = list(program.ops)
    ops[inner_seq] = replace(inner, branch=replace(inner.branch, alt_path=alt))
    return replace(program, ops=tuple(ops))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_sender_permutation_invariance(seed):
    params = ChannelParams(n_recv_divs=9)
    config = channel_config(params)
    p = gen_channel_program(1, params)
    assert run(_permuted(p, seed, params.n_recv_divs + 3), config).attack_time == run(p, config).attack_time


# --- contention scenarios ----------------------------------------------------

def _delta(variant):
    return run(*gen_fig4_scenario(variant)).attack_time - run(*gen_fig4_scenario(variant, attacker=False)).attack_time


def test_fig4_ready_victim_pipelined():
    assert _delta("a") == 0
    p, c = gen_fig4_scenario("a")
    t = run(p, c)
    victim, attacker = t[1], t[3]
    assert victim.issue_cycle == attacker.issue_cycle - 1
    assert victim.dispatch_cycle == attacker.dispatch_cycle


def test_fig4_waiting_victim_pipelined():
    assert _delta("b") == 0
    t = run(*gen_fig4_scenario("b"))
    assert t[4].issue_cycle == t[2].issue_cycle - 1


def test_fig4_waiting_victim_not_pipelined():
    assert _delta("c") > 0
    t = run(*gen_fig4_scenario("c"))
    assert t[4].issue_cycle < t[2].issue_cycle


def test_unknown_fig4_variant():
    with pytest.raises(ModelError):
        gen_fig4_scenario("d")


def test_appendix_plus_four():
    hit = run(*gen_appendix_example(True))
    base = run(*gen_appendix_example(False))
    assert hit.attack_time == base.attack_time + 4
    assert hit[2].issue_cycle - base[2].issue_cycle == 2


def test_appendix_structure():
    p, c = gen_appendix_example()
    assert c.fu("fp_div").stages == (
        (c.fu("fp_div").stages[0]),
        (c.fu("fp_div").stages[1]),
    )
    assert [u.op for u in p.ops[1:4]] == [OpClass.FP_DIV] * 3
    attackers = p.ops[6].branch.alt_path
    assert len(attackers) == 2 and all(not a.deps for a in attackers)


# --- transmission -----------------------------------------------------------------

def test_transmit_noise_free_trials_identical(skylake_params, skylake_config):
    out = transmit(skylake_params, skylake_config, NoiseModel(), seed=3)
    assert [bs.bit for bs in out] == [0, 1]
    for bs in out:
        assert len(bs.samples) == 1000 and len(set(bs.samples)) == 1
    assert out[0].samples[0] < out[1].samples[0]


def test_transmit_order_follows_secret(skylake_config):
    params = ChannelParams(secret_bits="110100", trials_per_bit=3)
    out = transmit(params, skylake_config)
    assert "".join(str(b.bit) for b in out) == "110100"


def test_uniform_noise_below_separation_is_error_free(skylake_params, skylake_config):
    t0, t1 = channel_times(skylake_params, skylake_config)
    noise = NoiseModel("uniform", 0, t1 - t0 - 1)
    out = transmit(skylake_params, skylake_config, noise, seed=11)
    zeros, ones = split_by_bit(out)
    assert min(zeros) >= t0 and min(ones) >= t1
    st_ = rates(out, calibrate(zeros, ones))
    assert st_.errors == 0


def test_noise_is_seeded(skylake_params, skylake_config):
    noise = NoiseModel.parse("gaussian:6")
    a = transmit(skylake_params, skylake_config, noise, seed=5)
    b = transmit(skylake_params, skylake_config, noise, seed=5)
    c = transmit(skylake_params, skylake_config, noise, seed=6)
    assert a == b and a != c
    t0, _ = channel_times(skylake_params, skylake_config)
    assert min(a[0].samples) >= t0


def test_noise_stream_independent_of_message_prefix(skylake_config):
    # bit i's jitter depends only on (seed, i)
    noise = NoiseModel("uniform", 0, 9)
    a = transmit(ChannelParams(secret_bits="01", trials_per_bit=50), skylake_config, noise, 4)
    b = transmit(ChannelParams(secret_bits="11", trials_per_bit=50), skylake_config, noise, 4)
    assert a[1] == b[1]


@pytest.mark.parametrize("text,expected", [
    ("none", NoiseModel()),
    ("uniform:0:40", NoiseModel("uniform", 0, 40)),
    ("gaussian:2.5", NoiseModel("gaussian", sigma=2.5)),
])
def test_noise_parse(text, expected):
    assert NoiseModel.parse(text) == expected
    assert str(expected) == text


@pytest.mark.parametrize("text", ["uniform:5", "gauss:1", "uniform:9:2", "none:1"])
def test_noise_parse_errors(text):
    with pytest.raises(ModelError):
        NoiseModel.parse(text)


def test_samples_csv():
    text = samples_to_csv([BitSamples(0, (5, 6)), BitSamples(1, (9,))], header="# h\n")
    assert text.splitlines() == ["# h", "bit_index,bit,trial,cycles", "0,0,0,5", "0,0,1,6", "1,1,0,9"]


# --- mitigations and ROB fit ----------------------------------------------------------

@pytest.mark.parametrize("n", LADDER)
def test_strict_in_order_kills_channel(n):
    t0, t1 = times(n, policy="StrictInOrder")
    assert t0 == t1


@pytest.mark.parametrize("n", LADDER)
def test_fully_pipelined_divider_kills_channel(n):
    t0, t1 = times(n, "fully_pipelined_divsd")
    assert t0 == t1


@pytest.mark.parametrize("n", (3, 9, 12))
def test_rob_below_footprint_kills_channel(n):
    params = ChannelParams(n_recv_divs=n)
    for rob in range(2, attack_footprint(params)):
        config = channel_config(params, default_config(rob_size=rob, scheduler_size=rob))
        t0, t1 = channel_times(params, config)
        assert t0 == t1, rob


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(0, 3), st.integers(0, 5))
def test_pipelined_unit_no_harm(n_recv, senders_per_recv, extra):
    # removing the transient senders never moves a retired µop on a fully pipelined unit
    params = ChannelParams(n_recv_divs=n_recv, fu_preset="fully_pipelined_divsd",
                           n_send_divs=n_recv * senders_per_recv + extra)
    config = channel_config(params)
    with_senders = run(gen_channel_program(1, params), config)
    stripped = run(gen_channel_program(1, replace(params, n_send_divs=0)), config)
    for seq in range(0, n_recv + 2):
        assert with_senders[seq].complete_cycle == stripped[seq].complete_cycle
    assert with_senders.attack_time == stripped.attack_time
