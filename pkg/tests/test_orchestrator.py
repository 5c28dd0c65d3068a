import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from coadapt.errors import ConfigurationError, ValidationError
from coadapt.orchestrator import (AUDIT_HEADER, NOOP, RECONFIGURE, SCALE_BS, AuditLog, ClockState, Command,
                                  OrchestratorConfig, apply_command, decide, record_reconfig)
from coadapt.profile import Candidate, ConfigTuple, ParallelStrategy, feasible_candidates
from coadapt.scenarios import standard_profile

A = ParallelStrategy(2, 1, 4)
B = ParallelStrategy(8, 1, 1)
CUR = ConfigTuple(A, 16, 1)
FRESH = ClockState(1000.0, 1000.0)


def cand(s, bg, t, bm=1):
    return Candidate(ConfigTuple(s, bg, bm), t)


def scale_case(target_score):
    # phi=0, ref=16: score(B=16) = T/16, score(B=32) = T*sqrt(2)/32
    return [cand(A, 16, 1600.0), cand(A, 32, target_score * 32 / math.sqrt(2))]


def test_margin_nine_percent_noop():
    cmd = decide(scale_case(109.0), 0.0, CUR, FRESH, OrchestratorConfig())
    assert cmd.kind == NOOP and cmd.current_score == 100.0
    assert cmd.winner_score == pytest.approx(109.0, rel=1e-12)


def test_margin_fifteen_percent_scale():
    cmd = decide(scale_case(115.0), 0.0, CUR, FRESH, OrchestratorConfig())
    assert cmd.kind == SCALE_BS and cmd.config == ConfigTuple(A, 32, 1)


def penalty_case():
    return [cand(A, 16, 1600.0), cand(B, 16, 2080.0)]  # raw 100 and 130


def test_penalized_reconfigure():
    cmd = decide(penalty_case(), 0.0, CUR, ClockState(1000.0, 1000.0), OrchestratorConfig(reconfig_cost=50.0))
    assert cmd.kind == RECONFIGURE and cmd.config.strategy == B and cmd.penalized
    assert cmd.winner_score == pytest.approx(130.0 * 1000.0 / 1050.0, rel=1e-15)
    assert round(cmd.winner_score, 1) == 123.8


def test_early_training_noop():
    cmd = decide(penalty_case(), 0.0, CUR, ClockState(30.0, 30.0), OrchestratorConfig(reconfig_cost=50.0))
    assert cmd.kind == NOOP and cmd.winner_score == 100.0
    # the penalized candidate scored 130 * 30 / 80
    assert 130.0 * 30.0 / 80.0 == 48.75


def test_phi_unavailable_and_empty():
    assert decide(penalty_case(), None, CUR, FRESH, OrchestratorConfig()).reason == "gns unavailable"
    assert decide(penalty_case(), math.nan, CUR, FRESH, OrchestratorConfig()).is_noop
    with pytest.raises(ConfigurationError):
        decide([], 1.0, CUR, FRESH, OrchestratorConfig())


def test_current_missing_needs_throughput():
    cands = [cand(A, 32, 100.0)]
    with pytest.raises(ConfigurationError):
        decide(cands, 1.0, CUR, FRESH, OrchestratorConfig())
    cmd = decide(cands, 1.0, CUR, FRESH, OrchestratorConfig(), current_throughput=1000.0)
    assert cmd.is_noop


def test_growth_clamp_excludes_large_but_not_small():
    cands = [cand(A, 16, 10.0), cand(A, 32, 10.0), cand(A, 64, 1e6)]
    cmd = decide(cands, 1000.0, CUR, FRESH, OrchestratorConfig())
    assert cmd.config.global_batch == 32
    cur = ConfigTuple(A, 256, 1)
    cands = [cand(A, 16, 1e6), cand(A, 256, 1.0)]
    assert decide(cands, 0.0, cur, FRESH, OrchestratorConfig()).config.global_batch == 16


def test_tie_break_prefers_smaller_batch_then_larger_d():
    c4 = ParallelStrategy(4, 2, 1)
    cur = ConfigTuple(A, 32, 1)
    # phi=0: score = T/sqrt(16 B); equal scores for (A,16,T) and (A,64,2T)
    cands = [cand(A, 32, 1.0), cand(A, 16, 1000.0), cand(A, 64, 2000.0)]
    assert decide(cands, 0.0, cur, FRESH, OrchestratorConfig(margin=0.0)).config.global_batch == 16
    cands = [cand(A, 32, 1.0), cand(c4, 64, 1000.0), cand(B, 64, 1000.0)]
    assert decide(cands, 0.0, cur, ClockState(), OrchestratorConfig(margin=0.0, reconfig_cost=0.0)).config.strategy == B


def test_incumbent_wins_ties():
    cands = [cand(A, 16, 1600.0), cand(A, 16, 1600.0, bm=2)]
    assert decide(cands, 5.0, CUR, FRESH, OrchestratorConfig(margin=0.0)).is_noop


def test_zero_margin_acts_on_any_strict_gain():
    cands = [cand(A, 16, 1600.0), cand(A, 16, 1600.0 * (1 + 1e-9), bm=2)]
    cmd = decide(cands, 5.0, CUR, FRESH, OrchestratorConfig(margin=0.0))
    assert cmd.kind == SCALE_BS and cmd.config.micro_batch == 2


def test_command_json():
    cmd = decide(penalty_case(), 0.0, CUR, FRESH, OrchestratorConfig(reconfig_cost=50.0))
    d = json.loads(cmd.to_json())
    assert d["command"] == "Reconfigure" and d["strategy"] == {"d": 8, "t": 1, "p": 1}
    assert d["global_batch"] == 16 and d["micro_batch"] == 1
    noop = json.loads(Command(NOOP, reason="gns unavailable").to_json())
    assert noop == {"command": "NoOp", "current_score": None, "winner_score": None,
                    "penalized": False, "reason": "gns unavailable"}


def test_apply_command():
    assert apply_command(CUR, Command(NOOP)) == CUR
    new = ConfigTuple(A, 32, 1)
    assert apply_command(CUR, Command(SCALE_BS, new)) == new


# --- clock / record_reconfig ---

def test_record_reconfig_bookkeeping():
    clock, cfg = record_reconfig(ClockState(600.0, 600.0), 50.0, OrchestratorConfig())
    assert (clock.useful, clock.elapsed) == (600.0, 650.0)
    assert cfg.reconfig_cost == 50.0


def test_record_reconfig_mean_of_observations():
    clock, cfg = record_reconfig(ClockState(), 30.0, OrchestratorConfig())
    clock, cfg = record_reconfig(clock, 56.0, cfg)
    assert cfg.reconfig_cost == 43.0 and clock.elapsed == 86.0 and clock.useful == 0.0


def test_record_reconfig_zero_latency():
    clock, cfg = record_reconfig(ClockState(5.0, 4.0), 0.0, OrchestratorConfig())
    assert clock == ClockState(5.0, 4.0) and cfg.reconfig_cost == 0.0
    with pytest.raises(ValidationError):
        record_reconfig(clock, -1.0, cfg)


def test_clock_invariants():
    with pytest.raises(ValidationError):
        ClockState(10.0, 11.0)
    assert ClockState().reallocation_factor(0.0) == 1.0
    assert ClockState(100.0, 80.0).advance(20.0) == ClockState(120.0, 100.0)


def test_config_validation():
    for bad in ({"margin": -0.1}, {"max_growth": 0.5}, {"decision_interval": 0}, {"reconfig_cost": -1}):
        with pytest.raises(ValidationError):
            OrchestratorConfig(**bad)


def test_audit_log(tmp_path):
    log = AuditLog()
    cmd = decide(penalty_case(), 0.0, CUR, FRESH, OrchestratorConfig(reconfig_cost=50.0))
    log.record(25, 12.5, 0.0, CUR, cmd)
    log.write(tmp_path / "audit.csv")
    lines = (tmp_path / "audit.csv").read_text().splitlines()
    assert lines[0] == ",".join(AUDIT_HEADER)
    assert lines[1].endswith(",1,Reconfigure")


# --- properties on the standard profile ---

PROFILE = standard_profile()
CANDS = feasible_candidates(PROFILE)

cur_strategy = st.sampled_from(CANDS).map(lambda c: c.config)
phis = st.floats(0, 1e5)
clocks = st.tuples(st.floats(0, 1e5), st.floats(0, 1)).map(lambda x: ClockState(x[0], x[0] * x[1]))


@settings(max_examples=150)
@given(current=cur_strategy, phi=phis, clock=clocks, margin=st.floats(0, 0.5))
def test_growth_clamp_property(current, phi, clock, margin):
    cmd = decide(CANDS, phi, current, clock, OrchestratorConfig(margin=margin))
    if not cmd.is_noop:
        assert cmd.config.global_batch <= 2 * current.global_batch
        assert (cmd.kind == SCALE_BS) == (cmd.config.strategy == current.strategy)


@settings(max_examples=150)
@given(current=cur_strategy, phi=phis, clock=clocks, c1=st.floats(0, 500), extra=st.floats(0, 500))
def test_penalty_monotone(current, phi, clock, c1, extra):
    lo = decide(CANDS, phi, current, clock, OrchestratorConfig(reconfig_cost=c1))
    hi = decide(CANDS, phi, current, clock, OrchestratorConfig(reconfig_cost=c1 + extra))
    if lo.is_noop:
        assert hi.kind != RECONFIGURE


@settings(max_examples=150)
@given(current=cur_strategy, phi=phis, clock=clocks, k=st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_throughput_scale_invariance(current, phi, clock, k):
    # powers of two scale every score exactly, so no rounding can flip a comparison
    scaled = [Candidate(c.config, c.throughput * k) for c in CANDS]
    a = decide(CANDS, phi, current, clock, OrchestratorConfig())
    b = decide(scaled, phi, current, clock, OrchestratorConfig())
    assert (a.kind, a.config) == (b.kind, b.config)


@settings(max_examples=150)
@given(current=cur_strategy, phi=phis, clock=clocks)
def test_redecide_on_same_eligible_set_is_noop(current, phi, clock):
    cfg = OrchestratorConfig()
    cmd = decide(CANDS, phi, current, clock, cfg)
    if cmd.is_noop:
        return
    eligible = [c for c in CANDS if c.config.global_batch <= cfg.max_growth * current.global_batch]
    assert decide(eligible, phi, apply_command(current, cmd), clock, cfg).is_noop


def test_no_oscillation_between_near_equal_candidates():
    # two strategies within 5% of each other at every phi: never alternate
    c1, c2 = cand(A, 64, 100.0), cand(B, 64, 104.0)
    cur = c1.config
    kinds = []
    for i in range(200):
        cmd = decide([c1, c2], 10.0 * i, cur, ClockState(1e6, 1e6), OrchestratorConfig())
        kinds.append(cmd.kind)
        cur = apply_command(cur, cmd)
    assert set(kinds) == {NOOP} and cur == c1.config
