"""Canned synthetic setups shared by the test suite, the acceptance checks and the CLI examples."""

from __future__ import annotations

import math

from .profile import (DEFAULT_BATCH_GRID, CostModelParams, ParallelStrategy, StrategyCost,
                      ThroughputEntry, ThroughputProfile, synth_profile)
from .reshard import toy_3b_model
from .sim import CBSPolicy, GnsTrajectory, GoodputPolicy, LossModel, ReconfigModel, StaticGBS

PP_HEAVY = ParallelStrategy(2, 1, 4)
DP_HEAVY = ParallelStrategy(8, 1, 1)

GIB = 2**30


def standard_params() -> CostModelParams:
    """Two 8-GPU strategies whose curves cross: a pipelined one that saturates early
    and a pure data-parallel one with a higher ceiling that needs large batches."""
    return CostModelParams(
        costs={
            PP_HEAVY: StrategyCost(t_max=40.0, b_hw=8.0),
            DP_HEAVY: StrategyCost(t_max=60.0, b_hw=128.0),
        },
        pipeline_bubble=True,
        model_bytes=40 * GIB,
        activation_bytes_per_sample=6 * GIB,
    )


def standard_profile() -> ThroughputProfile:
    return synth_profile(standard_params(), [PP_HEAVY, DP_HEAVY], DEFAULT_BATCH_GRID, (1, 2, 4, 8),
                         memory_capacity=80 * GIB, hardware_id="synthetic-8gpu")


def flat_profile(throughput: float = 50.0) -> ThroughputProfile:
    """Single 8-way data-parallel strategy whose throughput does not depend on batch size."""
    s = ParallelStrategy(8, 1, 1)
    base = synth_profile(CostModelParams({s: StrategyCost(throughput, 1.0)}), [s], DEFAULT_BATCH_GRID, (1, 2),
                         hardware_id="synthetic-flat")
    entries = {c: ThroughputEntry(float(throughput), e.peak_memory, True) for c, e in base.entries.items()}
    return ThroughputProfile(base.hardware_id, base.n_gpus, base.memory_capacity, entries)


def standard_trajectory() -> GnsTrajectory:
    # noise scale grows with training progress; quick early growth, as usually observed for B_crit
    return GnsTrajectory(phi0=6.0, growth_tokens=2e6, driver="progress")


def standard_loss() -> LossModel:
    return LossModel()


def standard_reconfig() -> ReconfigModel:
    # pauses priced by the resharding planner on the toy 3B model
    return ReconfigModel(model=toy_3b_model())


STANDARD_SEQ_LEN = 2048
STANDARD_TOKEN_BUDGET = 4e9


def standard_policies(profile: ThroughputProfile) -> list:
    """The adaptive policy, one static baseline per grid batch size, and CBS pinned to each strategy."""
    pols: list = [GoodputPolicy()]
    pols += [StaticGBS(b) for b in profile.batch_sizes]
    for s in profile.strategies:
        pols.append(CBSPolicy(s, 1, name=f"cbs-{s}"))
    return pols


def loss_targets(traces, n: int = 40) -> list[float]:
    """``n`` evenly spaced loss targets from the start down to the loss every trace reaches."""
    start = min(tr.events[0].loss for tr in traces.values())
    reach = max(tr.final.loss for tr in traces.values())
    out = [start - (start - reach) * i / n for i in range(1, n)]
    return out + [reach]  # exact, so the slowest policy counts as reaching it


def crossing_batch(profile_params: CostModelParams, a: ParallelStrategy, b: ParallelStrategy,
                   micro_batch: int = 1, lo: float = 1.0, hi: float = 1e6) -> float:
    """Continuous B_g where the two strategies' modeled throughputs are equal (bisection)."""

    def t(s: ParallelStrategy, bg: float) -> float:
        c = profile_params.costs[s]
        v = c.t_max * bg / (bg + c.b_hw)
        if profile_params.pipeline_bubble:
            ga = bg / (s.d * micro_batch)
            v *= ga / (ga + s.p - 1)
        return v

    f = lambda x: t(a, x) - t(b, x)  # noqa: E731
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError("curves do not cross in the bracket")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return math.sqrt(lo * hi)
