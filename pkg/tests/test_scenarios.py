import math

import pytest

from coadapt.profile import CostModelParams, ParallelStrategy, StrategyCost, optimal_strategy
from coadapt.scenarios import (DP_HEAVY, PP_HEAVY, crossing_batch, flat_profile, standard_params,
                               standard_profile)


def test_crossing_matches_quadratic_root():
    # 40 B/(B+8) * B/(B+6) = 60 B/(B+128)  ->  B^2 - 214 B + 144 = 0
    root = (214 + math.sqrt(214**2 - 576)) / 2
    assert crossing_batch(standard_params(), PP_HEAVY, DP_HEAVY, lo=16, hi=1e4) == pytest.approx(root, rel=1e-12)


def test_crossing_without_bubble():
    # 100 B/(B+32) = 200 B/(B+160)  ->  B = 96
    a, b = ParallelStrategy(2, 1, 4), ParallelStrategy(8, 1, 1)
    params = CostModelParams({a: StrategyCost(100.0, 32.0), b: StrategyCost(200.0, 160.0)})
    assert crossing_batch(params, a, b, lo=2, hi=1e4) == pytest.approx(96.0, rel=1e-12)


def test_no_crossing_raises():
    a, b = ParallelStrategy(2, 1, 4), ParallelStrategy(8, 1, 1)
    params = CostModelParams({a: StrategyCost(100.0, 32.0), b: StrategyCost(200.0, 32.0)})
    with pytest.raises(ValueError):
        crossing_batch(params, a, b)


def test_standard_profile_switches_once():
    prof = standard_profile()
    winners = [optimal_strategy(prof, b) for b in prof.batch_sizes]
    first = winners.index(DP_HEAVY)
    assert set(winners[:first]) == {PP_HEAVY} and set(winners[first:]) == {DP_HEAVY}
    assert prof.batch_sizes[first - 1] < 213.3 < prof.batch_sizes[first]


def test_flat_profile_is_flat():
    prof = flat_profile(37.0)
    assert {e.samples_per_second for e in prof.entries.values()} == {37.0}
    assert len(prof.strategies) == 1
