"""
Deterministic step-level simulator for adaptive batch/parallelism policies.

Each optimizer step takes B_g / T(S, B_g, B_m) seconds and contributes
effective progress B_g * SE(B_g, phi) * sqrt(B_g / B_ref); loss decays as a
power law in cumulative progress. The noise scale phi follows an affine
trajectory in tokens (or in progress) and is either handed to the policy directly (analytic
mode) or estimated online from simulated micro-batch gradients (stochastic
mode). Reconfigurations pause the clock without progress.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, NotFoundError, ParseError, ValidationError
from .gns import GnsEstimator, GnsState, simulate_micro_gradients, stats_from_micro_gradients
from .goodput import cbs_target, goodput_lr, lr_factor, stat_eff
from .orchestrator import (NOOP, RECONFIGURE, SCALE_BS, ClockState, Command, OrchestratorConfig,
                           decide, record_reconfig)
from .profile import (ConfigTuple, ParallelStrategy, ThroughputProfile, best_micro_batch,
                      feasible_candidates, optimal_strategy)
from .reshard import (DEFAULT_BANDWIDTH, DEFAULT_FIXED_OVERHEAD, ModelSpec, estimate_reconfig_latency,
                      layout_for, plan_transfers)

TRACE_HEADER = ("time_s", "step", "tokens", "global_batch", "micro_batch", "d", "t", "p", "loss",
                "phi", "goodput", "command")


@dataclass(frozen=True)
class LossModel:
    initial_loss: float = 11.0
    floor: float = 1.5
    exponent: float = 0.3
    progress_scale: float = 1e4
    reference_batch: float = 16

    def __post_init__(self):
        if not self.initial_loss > self.floor >= 0:
            raise ValidationError("need initial_loss > floor >= 0")
        if self.exponent <= 0 or self.progress_scale <= 0:
            raise ValidationError("exponent and progress_scale must be positive")

    def loss(self, progress: float) -> float:
        return self.floor + (self.initial_loss - self.floor) * (1.0 + progress / self.progress_scale) ** (-self.exponent)


@dataclass(frozen=True)
class GnsTrajectory:
    """phi(x) = phi0 * (1 + x / growth_tokens).

    With ``driver="tokens"`` x is the raw token count. With
    ``driver="progress"`` x is effective progress expressed in tokens
    (progress * seq_len), so the noise scale tracks how far training has
    advanced rather than how much data was burned.
    """

    phi0: float
    growth_tokens: float
    driver: str = "tokens"

    def __post_init__(self):
        if self.phi0 < 0 or self.growth_tokens <= 0:
            raise ValidationError("need phi0 >= 0 and growth_tokens > 0")
        if self.driver not in ("tokens", "progress"):
            raise ValidationError(f"unknown driver {self.driver!r}")

    def phi(self, tokens: float) -> float:
        return self.phi0 * (1.0 + tokens / self.growth_tokens)

    def phi_at(self, tokens: float, progress: float, seq_len: int) -> float:
        return self.phi(tokens if self.driver == "tokens" else progress * seq_len)


@dataclass(frozen=True)
class GoodputPolicy:
    config: OrchestratorConfig = OrchestratorConfig()
    initial_batch: int = 16
    name: str = "goodput"


@dataclass(frozen=True)
class StaticGBS:
    global_batch: int
    name: str = ""

    @property
    def label(self) -> str:
        return self.name or f"static-{self.global_batch}"


@dataclass(frozen=True)
class CBSPolicy:
    strategy: ParallelStrategy
    micro_batch: int
    initial_batch: int = 16
    max_growth: float = 2.0
    decision_interval: int = 25
    metric: str = "log"
    name: str = "cbs"


Policy = Union[GoodputPolicy, StaticGBS, CBSPolicy]


def policy_name(policy: Policy) -> str:
    return policy.label if isinstance(policy, StaticGBS) else policy.name


@dataclass(frozen=True)
class ReconfigModel:
    """Latency of a strategy change: from a resharding plan when ``model`` is set, else constant."""

    latency_s: float = 40.0
    model: Optional[ModelSpec] = None
    bandwidth: float = DEFAULT_BANDWIDTH
    fixed_overhead: float = DEFAULT_FIXED_OVERHEAD

    def latency(self, src: ParallelStrategy, dst: ParallelStrategy, n_gpus: int) -> float:
        if self.model is None:
            return self.latency_s
        plan = plan_transfers(layout_for(self.model, src, n_gpus), layout_for(self.model, dst, n_gpus))
        return estimate_reconfig_latency(plan, self.bandwidth, self.fixed_overhead)


@dataclass(frozen=True)
class SimEvent:
    time_s: float
    step: int
    tokens: int
    config: ConfigTuple
    throughput: float
    loss: float
    phi: float  # noise scale visible to the policy; nan when not yet available
    goodput: float
    command: str


@dataclass
class SimTrace:
    policy: str
    events: list[SimEvent] = field(default_factory=list)
    reconfig_events: list[tuple[int, float, ParallelStrategy, ParallelStrategy, float]] = field(default_factory=list)
    reference_batch: float = 16

    @property
    def final(self) -> SimEvent:
        return self.events[-1]

    def batch_schedule(self) -> list[int]:
        return [e.config.global_batch for e in self.events]

    def rows(self) -> list[list[str]]:
        out = []
        for e in self.events:
            s = e.config.strategy
            out.append([repr(e.time_s), str(e.step), str(e.tokens), str(e.config.global_batch),
                        str(e.config.micro_batch), str(s.d), str(s.t), str(s.p), repr(e.loss),
                        repr(e.phi), repr(e.goodput), e.command])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            w.writerows(self.rows())


def read_trace(path, profile: Optional[ThroughputProfile] = None, reference_batch: float = 16) -> SimTrace:
    """Load a trace CSV; throughput is looked up in ``profile`` when given, else left as nan."""
    path = Path(path)
    trace = SimTrace(path.stem, reference_batch=reference_batch)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != TRACE_HEADER:
            raise ParseError(f"{path}:1: header must be {','.join(TRACE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                cfg = ConfigTuple(ParallelStrategy(int(row[5]), int(row[6]), int(row[7])),
                                  int(row[3]), int(row[4]))
                tput = profile.throughput(cfg) if profile is not None else math.nan
                trace.events.append(SimEvent(float(row[0]), int(row[1]), int(row[2]), cfg, tput,
                                             float(row[8]), float(row[9]), float(row[10]), row[11]))
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return trace


def _initial_config(profile: ThroughputProfile, policy: Policy) -> ConfigTuple:
    try:
        if isinstance(policy, StaticGBS):
            bg = policy.global_batch
            s = optimal_strategy(profile, bg)
        elif isinstance(policy, GoodputPolicy):
            bg = policy.initial_batch
            s = optimal_strategy(profile, bg)
        else:
            bg = policy.initial_batch
            s = policy.strategy
            cfg = ConfigTuple(s, bg, policy.micro_batch)
            profile.throughput(cfg)
            return cfg
        bm, _ = best_micro_batch(profile, s, bg)
        return ConfigTuple(s, bg, bm)
    except (NotFoundError, ValidationError) as exc:
        raise ConfigurationError(f"policy {policy_name(policy)}: {exc}") from exc


def _cbs_batches(profile: ThroughputProfile, policy: CBSPolicy) -> list[int]:
    out = []
    for bg in profile.batch_sizes:
        if bg % (policy.strategy.d * policy.micro_batch):
            continue
        e = profile.lookup(ConfigTuple(policy.strategy, bg, policy.micro_batch))
        if e is not None and e.feasible:
            out.append(bg)
    return out


def cbs_step(phi: Optional[float], current: ConfigTuple, batches: Sequence[int], policy: CBSPolicy) -> ConfigTuple:
    """Next CBS configuration: nearest batch to phi, growth-clamped, parallelism fixed."""
    if phi is None or math.isnan(phi):
        return current
    target = cbs_target(phi, batches, policy.metric)
    limit = policy.max_growth * current.global_batch
    if target > limit:
        target = max(b for b in batches if b <= limit)
    return ConfigTuple(current.strategy, target, current.micro_batch)


@dataclass(frozen=True)
class StochasticGns:
    """Estimator-in-the-loop settings for stochastic mode."""

    dim: int = 16
    state: GnsState = GnsState(calibration=1.0)


def run_sim(profile: ThroughputProfile, policy: Policy, loss_model: LossModel, gns_source: GnsTrajectory,
            token_budget: float, seq_len: int = 2048, seed: int = 0, mode: str = "analytic",
            reconfig: ReconfigModel = ReconfigModel(), warmup_tokens: float = 0.0,
            stochastic: StochasticGns = StochasticGns()) -> SimTrace:
    if token_budget <= 0:
        raise ValidationError("token_budget must be positive")
    if mode not in ("analytic", "stochastic"):
        raise ValidationError(f"unknown mode {mode!r}")
    ref = loss_model.reference_batch
    cfg = _initial_config(profile, policy)
    trace = SimTrace(policy_name(policy), reference_batch=ref)

    orch_cfg = None
    if isinstance(policy, GoodputPolicy):
        orch_cfg = replace(policy.config, reference_batch=ref)
        candidates = feasible_candidates(profile)
        interval = orch_cfg.decision_interval
    elif isinstance(policy, CBSPolicy):
        batches = _cbs_batches(profile, policy)
        interval = policy.decision_interval
    else:
        interval = 0

    rng = np.random.default_rng(seed)
    estimator = None
    if mode == "stochastic":
        estimator = GnsEstimator(stochastic.state)
        g_true = np.full(stochastic.dim, 1.0 / math.sqrt(stochastic.dim))  # unit norm

    def observed_phi(tokens: float, progress: float) -> float:
        if estimator is None:
            return gns_source.phi_at(tokens, progress, seq_len)
        phi = estimator.phi
        return math.nan if phi is None else phi

    wall = 0.0
    clock = ClockState()
    tokens = 0
    progress = 0.0
    step = 0

    def maybe_decide(phi: float) -> str:
        # decisions land on optimizer-step boundaries; returns the command label
        nonlocal cfg, clock, orch_cfg, wall
        if not interval or step % interval or tokens >= token_budget:
            return NOOP
        phi_arg = None if math.isnan(phi) else phi
        if isinstance(policy, GoodputPolicy):
            cmd = decide(candidates, phi_arg, cfg, clock, orch_cfg)
            if cmd.kind == RECONFIGURE:
                lat = reconfig.latency(cfg.strategy, cmd.config.strategy, profile.n_gpus)
                clock, orch_cfg = record_reconfig(clock, lat, orch_cfg)
                trace.reconfig_events.append((step, wall, cfg.strategy, cmd.config.strategy, lat))
                wall += lat
            if not cmd.is_noop:
                cfg = cmd.config
            return cmd.kind
        new = cbs_step(phi_arg, cfg, batches, policy)
        if new == cfg:
            return NOOP
        cfg = new
        return SCALE_BS

    tput = profile.throughput(cfg)
    phi = observed_phi(0, 0.0)
    start_cfg = cfg
    command = maybe_decide(phi)
    trace.events.append(SimEvent(0.0, 0, 0, start_cfg, tput, loss_model.loss(0.0), phi,
                                 _goodput_or_nan(tput, start_cfg.global_batch, phi, ref), command))

    while tokens < token_budget:
        bg = cfg.global_batch
        tput = profile.throughput(cfg)
        phi_true = gns_source.phi_at(tokens, progress, seq_len)
        dt = bg / tput
        step_tokens = bg * seq_len
        if estimator is not None:
            n_micro = bg // cfg.micro_batch
            sigma = np.full(stochastic.dim, phi_true / stochastic.dim)
            grads = simulate_micro_gradients(g_true, sigma, cfg.micro_batch, n_micro, rng)
            estimator.observe(stats_from_micro_gradients(grads, cfg.strategy.d, bg), step_tokens)
        ramp = min(1.0, (tokens + step_tokens) / warmup_tokens) if warmup_tokens > 0 else 1.0
        progress += bg * stat_eff(bg, phi_true) * lr_factor(bg, ref) * ramp
        tokens += step_tokens
        wall += dt
        clock = clock.advance(dt)
        step += 1

        phi = observed_phi(tokens, progress)
        step_end, step_cfg = wall, cfg
        command = maybe_decide(phi)
        trace.events.append(SimEvent(step_end, step, tokens, step_cfg, tput, loss_model.loss(progress), phi,
                                     _goodput_or_nan(tput, step_cfg.global_batch, phi, ref), command))
    return trace


def _goodput_or_nan(tput: float, bg: int, phi: float, ref: float) -> float:
    if phi is None or math.isnan(phi):
        return math.nan
    return goodput_lr(tput, bg, phi, ref)


def time_to_loss(trace: SimTrace, target_loss: float) -> Optional[float]:
    """First time the loss reaches ``target_loss`` (linear interpolation); None if never."""
    ev = trace.events
    if not ev:
        return None
    if ev[0].loss <= target_loss:
        return ev[0].time_s
    for a, b in zip(ev, ev[1:]):
        if b.loss <= target_loss:
            if b.loss == a.loss:
                return b.time_s
            frac = (a.loss - target_loss) / (a.loss - b.loss)
            return a.time_s + frac * (b.time_s - a.time_s)
    return None


@dataclass(frozen=True)
class DecompositionPoint:
    time_s: float
    goodput: float
    throughput: float
    efficiency: float  # SE(B_g, phi_ref) * sqrt(B_g / B_ref); may exceed one


def _active_event(trace: SimTrace, times: np.ndarray, t: float) -> Optional[SimEvent]:
    # event whose step is in progress (or just finished) at time t
    i = int(np.searchsorted(times, t, side="left"))
    return trace.events[i] if i < len(trace.events) else None


def decision_space_goodput(traces: Mapping[str, SimTrace], reference: SimTrace,
                           reference_batch: Optional[float] = None,
                           times: Optional[Sequence[float]] = None) -> dict[str, list[DecompositionPoint]]:
    """Score every policy's (T, B_g) schedule against the reference run's phi trajectory.

    Samples default to the reference's own event times (where its phi is
    known); pass ``times`` for a uniform wall-clock grid. At time t each policy
    contributes the configuration of the step in progress at t.
    """
    ref_b = reference.reference_batch if reference_batch is None else reference_batch
    ref_times = np.array([e.time_s for e in reference.events])
    if times is None:
        samples = [(e.time_s, e.phi) for e in reference.events if not math.isnan(e.phi)]
    else:
        samples = []
        for t in times:
            e = _active_event(reference, ref_times, t)
            if e is not None and not math.isnan(e.phi):
                samples.append((float(t), e.phi))
    out: dict[str, list[DecompositionPoint]] = {}
    for name, trace in traces.items():
        tr_times = ref_times if trace is reference else np.array([e.time_s for e in trace.events])
        series = []
        for t, phi in samples:
            e = _active_event(trace, tr_times, t)
            if e is None:
                continue
            bg = e.config.global_batch
            eff = stat_eff(bg, phi) * lr_factor(bg, ref_b)
            series.append(DecompositionPoint(t, goodput_lr(e.throughput, bg, phi, ref_b), e.throughput, eff))
        out[name] = series
    return out


def uniform_times(trace: SimTrace, n: int = 1000) -> np.ndarray:
    """``n`` evenly spaced wall-clock sample times across ``trace``."""
    return np.linspace(0.0, trace.final.time_s, n)


def dominance_fraction(series: Mapping[str, list[DecompositionPoint]], leader: str) -> dict[str, float]:
    """Fraction of shared sample times at which ``leader``'s Goodput is >= each other policy's."""
    lead = {p.time_s: p.goodput for p in series[leader]}
    out = {}
    for name, pts in series.items():
        if name == leader:
            continue
        shared = [(lead[p.time_s], p.goodput) for p in pts if p.time_s in lead]
        out[name] = sum(a >= b for a, b in shared) / len(shared) if shared else math.nan
    return out


def write_decomposition(series: Mapping[str, list[DecompositionPoint]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("policy", "time_s", "goodput", "throughput", "efficiency"))
        for name in sorted(series):
            for p in series[name]:
                w.writerow((name, repr(p.time_s), repr(p.goodput), repr(p.throughput), repr(p.efficiency)))


def summary(traces: Mapping[str, SimTrace], targets: Sequence[float]) -> dict:
    """Per-policy time-to-loss keyed by target; None marks a target that was not reached."""
    return {
        "targets": [float(t) for t in targets],
        "time_to_loss": {
            name: {repr(float(t)): time_to_loss(tr, t) for t in targets}
            for name, tr in sorted(traces.items())
        },
        "final_loss": {name: tr.final.loss for name, tr in sorted(traces.items())},
        "reconfigurations": {name: len(tr.reconfig_events) for name, tr in sorted(traces.items())},
    }


def write_summary(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
