"""
Goodput orchestrator: picks the next (strategy, B_g, B_m) from the throughput table.

Every candidate is scored by LR-aware Goodput. Candidates that change the
parallel strategy are discounted by the reallocation factor
T_useful / (T_elapsed + c_reconfig), so a one-time resharding pause is only
paid when enough training remains to amortize it. A relative switching margin
suppresses churn between near-equal candidates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .errors import ConfigurationError, ValidationError
from .goodput import goodput_lr
from .profile import Candidate, ConfigTuple

NOOP = "NoOp"
SCALE_BS = "ScaleBS"
RECONFIGURE = "Reconfigure"

AUDIT_HEADER = ("step", "time_s", "phi", "current_cfg", "winner_cfg", "current_score",
                "winner_score", "penalized", "command")


@dataclass(frozen=True)
class OrchestratorConfig:
    margin: float = 0.10
    max_growth: float = 2.0
    decision_interval: int = 25
    reconfig_cost: float = 60.0
    reference_batch: float = 16
    observed_latencies: tuple[float, ...] = ()

    def __post_init__(self):
        if self.margin < 0:
            raise ValidationError("margin must be >= 0")
        if self.max_growth < 1:
            raise ValidationError("max_growth must be >= 1")
        if self.decision_interval < 1:
            raise ValidationError("decision_interval must be >= 1")
        if self.reconfig_cost < 0:
            raise ValidationError("reconfig_cost must be >= 0")
        if self.reference_batch < 1:
            raise ValidationError("reference_batch must be >= 1")


@dataclass(frozen=True)
class ClockState:
    elapsed: float = 0.0
    useful: float = 0.0

    def __post_init__(self):
        if not 0 <= self.useful <= self.elapsed + 1e-9 * max(1.0, self.elapsed):
            raise ValidationError(f"need 0 <= useful <= elapsed, got {self}")

    def reallocation_factor(self, reconfig_cost: float) -> float:
        denom = self.elapsed + reconfig_cost
        # nothing elapsed and a free switch: no penalty
        return 1.0 if denom == 0 else self.useful / denom

    def advance(self, seconds: float) -> "ClockState":
        return ClockState(self.elapsed + seconds, self.useful + seconds)


@dataclass(frozen=True)
class Command:
    kind: str
    config: Optional[ConfigTuple] = None
    winner_score: float = math.nan
    current_score: float = math.nan
    penalized: bool = False
    reason: str = ""

    @property
    def is_noop(self) -> bool:
        return self.kind == NOOP

    def to_dict(self) -> dict:
        out: dict = {"command": self.kind}
        if self.config is not None:
            s = self.config.strategy
            if self.kind == RECONFIGURE:
                out["strategy"] = {"d": s.d, "t": s.t, "p": s.p}
            out["global_batch"] = self.config.global_batch
            out["micro_batch"] = self.config.micro_batch
        out["winner_score"] = None if math.isnan(self.winner_score) else self.winner_score
        out["current_score"] = None if math.isnan(self.current_score) else self.current_score
        out["penalized"] = self.penalized
        if self.reason:
            out["reason"] = self.reason
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class ScoredCandidate:
    config: ConfigTuple
    throughput: float
    raw_score: float
    score: float
    penalized: bool


def score_candidates(candidates: Iterable[Candidate], phi: float, current: ConfigTuple,
                     clock: ClockState, cfg: OrchestratorConfig) -> list[ScoredCandidate]:
    """LR-aware Goodput per candidate within the growth clamp, penalized when the strategy changes."""
    factor = clock.reallocation_factor(cfg.reconfig_cost)
    limit = cfg.max_growth * current.global_batch
    out = []
    for cand in candidates:
        c = cand.config
        if c.global_batch > limit:
            continue
        raw = goodput_lr(cand.throughput, c.global_batch, phi, cfg.reference_batch)
        cross = c.strategy != current.strategy
        out.append(ScoredCandidate(c, cand.throughput, raw, raw * factor if cross else raw, cross))
    return out


def _pick(scored: Sequence[ScoredCandidate], current: ConfigTuple) -> ScoredCandidate:
    # highest score; ties prefer the incumbent, then smaller B_g, then larger d
    return min(scored, key=lambda sc: (-sc.score, sc.config != current,
                                       sc.config.global_batch, -sc.config.strategy.d,
                                       -sc.config.strategy.t, sc.config.micro_batch))


def decide(candidates: Sequence[Candidate], phi: Optional[float], current: ConfigTuple,
           clock: ClockState, cfg: OrchestratorConfig,
           current_throughput: Optional[float] = None) -> Command:
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError("empty candidate set")
    if phi is None or (isinstance(phi, float) and math.isnan(phi)):
        return Command(NOOP, reason="gns unavailable")

    if current_throughput is None:
        match = [c.throughput for c in candidates if c.config == current]
        if not match:
            raise ConfigurationError(f"current configuration {current} not among candidates "
                                     "and no throughput supplied")
        current_throughput = match[0]
    current_score = goodput_lr(current_throughput, current.global_batch, phi, cfg.reference_batch)

    scored = score_candidates(candidates, phi, current, clock, cfg)
    if not any(sc.config == current for sc in scored):
        scored.append(ScoredCandidate(current, current_throughput, current_score, current_score, False))
    best = _pick(scored, current)

    if best.config == current or (best.score - current_score) / current_score < cfg.margin:
        return Command(NOOP, None, best.score, current_score, best.penalized,
                       reason="incumbent is best" if best.config == current else "below margin")
    kind = SCALE_BS if best.config.strategy == current.strategy else RECONFIGURE
    return Command(kind, best.config, best.score, current_score, best.penalized)


def apply_command(current: ConfigTuple, command: Command) -> ConfigTuple:
    return current if command.is_noop else command.config


def record_reconfig(clock: ClockState, observed_latency: float,
                    cfg: OrchestratorConfig) -> tuple[ClockState, OrchestratorConfig]:
    """Charge a reconfiguration pause to the clock and refresh the cost estimate (mean of observations)."""
    if observed_latency < 0:
        raise ValidationError("latency must be >= 0")
    lat = cfg.observed_latencies + (float(observed_latency),)
    new_cfg = replace(cfg, observed_latencies=lat, reconfig_cost=math.fsum(lat) / len(lat))
    return ClockState(clock.elapsed + observed_latency, clock.useful), new_cfg


def write_audit_log(rows: Iterable[Sequence], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(AUDIT_HEADER)
        for row in rows:
            w.writerow(row)


@dataclass
class AuditLog:
    rows: list = field(default_factory=list)

    def record(self, step: int, time_s: float, phi: Optional[float], current: ConfigTuple,
               command: Command) -> None:
        winner = command.config if command.config is not None else current
        self.rows.append((step, repr(time_s), "" if phi is None else repr(phi), str(current),
                          str(winner), repr(command.current_score), repr(command.winner_score),
                          int(command.penalized), command.kind))

    def write(self, path) -> None:
        write_audit_log(self.rows, path)
