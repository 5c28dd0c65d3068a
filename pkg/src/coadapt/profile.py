"""
Throughput lookup table over (strategy, global batch, micro batch).

The table is either loaded from CSV (measured offline) or synthesized from a
saturating cost model. Queries return the fastest micro-batch per
(strategy, global batch) pair and the throughput-optimal strategy at a given
global batch size.
"""

from __future__ import annotations

import csv
import json
import math
import numbers
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Optional

from .errors import NotFoundError, ParseError, ValidationError

CSV_HEADER = (
    "d",
    "t",
    "p",
    "global_batch",
    "micro_batch",
    "samples_per_sec",
    "peak_mem_bytes",
    "feasible",
)

DEFAULT_BATCH_GRID = tuple(2**k for k in range(4, 12))  # 16 .. 2048
DEFAULT_MICRO_GRID = (1, 2, 4, 8)


@dataclass(frozen=True, order=True)
class ParallelStrategy:
    """3D parallel execution strategy: data, tensor and pipeline degrees."""

    d: int
    t: int
    p: int

    def __post_init__(self):
        for name in ("d", "t", "p"):
            value = getattr(self, name)
            if not isinstance(value, numbers.Integral) or value < 1:
                raise ValidationError(f"strategy degree {name}={value!r} must be a positive integer")
            object.__setattr__(self, name, int(value))

    @property
    def world_size(self) -> int:
        return self.d * self.t * self.p

    def validate(self, n_gpus: int) -> None:
        if self.world_size != n_gpus:
            raise ValidationError(
                f"strategy {self} uses d*t*p={self.world_size} GPUs, expected {n_gpus}"
            )

    @classmethod
    def parse(cls, text: str) -> "ParallelStrategy":
        """Parse ``"d,t,p"``."""
        parts = [s.strip() for s in text.split(",")]
        if len(parts) != 3:
            raise ValidationError(f"expected 'd,t,p', got {text!r}")
        try:
            d, t, p = (int(x) for x in parts)
        except ValueError as exc:
            raise ValidationError(f"non-integer strategy {text!r}") from exc
        return cls(d, t, p)

    def __str__(self) -> str:
        return f"DP{self.d}-TP{self.t}-PP{self.p}"


@dataclass(frozen=True, order=True)
class ConfigTuple:
    strategy: ParallelStrategy
    global_batch: int
    micro_batch: int

    def __post_init__(self):
        if self.global_batch < 1 or self.micro_batch < 1:
            raise ValidationError(f"batch sizes must be positive: {self}")
        if self.global_batch % (self.strategy.d * self.micro_batch) != 0:
            raise ValidationError(
                f"global_batch={self.global_batch} not divisible by "
                f"d*micro_batch={self.strategy.d}*{self.micro_batch}"
            )

    @property
    def grad_accum(self) -> int:
        return self.global_batch // (self.strategy.d * self.micro_batch)

    def __str__(self) -> str:
        return f"{self.strategy}/B{self.global_batch}/m{self.micro_batch}"


@dataclass(frozen=True)
class ThroughputEntry:
    samples_per_second: float
    peak_memory: float
    feasible: bool

    def __post_init__(self):
        if self.feasible and not self.samples_per_second > 0:
            raise ValidationError("feasible entry must have positive throughput")
        if self.samples_per_second < 0:
            raise ValidationError("throughput must be nonnegative")


class Candidate(NamedTuple):
    config: ConfigTuple
    throughput: float


@dataclass(frozen=True)
class ThroughputProfile:
    """Immutable lookup table T(S, B_g, B_m) for one model/hardware pair."""

    hardware_id: str
    n_gpus: int
    memory_capacity: float
    entries: Mapping[ConfigTuple, ThroughputEntry] = field(default_factory=dict)

    def __post_init__(self):
        for cfg in self.entries:
            cfg.strategy.validate(self.n_gpus)
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def __eq__(self, other):
        if not isinstance(other, ThroughputProfile):
            return NotImplemented
        return (
            self.hardware_id == other.hardware_id
            and self.n_gpus == other.n_gpus
            and self.memory_capacity == other.memory_capacity
            and dict(self.entries) == dict(other.entries)
        )

    def __hash__(self):
        return hash((self.hardware_id, self.n_gpus, self.memory_capacity, len(self.entries)))

    def lookup(self, config: ConfigTuple) -> Optional[ThroughputEntry]:
        """Entry for ``config``; ``None`` when the key was never profiled."""
        return self.entries.get(config)

    def throughput(self, config: ConfigTuple) -> float:
        entry = self.entries.get(config)
        if entry is None:
            raise NotFoundError(f"configuration {config} not in profile")
        if not entry.feasible:
            raise NotFoundError(f"configuration {config} is infeasible")
        return entry.samples_per_second

    @property
    def strategies(self) -> list[ParallelStrategy]:
        return sorted({cfg.strategy for cfg in self.entries})

    @property
    def batch_sizes(self) -> list[int]:
        return sorted({cfg.global_batch for cfg in self.entries})

    def scaled(self, factor: float) -> "ThroughputProfile":
        """Copy with every throughput multiplied by ``factor``."""
        return ThroughputProfile(
            self.hardware_id,
            self.n_gpus,
            self.memory_capacity,
            {
                cfg: ThroughputEntry(e.samples_per_second * factor, e.peak_memory, e.feasible)
                for cfg, e in self.entries.items()
            },
        )


@dataclass(frozen=True)
class StrategyCost:
    t_max: float
    b_hw: float

    def __post_init__(self):
        if not (self.t_max > 0 and self.b_hw > 0):
            raise ValidationError(f"T_max and B_hw must be positive, got {self}")


@dataclass(frozen=True)
class CostModelParams:
    """Saturating throughput model plus a two-term memory model.

    ``model_bytes`` is split over ``t*p`` ranks; activations scale with the
    micro-batch size.
    """

    costs: Mapping[ParallelStrategy, StrategyCost]
    pipeline_bubble: bool = False
    model_bytes: float = 0.0
    activation_bytes_per_sample: float = 0.0


def bubble_factor(p: int, grad_accum: int) -> float:
    return grad_accum / (grad_accum + p - 1)


def synth_throughput(cost: StrategyCost, strategy: ParallelStrategy, global_batch: int,
                     grad_accum: int, pipeline_bubble: bool) -> float:
    t = cost.t_max * global_batch / (global_batch + cost.b_hw)
    if pipeline_bubble:
        t *= bubble_factor(strategy.p, grad_accum)
    return t


def synth_profile(
    params: CostModelParams,
    strategies: Iterable[ParallelStrategy],
    batch_grid: Iterable[int] = DEFAULT_BATCH_GRID,
    micro_grid: Iterable[int] = DEFAULT_MICRO_GRID,
    memory_capacity: float = math.inf,
    hardware_id: str = "synthetic",
) -> ThroughputProfile:
    strategies = list(strategies)
    batch_grid = sorted(set(batch_grid))
    micro_grid = sorted(set(micro_grid))
    if not strategies or not batch_grid or not micro_grid:
        raise ValidationError("strategies, batch_grid and micro_grid must be nonempty")
    n_gpus = strategies[0].world_size
    entries: dict[ConfigTuple, ThroughputEntry] = {}
    for s in strategies:
        s.validate(n_gpus)
        if s not in params.costs:
            raise ValidationError(f"no cost parameters for strategy {s}")
        cost = params.costs[s]
        for bg in batch_grid:
            for bm in micro_grid:
                if bg % (s.d * bm):
                    continue
                cfg = ConfigTuple(s, bg, bm)
                mem = params.model_bytes / (s.t * s.p) + params.activation_bytes_per_sample * bm
                if mem > memory_capacity:
                    entries[cfg] = ThroughputEntry(0.0, mem, False)
                else:
                    tput = synth_throughput(cost, s, bg, cfg.grad_accum, params.pipeline_bubble)
                    entries[cfg] = ThroughputEntry(tput, mem, True)
    return ThroughputProfile(hardware_id, n_gpus, memory_capacity, entries)


def best_micro_batch(profile: ThroughputProfile, strategy: ParallelStrategy,
                     global_batch: int) -> tuple[int, ThroughputEntry]:
    """Fastest feasible micro-batch for (strategy, global_batch); ties go to the smaller one."""
    best: Optional[tuple[int, ThroughputEntry]] = None
    for cfg, entry in profile.entries.items():
        if cfg.strategy != strategy or cfg.global_batch != global_batch or not entry.feasible:
            continue
        if (
            best is None
            or entry.samples_per_second > best[1].samples_per_second
            or (entry.samples_per_second == best[1].samples_per_second and cfg.micro_batch < best[0])
        ):
            best = (cfg.micro_batch, entry)
    if best is None:
        raise NotFoundError(f"no feasible micro-batch for {strategy} at B_g={global_batch}")
    return best


def _strategy_rank(s: ParallelStrategy) -> tuple[int, int]:
    return (s.d, s.t)


def optimal_strategy(profile: ThroughputProfile, global_batch: int) -> ParallelStrategy:
    """Throughput-optimal strategy at ``global_batch`` (ties: larger d, then larger t)."""
    best_s, best_t = None, -math.inf
    for s in profile.strategies:
        try:
            _, entry = best_micro_batch(profile, s, global_batch)
        except NotFoundError:
            continue
        t = entry.samples_per_second
        if t > best_t or (t == best_t and _strategy_rank(s) > _strategy_rank(best_s)):
            best_s, best_t = s, t
    if best_s is None:
        raise NotFoundError(f"no feasible strategy at B_g={global_batch}")
    return best_s


def feasible_candidates(profile: ThroughputProfile) -> list[Candidate]:
    """One candidate per (S, B_g) with its fastest feasible micro-batch, deterministically ordered."""
    pairs = sorted({(cfg.global_batch, cfg.strategy) for cfg in profile.entries},
                   key=lambda x: (x[0], x[1].d, x[1].t, x[1].p))
    out = []
    for bg, s in pairs:
        try:
            bm, entry = best_micro_batch(profile, s, bg)
        except NotFoundError:
            continue
        if entry.peak_memory > profile.memory_capacity:
            continue
        out.append(Candidate(ConfigTuple(s, bg, bm), entry.samples_per_second))
    return out


# --- persistence -----------------------------------------------------------

def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _fmt(x: float) -> str:
    # repr round-trips floats exactly
    return repr(float(x))


def save_profile(profile: ThroughputProfile, path) -> None:
    """Write the CSV table plus a ``<name>.meta.json`` sidecar with the hardware metadata."""
    path = Path(path)
    rows = sorted(profile.entries.items(),
                  key=lambda kv: (kv[0].strategy.d, kv[0].strategy.t, kv[0].strategy.p,
                                  kv[0].global_batch, kv[0].micro_batch))
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for cfg, e in rows:
            s = cfg.strategy
            w.writerow([s.d, s.t, s.p, cfg.global_batch, cfg.micro_batch,
                        _fmt(e.samples_per_second), _fmt(e.peak_memory), int(e.feasible)])
    meta = {
        "hardware_id": profile.hardware_id,
        "n_gpus": profile.n_gpus,
        "memory_capacity": None if math.isinf(profile.memory_capacity) else profile.memory_capacity,
    }
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def load_profile(path, hardware_id: Optional[str] = None, n_gpus: Optional[int] = None,
                 memory_capacity: Optional[float] = None) -> ThroughputProfile:
    """Load a profile CSV.

    Metadata comes from explicit arguments, else the sidecar written by
    :func:`save_profile`, else defaults (file stem, GPU count inferred from
    the first row, unbounded memory).
    """
    path = Path(path)
    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    hardware_id = hardware_id if hardware_id is not None else meta.get("hardware_id", path.stem)
    n_gpus = n_gpus if n_gpus is not None else meta.get("n_gpus")
    if memory_capacity is None:
        memory_capacity = meta.get("memory_capacity")
        memory_capacity = math.inf if memory_capacity is None else float(memory_capacity)

    entries: dict[ConfigTuple, ThroughputEntry] = {}
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(f"{path}:1: header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                d, t, p, bg, bm = (int(x) for x in row[:5])
                tput, mem = float(row[5]), float(row[6])
                flag = row[7].strip()
                if flag not in ("0", "1"):
                    raise ValueError(f"feasible must be 0 or 1, got {flag!r}")
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                strategy = ParallelStrategy(d, t, p)
                if n_gpus is None:
                    n_gpus = strategy.world_size
                strategy.validate(n_gpus)
                cfg = ConfigTuple(strategy, bg, bm)
                entry = ThroughputEntry(tput, mem, flag == "1")
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if cfg in entries:
                raise ValidationError(f"{path}:{lineno}: duplicate key {cfg}")
            entries[cfg] = entry
    if n_gpus is None:
        raise ValidationError(f"{path}: empty profile and no GPU count given")
    return ThroughputProfile(hardware_id, n_gpus, memory_capacity, entries)
