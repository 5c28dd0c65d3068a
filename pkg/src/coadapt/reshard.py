"""
Online resharding of model and optimizer state between (d, t, p) layouts.

Each rank describes its local shards by (key, global shape, global offset,
local shape). A plan is derived by intersecting every destination shard with
the canonical source shards (DP replica 0), one box per overlap. Execution is
simulated in memory through host staging: sources are copied to host, GPU
state is released, target shards are materialized and filled from the staged
copies, so no rank ever holds both layouts at once.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvariantViolation, ParseError, ValidationError
from .profile import ParallelStrategy

PLAN_HEADER = ("key", "src_rank", "dst_rank", "offsets", "extents", "bytes", "local")

# Defaults are calibrated so 3B-scale pipeline/data-parallel transitions of
# toy_3b_model() take 30-60 s.
DEFAULT_BANDWIDTH = 3.0e9  # bytes/s, host-staged point-to-point
DEFAULT_FIXED_OVERHEAD = 10.0  # s, process-group and model/optimizer rebuild


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    tp_axis: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(x) for x in self.shape))
        if self.tp_axis is not None and not 0 <= self.tp_axis < len(self.shape):
            raise ValidationError(f"{self.name}: tp_axis {self.tp_axis} out of range")


@dataclass(frozen=True)
class ModelSpec:
    """Toy transformer stand-in: ``layers`` identical blocks of ``tensors``."""

    layers: int
    tensors: tuple[TensorSpec, ...]
    optimizer_state_multiplier: int = 2
    param_bytes: int = 2
    optim_bytes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "tensors", tuple(self.tensors))
        if self.layers < 1:
            raise ValidationError("model needs at least one layer")
        if self.optimizer_state_multiplier < 0:
            raise ValidationError("optimizer_state_multiplier must be >= 0")

    def state_keys(self) -> list[tuple[str, int, TensorSpec, int]]:
        """(key, layer, tensor, element bytes) for every parameter and optimizer-state tensor."""
        out = []
        for layer in range(self.layers):
            for ts in self.tensors:
                base = f"layers.{layer}.{ts.name}"
                out.append((base, layer, ts, self.param_bytes))
                for j in range(self.optimizer_state_multiplier):
                    out.append((f"{base}.opt{j}", layer, ts, self.optim_bytes))
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelSpec":
        allowed = {"layers", "tensors", "optimizer_state_multiplier", "param_bytes", "optim_bytes"}
        unknown = set(data) - allowed
        if unknown:
            raise ValidationError(f"unknown model keys: {sorted(unknown)}")
        tensors = []
        for t in data["tensors"]:
            extra = set(t) - {"name", "shape", "tp_axis"}
            if extra:
                raise ValidationError(f"unknown tensor keys: {sorted(extra)}")
            tensors.append(TensorSpec(t["name"], tuple(t["shape"]), t.get("tp_axis")))
        return cls(int(data["layers"]), tuple(tensors),
                   int(data.get("optimizer_state_multiplier", 2)),
                   int(data.get("param_bytes", 2)), int(data.get("optim_bytes", 4)))


def toy_3b_model() -> ModelSpec:
    h = 2560
    return ModelSpec(32, (
        TensorSpec("qkv", (h, 3 * h), 1),
        TensorSpec("proj", (h, h), 0),
        TensorSpec("fc1", (h, 4 * h), 1),
        TensorSpec("fc2", (4 * h, h), 0),
        TensorSpec("ln", (h,), None),
    ))


@dataclass(frozen=True)
class ShardDescriptor:
    key: str
    global_shape: tuple[int, ...]
    global_offset: tuple[int, ...]
    local_shape: tuple[int, ...]
    owner: int
    element_bytes: int = 2
    canonical: bool = True  # DP replica 0 and, for TP-replicated tensors, TP rank 0

    def __post_init__(self):
        for o, n, g in zip(self.global_offset, self.local_shape, self.global_shape):
            if o < 0 or o + n > g:
                raise InvariantViolation(f"shard {self} exceeds global shape")

    @property
    def numel(self) -> int:
        return math.prod(self.local_shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.element_bytes

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + n) for o, n in zip(self.global_offset, self.local_shape))


@dataclass(frozen=True)
class ShardLayout:
    strategy: ParallelStrategy
    shards: tuple[ShardDescriptor, ...]
    replica_groups: tuple[tuple[int, ...], ...]

    def shard(self, rank: int, key: str) -> Optional[ShardDescriptor]:
        return self._index.get((rank, key))

    @property
    def _index(self) -> dict:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {(s.owner, s.key): s for s in self.shards}
            object.__setattr__(self, "_idx", idx)
        return idx

    def canonical_shards(self) -> list[ShardDescriptor]:
        return [s for s in self.shards if s.canonical]

    def rank_footprint(self, rank: int) -> int:
        return sum(s.nbytes for s in self.shards if s.owner == rank)

    def footprints(self) -> dict[int, int]:
        out: dict[int, int] = {r: 0 for g in self.replica_groups for r in g}
        for s in self.shards:
            out[s.owner] += s.nbytes
        return out


def rank_of(strategy: ParallelStrategy, dp: int, pp: int, tp: int) -> int:
    return dp * strategy.t * strategy.p + pp * strategy.t + tp


def layout_for(model: ModelSpec, strategy: ParallelStrategy, n_gpus: Optional[int] = None) -> ShardLayout:
    """Shards for every rank: contiguous layer stages, equal TP chunks, DP replication."""
    if n_gpus is not None:
        strategy.validate(n_gpus)
    d, t, p = strategy.d, strategy.t, strategy.p
    if model.layers % p:
        raise ValidationError(f"{model.layers} layers not divisible by p={p}")
    for ts in model.tensors:
        if ts.tp_axis is not None and ts.shape[ts.tp_axis] % t:
            raise ValidationError(
                f"tensor {ts.name} axis {ts.tp_axis} (len {ts.shape[ts.tp_axis]}) not divisible by t={t}")
    per_stage = model.layers // p
    shards = []
    for key, layer, ts, ebytes in model.state_keys():
        stage = layer // per_stage
        for dp in range(d):
            for tp in range(t):
                offset = [0] * len(ts.shape)
                local = list(ts.shape)
                if ts.tp_axis is not None:
                    chunk = ts.shape[ts.tp_axis] // t
                    offset[ts.tp_axis] = tp * chunk
                    local[ts.tp_axis] = chunk
                canonical = dp == 0 and (ts.tp_axis is not None or tp == 0)
                shards.append(ShardDescriptor(key, ts.shape, tuple(offset), tuple(local),
                                              rank_of(strategy, dp, stage, tp), ebytes, canonical))
    groups = tuple(tuple(rank_of(strategy, dp, pp, tp) for pp in range(p) for tp in range(t))
                   for dp in range(d))
    return ShardLayout(strategy, tuple(shards), groups)


def check_tiling(layout: ShardLayout) -> None:
    """Canonical shards of each key must tile its global shape; other shards must copy a canonical one.

    Tiling is checked by element counting plus pairwise disjointness, so it
    never materializes the tensors.
    """
    by_key: dict[str, list[ShardDescriptor]] = {}
    for s in layout.canonical_shards():
        by_key.setdefault(s.key, []).append(s)
    for key, shards in by_key.items():
        if sum(s.numel for s in shards) != math.prod(shards[0].global_shape):
            raise InvariantViolation(f"canonical shards of {key} do not cover the global shape")
        for i, a in enumerate(shards):
            for b in shards[i + 1:]:
                if intersect(a.global_offset, a.local_shape, b.global_offset, b.local_shape) is not None:
                    raise InvariantViolation(f"canonical shards of {key} overlap")
    boxes = {(s.key, s.global_offset, s.local_shape) for s in layout.canonical_shards()}
    for s in layout.shards:
        if (s.key, s.global_offset, s.local_shape) not in boxes:
            raise InvariantViolation(f"replica shard {s} has no canonical counterpart")


# --- planning ----------------------------------------------------------------

@dataclass(frozen=True)
class Move:
    key: str
    src_rank: int
    dst_rank: int
    offset: tuple[int, ...]  # global coordinates
    extent: tuple[int, ...]
    nbytes: int
    local: bool

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(o, o + n) for o, n in zip(self.offset, self.extent))


@dataclass(frozen=True)
class TransferPlan:
    moves: tuple[Move, ...]

    @property
    def total_bytes(self) -> int:
        """Bytes that cross the wire (local moves excluded)."""
        return sum(m.nbytes for m in self.moves if not m.local)

    @property
    def max_bytes_per_rank(self) -> int:
        per: dict[int, int] = {}
        for m in self.moves:
            if not m.local:
                per[m.dst_rank] = per.get(m.dst_rank, 0) + m.nbytes
        return max(per.values(), default=0)


def intersect(a_off, a_len, b_off, b_len) -> Optional[tuple[tuple[int, ...], tuple[int, ...]]]:
    """Box intersection as (offset, extent), or None if empty."""
    off, ext = [], []
    for ao, al, bo, bl in zip(a_off, a_len, b_off, b_len):
        lo, hi = max(ao, bo), min(ao + al, bo + bl)
        if hi <= lo:
            return None
        off.append(lo)
        ext.append(hi - lo)
    return tuple(off), tuple(ext)


def plan_transfers(src: ShardLayout, dst: ShardLayout) -> TransferPlan:
    """Point-to-point moves that assemble every destination shard.

    Regions come from the canonical source shards, except that a box the
    destination rank already holds (in any replica) is copied locally.
    """
    sources: dict[str, list[ShardDescriptor]] = {}
    for s in src.canonical_shards():
        sources.setdefault(s.key, []).append(s)
    held = {(s.owner, s.key, s.global_offset, s.local_shape) for s in src.shards}
    moves = []
    for ds in dst.shards:
        cands = sources.get(ds.key)
        if not cands:
            raise InvariantViolation(f"no source shards for key {ds.key}")
        if cands[0].global_shape != ds.global_shape:
            raise ValidationError(f"{ds.key}: global shape mismatch between layouts")
        covered = 0
        for ss in cands:
            box = intersect(ss.global_offset, ss.local_shape, ds.global_offset, ds.local_shape)
            if box is None:
                continue
            owner = ss.owner
            if (ds.owner, ds.key, ss.global_offset, ss.local_shape) in held:
                owner = ds.owner
            n = math.prod(box[1])
            covered += n
            moves.append(Move(ds.key, owner, ds.owner, box[0], box[1], n * ds.element_bytes,
                              owner == ds.owner))
        if covered != ds.numel:
            raise InvariantViolation(f"destination shard {ds.key}@{ds.owner} not fully covered")
    return TransferPlan(tuple(moves))


def estimate_reconfig_latency(plan: TransferPlan, bandwidth_bytes_per_s: float = DEFAULT_BANDWIDTH,
                              fixed_overhead_s: float = DEFAULT_FIXED_OVERHEAD) -> float:
    if bandwidth_bytes_per_s <= 0:
        raise ValidationError("bandwidth must be positive")
    return fixed_overhead_s + plan.total_bytes / bandwidth_bytes_per_s


# --- simulated execution -------------------------------------------------------

ShardedState = dict  # (rank, key) -> np.ndarray


def init_global_state(model: ModelSpec, seed=0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for key, _, ts, ebytes in model.state_keys():
        dtype = np.float16 if ebytes == 2 else np.float32
        out[key] = rng.standard_normal(ts.shape).astype(dtype)
    return out


def scatter(global_state: Mapping[str, np.ndarray], layout: ShardLayout) -> ShardedState:
    return {(s.owner, s.key): np.array(global_state[s.key][s.slices]) for s in layout.shards}


def gather(state: ShardedState, layout: ShardLayout) -> dict[str, np.ndarray]:
    """Reassemble global tensors from the canonical shards."""
    out: dict[str, np.ndarray] = {}
    for s in layout.canonical_shards():
        arr = state[(s.owner, s.key)]
        if s.key not in out:
            out[s.key] = np.empty(s.global_shape, dtype=arr.dtype)
        out[s.key][s.slices] = arr
    return out


@dataclass
class MemoryReport:
    source_footprint: int
    target_footprint: int
    staging_bytes: int
    peak_total: int
    peak_gpu_per_rank: dict[int, int] = field(default_factory=dict)

    @property
    def bound(self) -> int:
        return max(self.source_footprint, self.target_footprint) + self.staging_bytes


def execute_in_memory(state: ShardedState, src: ShardLayout, dst: ShardLayout, plan: TransferPlan,
                      rng=None) -> tuple[ShardedState, MemoryReport]:
    """Apply ``plan`` to ``state`` through host staging; returns the new sharded state.

    ``rng`` (seed or Generator) shuffles the move order; destinations are
    disjoint so the result must not depend on it.
    """
    src_fp, dst_fp = src.footprints(), dst.footprints()
    gpu = dict(src_fp)
    for r in dst_fp:
        gpu.setdefault(r, 0)
    peak_rank = dict(gpu)
    host = 0
    peak_total = sum(gpu.values())

    def mark():
        nonlocal peak_total
        peak_total = max(peak_total, sum(gpu.values()) + host)
        for r, b in gpu.items():
            peak_rank[r] = max(peak_rank[r], b)

    # stage: copy every source region the plan reads to host memory
    needed = {(m.src_rank, m.key) for m in plan.moves}
    staged: dict[tuple[int, str], tuple[ShardDescriptor, np.ndarray]] = {}
    for rank, key in sorted(needed):
        sd = src.shard(rank, key)
        if sd is None:
            raise ValidationError(f"plan reads ({rank}, {key}) which is not in the source layout")
        if (rank, key) not in state:
            raise ValidationError(f"state lacks source shard ({rank}, {key})")
        arr = state[(rank, key)]
        if arr.shape != sd.local_shape:
            raise ValidationError(f"state shard ({rank}, {key}) has shape {arr.shape}, expected {sd.local_shape}")
        staged[(rank, key)] = (sd, arr.copy())
        host += sd.nbytes
        mark()
    staging_bytes = host

    # release source state on every GPU
    for r in gpu:
        gpu[r] -= src_fp.get(r, 0)
    mark()

    # materialize target shards
    out: ShardedState = {}
    written: dict[tuple[int, str], np.ndarray] = {}
    for ds in dst.shards:
        dtype = np.float16 if ds.element_bytes == 2 else np.float32
        out[(ds.owner, ds.key)] = np.empty(ds.local_shape, dtype=dtype)
        written[(ds.owner, ds.key)] = np.zeros(ds.local_shape, dtype=np.int8)
        gpu[ds.owner] += ds.nbytes
    mark()

    moves = list(plan.moves)
    if rng is not None:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        gen.shuffle(moves)
    for m in moves:
        ds = dst.shard(m.dst_rank, m.key)
        if ds is None:
            raise ValidationError(f"plan writes ({m.dst_rank}, {m.key}) which is not in the target layout")
        sd, arr = staged[(m.src_rank, m.key)]
        src_idx = tuple(slice(o - so, o - so + n) for o, so, n in zip(m.offset, sd.global_offset, m.extent))
        dst_idx = tuple(slice(o - do, o - do + n) for o, do, n in zip(m.offset, ds.global_offset, m.extent))
        out[(m.dst_rank, m.key)][dst_idx] = arr[src_idx]
        written[(m.dst_rank, m.key)][dst_idx] += 1

    for k, w in written.items():
        if not np.all(w == 1):
            raise InvariantViolation(f"destination shard {k} not written exactly once")

    host = 0
    mark()
    report = MemoryReport(sum(src_fp.values()), sum(dst_fp.values()), staging_bytes, peak_total, peak_rank)
    for r, b in peak_rank.items():
        if b > max(src_fp.get(r, 0), dst_fp.get(r, 0)):
            raise InvariantViolation(f"rank {r} held more than one layout at once")
    if report.peak_total > report.bound:
        raise InvariantViolation("peak simulated memory exceeds single-layout footprint + staging")
    return out, report


# --- plan CSV -----------------------------------------------------------------

def _join(xs: Sequence[int]) -> str:
    return ";".join(str(int(x)) for x in xs)


def save_plan(plan: TransferPlan, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PLAN_HEADER)
        for m in plan.moves:
            w.writerow([m.key, m.src_rank, m.dst_rank, _join(m.offset), _join(m.extent), m.nbytes, int(m.local)])


def load_plan(path) -> TransferPlan:
    path = Path(path)
    moves = []
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != PLAN_HEADER:
            raise ParseError(f"{path}:1: header must be {','.join(PLAN_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(PLAN_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(PLAN_HEADER)} fields")
            try:
                off = tuple(int(x) for x in row[3].split(";")) if row[3] else ()
                ext = tuple(int(x) for x in row[4].split(";")) if row[4] else ()
                moves.append(Move(row[0], int(row[1]), int(row[2]), off, ext, int(row[5]),
                                  row[6] == "1"))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return TransferPlan(tuple(moves))
