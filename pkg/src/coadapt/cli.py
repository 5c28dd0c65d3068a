"""
Command-line entry point.

    coadapt [--config run.json] [--out DIR] [--seed N] <subcommand> [options]

Subcommands: profile-synth, simulate, decide, reshard-plan, analyze.
The run configuration is one JSON document (schema in README.md). The
environment variables COADAPT_OUT and COADAPT_SEED override the output
directory and seed from the config; the command-line flags override both.

Exit codes: 0 success, 1 validation/config error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .errors import CoadaptError, InvariantViolation, ParseError, ValidationError
from .orchestrator import ClockState, OrchestratorConfig, decide
from .profile import (DEFAULT_BATCH_GRID, DEFAULT_MICRO_GRID, ConfigTuple, CostModelParams,
                      ParallelStrategy, StrategyCost, ThroughputProfile, feasible_candidates,
                      load_profile, save_profile, synth_profile)
from .reshard import (DEFAULT_BANDWIDTH, DEFAULT_FIXED_OVERHEAD, ModelSpec, estimate_reconfig_latency,
                      layout_for, plan_transfers, save_plan, toy_3b_model)
from .sim import (CBSPolicy, GnsTrajectory, GoodputPolicy, LossModel, ReconfigModel, StaticGBS,
                  decision_space_goodput, policy_name, read_trace, run_sim, summary, uniform_times,
                  write_decomposition, write_summary)

ENV_OUT = "COADAPT_OUT"
ENV_SEED = "COADAPT_SEED"

EXIT_OK, EXIT_CONFIG, EXIT_INTERNAL = 0, 1, 2


# --- configuration -----------------------------------------------------------

def _check_keys(section: str, data: Any, allowed: Sequence[str]) -> Mapping:
    if not isinstance(data, Mapping):
        raise ValidationError(f"{section}: expected a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValidationError(f"{section}: unknown key(s) {', '.join(unknown)}")
    return data


def _dataclass_from(section: str, cls, data: Any):
    names = [f.name for f in fields(cls)]
    data = _check_keys(section, data, names)
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError(f"{section}: {exc}") from exc


def _strategy(value: Any) -> ParallelStrategy:
    if isinstance(value, str):
        return ParallelStrategy.parse(value)
    if isinstance(value, Mapping):
        _check_keys("strategy", value, ("d", "t", "p"))
        return ParallelStrategy(value.get("d", 1), value.get("t", 1), value.get("p", 1))
    if isinstance(value, (list, tuple)) and len(value) == 3:
        return ParallelStrategy(*value)
    raise ValidationError(f"cannot read a strategy from {value!r}")


@dataclass(frozen=True)
class SynthSpec:
    n_gpus: int
    strategies: tuple  # (ParallelStrategy, StrategyCost) pairs
    batch_grid: tuple = DEFAULT_BATCH_GRID
    micro_grid: tuple = DEFAULT_MICRO_GRID
    pipeline_bubble: bool = False
    model_bytes: float = 0.0
    activation_bytes_per_sample: float = 0.0
    memory_capacity: float = math.inf
    hardware_id: str = "synthetic"

    @classmethod
    def from_dict(cls, data: Any) -> "SynthSpec":
        data = _check_keys("profile.synth", data,
                           ("n_gpus", "strategies", "batch_grid", "micro_grid", "pipeline_bubble",
                            "model_bytes", "activation_bytes_per_sample", "memory_capacity", "hardware_id"))
        if "n_gpus" not in data or "strategies" not in data:
            raise ValidationError("profile.synth: n_gpus and strategies are required")
        pairs = []
        for i, item in enumerate(data["strategies"]):
            item = _check_keys(f"profile.synth.strategies[{i}]", item, ("d", "t", "p", "t_max", "b_hw"))
            s = ParallelStrategy(item.get("d", 1), item.get("t", 1), item.get("p", 1))
            pairs.append((s, StrategyCost(float(item["t_max"]), float(item["b_hw"]))))
        mem = data.get("memory_capacity")
        return cls(
            n_gpus=int(data["n_gpus"]),
            strategies=tuple(pairs),
            batch_grid=tuple(data.get("batch_grid", DEFAULT_BATCH_GRID)),
            micro_grid=tuple(data.get("micro_grid", DEFAULT_MICRO_GRID)),
            pipeline_bubble=bool(data.get("pipeline_bubble", False)),
            model_bytes=float(data.get("model_bytes", 0.0)),
            activation_bytes_per_sample=float(data.get("activation_bytes_per_sample", 0.0)),
            memory_capacity=math.inf if mem is None else float(mem),
            hardware_id=str(data.get("hardware_id", "synthetic")),
        )

    def build(self) -> ThroughputProfile:
        if not self.strategies:
            raise ValidationError("profile.synth: no strategies")
        for s, _ in self.strategies:
            s.validate(self.n_gpus)
        params = CostModelParams(dict(self.strategies), self.pipeline_bubble, self.model_bytes,
                                 self.activation_bytes_per_sample)
        return synth_profile(params, [s for s, _ in self.strategies], self.batch_grid, self.micro_grid,
                             self.memory_capacity, self.hardware_id)


def _policy(i: int, data: Any, orch: OrchestratorConfig):
    section = f"policies[{i}]"
    if not isinstance(data, Mapping) or "type" not in data:
        raise ValidationError(f"{section}: expected an object with a 'type' key")
    kind = data["type"]
    if kind == "goodput":
        d = _check_keys(section, data, ("type", "name", "initial_batch"))
        return GoodputPolicy(orch, int(d.get("initial_batch", 16)), d.get("name", "goodput"))
    if kind == "static":
        d = _check_keys(section, data, ("type", "name", "global_batch"))
        return StaticGBS(int(d["global_batch"]), d.get("name", ""))
    if kind == "cbs":
        d = _check_keys(section, data, ("type", "name", "strategy", "micro_batch", "initial_batch",
                                        "max_growth", "decision_interval", "metric"))
        return CBSPolicy(_strategy(d["strategy"]), int(d.get("micro_batch", 1)),
                         int(d.get("initial_batch", 16)), float(d.get("max_growth", 2.0)),
                         int(d.get("decision_interval", orch.decision_interval)),
                         d.get("metric", "log"), d.get("name", "cbs"))
    raise ValidationError(f"{section}: unknown policy type {kind!r}")


def _model_spec(value: Any) -> ModelSpec:
    if value == "toy-3b":
        return toy_3b_model()
    if isinstance(value, str):
        return ModelSpec.from_dict(json.loads(Path(value).read_text(encoding="utf-8")))
    return ModelSpec.from_dict(value)


@dataclass
class RunConfig:
    profile_path: Optional[str] = None
    synth: Optional[SynthSpec] = None
    policies: list = field(default_factory=list)
    loss: LossModel = LossModel()
    trajectory: GnsTrajectory = GnsTrajectory(6.0, 2e6, "progress")
    orchestrator: OrchestratorConfig = OrchestratorConfig()
    reconfig: ReconfigModel = ReconfigModel()
    token_budget: float = 1e9
    seq_len: int = 2048
    mode: str = "analytic"
    targets: tuple = ()
    seed: int = 0
    out_dir: str = "out"

    KEYS = ("profile", "policies", "loss_model", "gns", "orchestrator", "reconfig", "token_budget",
            "seq_len", "mode", "targets", "seed", "out_dir")

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        data = _check_keys("config", data, cls.KEYS)
        cfg = cls()
        prof = data.get("profile")
        if prof is not None:
            prof = _check_keys("profile", prof, ("path", "synth"))
            if ("path" in prof) == ("synth" in prof):
                raise ValidationError("profile: give exactly one of 'path' or 'synth'")
            if "path" in prof:
                cfg.profile_path = str(prof["path"])
            else:
                cfg.synth = SynthSpec.from_dict(prof["synth"])
        if "loss_model" in data:
            cfg.loss = _dataclass_from("loss_model", LossModel, data["loss_model"])
        if "gns" in data:
            cfg.trajectory = _dataclass_from("gns", GnsTrajectory, data["gns"])
        if "orchestrator" in data:
            orch = _check_keys("orchestrator", data["orchestrator"],
                               ("margin", "max_growth", "decision_interval", "reconfig_cost"))
            cfg.orchestrator = OrchestratorConfig(**orch, reference_batch=cfg.loss.reference_batch)
        else:
            cfg.orchestrator = OrchestratorConfig(reference_batch=cfg.loss.reference_batch)
        if "reconfig" in data:
            rc = dict(_check_keys("reconfig", data["reconfig"],
                                  ("latency_s", "model", "bandwidth", "fixed_overhead")))
            if "model" in rc:
                rc["model"] = _model_spec(rc["model"])
            cfg.reconfig = ReconfigModel(**rc)
        cfg.policies = [_policy(i, p, cfg.orchestrator) for i, p in enumerate(data.get("policies", []))]
        names = [policy_name(p) for p in cfg.policies]
        if len(set(names)) != len(names):
            raise ValidationError(f"policies: duplicate names in {names}")
        cfg.token_budget = float(data.get("token_budget", cfg.token_budget))
        cfg.seq_len = int(data.get("seq_len", cfg.seq_len))
        cfg.mode = str(data.get("mode", cfg.mode))
        cfg.targets = tuple(float(t) for t in data.get("targets", ()))
        cfg.seed = int(data.get("seed", cfg.seed))
        cfg.out_dir = str(data.get("out_dir", cfg.out_dir))
        if cfg.token_budget <= 0 or cfg.seq_len < 1:
            raise ValidationError("token_budget and seq_len must be positive")
        if cfg.mode not in ("analytic", "stochastic"):
            raise ValidationError(f"mode must be 'analytic' or 'stochastic', got {cfg.mode!r}")
        if cfg.seed < 0:
            raise ValidationError("seed must be a non-negative integer")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return cls.from_dict(data)

    def load_profile(self) -> ThroughputProfile:
        if self.profile_path is not None:
            return load_profile(self.profile_path)
        if self.synth is not None:
            return self.synth.build()
        raise ValidationError("config has no profile section")


def _resolve(args: argparse.Namespace, env: Mapping[str, str]) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if ENV_OUT in env:
        cfg.out_dir = env[ENV_OUT]
    if ENV_SEED in env:
        try:
            cfg.seed = int(env[ENV_SEED])
        except ValueError as exc:
            raise ValidationError(f"{ENV_SEED} must be an integer") from exc
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if not 0 <= cfg.seed < 2**64:
        raise ValidationError("seed must fit in an unsigned 64-bit integer")
    return cfg


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands -----------------------------------------------------------

def cmd_profile_synth(cfg: RunConfig, args) -> int:
    if cfg.synth is None:
        raise ValidationError("profile-synth needs a profile.synth section in the config")
    profile = cfg.synth.build()
    path = _out(cfg) / args.name
    save_profile(profile, path)
    print(f"wrote {path} ({len(profile.entries)} rows)")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    if not cfg.policies:
        raise ValidationError("simulate needs at least one policy")
    profile = cfg.load_profile()
    out = _out(cfg)
    traces = {}
    for pol in sorted(cfg.policies, key=policy_name):
        tr = run_sim(profile, pol, cfg.loss, cfg.trajectory, cfg.token_budget, cfg.seq_len,
                     seed=cfg.seed, mode=cfg.mode, reconfig=cfg.reconfig)
        tr.write_csv(out / f"trace_{tr.policy}.csv")
        traces[tr.policy] = tr
    write_summary(summary(traces, cfg.targets), out / "summary.json")
    print(f"wrote {len(traces)} traces and summary.json to {out}")
    return EXIT_OK


def cmd_decide(cfg: RunConfig, args) -> int:
    profile = load_profile(args.profile) if args.profile else cfg.load_profile()
    current = ConfigTuple(_strategy(args.strategy), args.global_batch, args.micro_batch)
    orch = cfg.orchestrator
    overrides = {k: getattr(args, k) for k in ("margin", "max_growth", "reconfig_cost")
                 if getattr(args, k) is not None}
    if overrides:
        orch = OrchestratorConfig(**{**{f.name: getattr(orch, f.name) for f in fields(orch)}, **overrides})
    useful = args.elapsed if args.useful is None else args.useful
    cmd = decide(feasible_candidates(profile), args.phi, current, ClockState(args.elapsed, useful), orch,
                 current_throughput=args.current_throughput)
    print(cmd.to_json())
    return EXIT_OK


def cmd_reshard_plan(cfg: RunConfig, args) -> int:
    model = _model_spec(args.model)
    src, dst = _strategy(args.src), _strategy(args.dst)
    n = args.n_gpus if args.n_gpus is not None else src.world_size
    plan = plan_transfers(layout_for(model, src, n), layout_for(model, dst, n))
    out = _out(cfg)
    save_plan(plan, out / "plan.csv")
    latency = estimate_reconfig_latency(plan, args.bandwidth, args.fixed_overhead)
    report = {
        "src": str(src), "dst": str(dst), "moves": len(plan.moves),
        "remote_moves": sum(not m.local for m in plan.moves),
        "total_bytes": plan.total_bytes, "max_bytes_per_rank": plan.max_bytes_per_rank,
        "latency_s": latency,
    }
    (out / "plan_latency.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    profile = load_profile(args.profile) if args.profile else cfg.load_profile()
    ref_b = cfg.loss.reference_batch
    def load(path):
        tr = read_trace(path, profile, ref_b)
        tr.policy = tr.policy.removeprefix("trace_")  # simulate names files trace_<policy>.csv
        return tr

    traces = {}
    for p in args.traces:
        tr = load(p)
        traces[tr.policy] = tr
    reference = load(args.reference)
    traces[reference.policy] = reference
    times = uniform_times(reference, args.samples) if args.samples else None
    series = decision_space_goodput(traces, traces[reference.policy], times=times)
    path = _out(cfg) / "decomposition.csv"
    write_decomposition(series, path)
    print(f"wrote {path}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coadapt", description=__doc__.split("\n\n")[1].strip())
    ap.add_argument("--config", help="run configuration (JSON)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="RNG seed (unsigned 64-bit)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile-synth", help="generate a synthetic throughput profile")
    p.add_argument("--name", default="profile.csv")
    p.set_defaults(func=cmd_profile_synth)

    p = sub.add_parser("simulate", help="run every policy in the config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decide", help="one orchestrator decision, printed as JSON")
    p.add_argument("--profile", help="profile CSV (default: the config's profile)")
    p.add_argument("--phi", type=float, default=None, help="noise scale; omit when unavailable")
    p.add_argument("--strategy", required=True, help="current strategy as d,t,p")
    p.add_argument("--global-batch", type=int, required=True)
    p.add_argument("--micro-batch", type=int, required=True)
    p.add_argument("--current-throughput", type=float, default=None)
    p.add_argument("--elapsed", type=float, default=0.0)
    p.add_argument("--useful", type=float, default=None, help="defaults to --elapsed")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--max-growth", type=float, default=None)
    p.add_argument("--reconfig-cost", type=float, default=None)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("reshard-plan", help="transfer plan and latency estimate for a strategy change")
    p.add_argument("--model", default="toy-3b", help="model spec JSON file, or toy-3b")
    p.add_argument("--src", required=True, help="source strategy d,t,p")
    p.add_argument("--dst", required=True, help="target strategy d,t,p")
    p.add_argument("--n-gpus", type=int, default=None)
    p.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH, help="bytes/s")
    p.add_argument("--fixed-overhead", type=float, default=DEFAULT_FIXED_OVERHEAD, help="seconds")
    p.set_defaults(func=cmd_reshard_plan)

    p = sub.add_parser("analyze", help="decision-space Goodput decomposition of traces")
    p.add_argument("traces", nargs="*", help="trace CSVs to score")
    p.add_argument("--reference", required=True, help="trace whose noise-scale series is used")
    p.add_argument("--profile", help="profile CSV (default: the config's profile)")
    p.add_argument("--samples", type=int, default=0, help="uniform time samples; 0 = reference event times")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None) -> int:
    args = build_parser().parse_args(argv)
    env = os.environ if env is None else env
    try:
        cfg = _resolve(args, env)
        return args.func(cfg, args)
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (CoadaptError, OSError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
