"""Command-line entry point: gen-data, train, finetune, eval and verify.

Configs are plain ``key = value`` files, one entry per line, ``#`` starts a
comment. Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration
error, 3 a verification suite found violations.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import (
    Agent,
    AgentConfig,
    FinetuneSchedule,
    MetricsSink,
    Spaces,
    TrainingAborted,
    buffer_from_dataset,
    evaluate_policy,
    finetune_online,
    load_agent,
    save_agent,
    tabular_setup,
    train_offline,
)
from .envs import (
    GridWorldSpec,
    PointMass,
    PointMassSpec,
    ScoreReference,
    StateStats,
    TabularEnv,
    chain_dataset,
    generate_dataset,
    make_chain_mdp,
    make_gridworld,
    make_pointmass,
    normalize_states,
    normalized_score,
)
from .mdp import Dataset, build_empirical_behavior, build_mildly_generalized, policy_return
from .operators import BackupSpec, extract_greedy, value_iteration
from . import verify

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2, 3
SUITES = ("lemma1", "thm2", "thm3", "thm4", "thm5", "probe", "all")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1"):
        return True
    if t in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _cells(text: str) -> tuple[tuple[int, int], ...]:
    """'x,y; x,y' -> ((x, y), ...)."""
    out = []
    for item in text.split(";"):
        if item.strip():
            x, y = _ints(item)
            out.append((x, y))
    return tuple(out)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() == "none" else float(text)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return "; ".join(f"{x},{y}" for x, y in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
FIELDS: dict[str, tuple] = {
    # environment
    "env": (str, None),
    "horizon": (int, None),
    "dt": (float, 0.1),
    "a_max": (float, 1.0),
    "grid_width": (int, 3),
    "grid_height": (int, 3),
    "grid_goals": (_cells, ((2, 2),)),
    "grid_obstacles": (_cells, ()),
    "grid_sparse": (_bool, False),
    # dataset
    "behavior": (str, None),
    "n": (int, None),
    "data_seed": (int, 0),
    "reward_shift": (_opt_float, None),
    "normalize_states": (_bool, False),
    # agent
    "lam": (float, 0.25),
    "nu": (float, 0.1),
    "alpha_temp": (float, 3.0),
    "tau": (float, 0.7),
    "gamma": (float, 0.99),
    "xi": (float, 0.005),
    "lr": (float, 3e-4),
    "batch": (int, 256),
    "iterations": (int, 1_000_000),
    "advantage_clip": (float, 10.0),
    "policy_kind": (str, "deterministic"),
    "policy_std": (float, 0.2),
    "hidden": (_ints, (256, 256)),
    "actor_cosine": (_bool, True),
    "seed": (int, 0),
    # tabular mode
    "eps_a": (float, 1.0),
    "oracle_samples": (int, 1),
    # offline loop
    "eval_every": (int, 0),
    "eval_episodes": (int, 10),
    "log_every": (int, 1000),
    "checkpoint_every": (int, 0),
    # fine-tuning
    "ft_steps": (int, 50_000),
    "nu_start": (_opt_float, None),
    "nu_floor": (_opt_float, None),
    "lambda_start": (float, 0.25),
    "lambda_end": (float, 0.5),
    "ft_rate": (float, 0.99),
    "ft_every": (int, 1000),
    "utd": (int, 1),
    "explore_noise": (float, 0.1),
    # score reference
    "ref_random": (_opt_float, None),
    "ref_expert": (_opt_float, None),
    # verification
    "k_q": (float, 1.0),
}

REQUIRED = {
    "gen-data": ("env", "behavior", "n"),
    "train": ("env",),
    "finetune": ("env",),
    "eval": (),
    "verify": (),
}

AGENT_KEYS = ("lam", "nu", "alpha_temp", "tau", "gamma", "xi", "lr", "batch", "iterations", "advantage_clip",
              "policy_kind", "policy_std", "hidden", "actor_cosine", "seed")


@dataclass
class RunConfig:
    """Explicitly set keys; everything else falls back to the defaults in FIELDS."""

    values: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            if key not in FIELDS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[key] = FIELDS[key][0](val.strip())
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
        return cls(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def render(self) -> str:
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in FIELDS if k in self.values)

    def get(self, key: str):
        return self.values[key] if key in self.values else FIELDS[key][1]

    def require(self, command: str) -> None:
        for key in REQUIRED[command]:
            if key not in self.values:
                raise ConfigError(f"missing required key {key!r} for {command}")

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig({**self.values, "seed": seed})

    def agent_config(self) -> AgentConfig:
        kw = {k: self.get(k) for k in AGENT_KEYS}
        try:
            return AgentConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def score_reference(self) -> ScoreReference | None:
        lo, hi = self.get("ref_random"), self.get("ref_expert")
        if lo is None and hi is None:
            return None
        if lo is None or hi is None:
            raise ConfigError("ref_random and ref_expert must be given together")
        try:
            return ScoreReference(lo, hi)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- builders

def make_env(cfg: RunConfig):
    name = cfg.get("env")
    horizon = cfg.get("horizon")
    try:
        if name == "chain":
            return TabularEnv(make_chain_mdp(cfg.get("gamma")), horizon or 200)
        if name == "gridworld":
            spec = GridWorldSpec(width=cfg.get("grid_width"), height=cfg.get("grid_height"),
                                 goals=cfg.get("grid_goals"), obstacles=cfg.get("grid_obstacles"),
                                 sparse=cfg.get("grid_sparse"), gamma=cfg.get("gamma"), horizon=horizon or 100)
            return make_gridworld(spec)
        if name == "pointmass":
            return make_pointmass(PointMassSpec(dt=cfg.get("dt"), a_max=cfg.get("a_max"), horizon=horizon or 50))
    except ValueError as exc:
        raise ConfigError(f"bad environment settings: {exc}") from exc
    raise ConfigError(f"unknown env {name!r}; expected chain, gridworld or pointmass")


def make_dataset(cfg: RunConfig, env) -> Dataset:
    behavior = cfg.get("behavior")
    if behavior is None:
        if cfg.get("env") == "chain":
            return chain_dataset()
        raise ConfigError("missing required key 'behavior' (or pass --dataset)")
    if behavior == "canonical" and cfg.get("env") == "chain":
        return chain_dataset()
    if cfg.get("n") is None:
        raise ConfigError("missing required key 'n' (or pass --dataset)")
    try:
        return generate_dataset(env, behavior, cfg.get("n"), cfg.get("data_seed"), cfg.get("reward_shift"))
    except ValueError as exc:
        raise ConfigError(f"bad value for 'behavior': {exc}") from exc


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(out: Path, config_path: str | None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    if config_path is not None:
        (out / "config.copy").write_bytes(Path(config_path).read_bytes())


def _tabular_summary(agent: Agent, env, cfg: RunConfig, dataset: Dataset) -> dict:
    mdp = env.mdp
    wide = build_mildly_generalized(build_empirical_behavior(dataset, mdp), cfg.get("eps_a"), mdp)
    exact = value_iteration(mdp, BackupSpec.dmg(wide, cfg.get("lam")), tol=1e-12).q_star
    greedy = agent.greedy_table_policy()
    q = agent.q_table("q1")
    return {
        "greedy_actions": [int(a) for a in greedy],
        "exact_greedy_actions": [int(a) for a in extract_greedy(exact, wide.widened)],
        "q_table": np.where(wide.widened, q, np.nan).tolist(),
        "exact_q_table": exact.values.tolist(),
        "greedy_return": policy_return(mdp, greedy),
    }


def _score(summary: dict, cfg: RunConfig) -> None:
    ref = cfg.score_reference()
    ret = summary.get("final_return")
    if ref is not None and ret is not None:
        summary["normalized_score"] = normalized_score(ret, ref)


def _clean(obj):
    """JSON-safe copy: NaN becomes null so summaries stay strict JSON."""
    if isinstance(obj, float):
        return None if not np.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg.require("gen-data")
    env = make_env(cfg)
    ds = make_dataset(cfg, env)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    print(f"wrote {len(ds)} transitions to {out}")
    return EXIT_OK


def run_train(cfg: RunConfig, out: Path, config_path: str, dataset_path: str | None) -> int:
    cfg.require("train")
    env = make_env(cfg)
    agent_cfg = cfg.agent_config()
    dataset = Dataset.load(dataset_path) if dataset_path else make_dataset(cfg, env)
    _prepare_out(out, config_path)
    tabular = not isinstance(env, PointMass)
    if tabular:
        agent, buf = tabular_setup(env.mdp, dataset, cfg.get("eps_a"), agent_cfg, cfg.get("oracle_samples"))
        r_max = env.mdp.r_max
    else:
        stats = normalize_states(dataset)[1] if cfg.get("normalize_states") else None
        spaces = Spaces(env.state_dim, env.action_dim, env.max_action)
        agent = Agent.create(agent_cfg, spaces, stats=None if stats is None else stats.to_dict())
        buf = buffer_from_dataset(dataset, spaces, stats)
        r_max = env.r_max
    agent.extra["run_config"] = cfg.render()
    metrics = MetricsSink(out / "metrics.csv")
    try:
        res = train_offline(agent, buf, env=env, eval_every=cfg.get("eval_every"),
                            eval_episodes=cfg.get("eval_episodes"), log_every=cfg.get("log_every"),
                            r_max=r_max, metrics=metrics, checkpoint_dir=out / "checkpoints",
                            checkpoint_every=cfg.get("checkpoint_every"))
    except TrainingAborted as exc:
        _dump(out / "summary.json", {"command": "train", "aborted_at": exc.step, "reason": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_agent(agent, out / "checkpoints" / "final.json")
    summary = {"command": "train", "seed": agent_cfg.seed, "steps": agent.step, "diverged_at": res.diverged_at,
               "dataset": dataset.provenance, "n_transitions": len(dataset)}
    if res.diverged_at is None:
        summary["final_return"], _ = evaluate_policy(agent.act, env, cfg.get("eval_episodes"), seed=agent_cfg.seed + 1)
    else:
        summary["final_return"] = None
    if tabular:
        summary.update(_tabular_summary(agent, env, cfg, dataset))
    _score(summary, cfg)
    _dump(out / "summary.json", _clean(summary))
    return EXIT_OK


def run_finetune(cfg: RunConfig, out: Path, config_path: str, checkpoint: str, dataset_path: str | None) -> int:
    cfg.require("finetune")
    env = make_env(cfg)
    if not isinstance(env, PointMass):
        raise ConfigError("fine-tuning needs env = pointmass")
    agent = load_agent(checkpoint)
    if "seed" in cfg.values:
        agent.config.seed = cfg.get("seed")
    dataset = Dataset.load(dataset_path) if dataset_path else make_dataset(cfg, env)
    _prepare_out(out, config_path)
    stats = None if agent.stats is None else StateStats.from_dict(agent.stats)
    buf = buffer_from_dataset(dataset, agent.spaces, stats)
    seed = agent.config.seed
    episodes = cfg.get("eval_episodes")
    before, _ = evaluate_policy(agent.act, env, episodes, seed=seed + 1)
    nu_start = cfg.get("nu_start")
    try:
        schedule = FinetuneSchedule(agent.config.nu if nu_start is None else nu_start, cfg.get("lambda_start"),
                                    cfg.get("lambda_end"), cfg.get("nu_floor"), cfg.get("ft_rate"),
                                    cfg.get("ft_every"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    metrics = MetricsSink(out / "metrics.csv")
    try:
        finetune_online(agent, env, buf, schedule, cfg.get("ft_steps"), utd=cfg.get("utd"),
                        explore_noise=cfg.get("explore_noise"), seed=seed, eval_every=cfg.get("eval_every"),
                        eval_episodes=episodes, log_every=cfg.get("log_every"), metrics=metrics)
    except TrainingAborted as exc:
        _dump(out / "summary.json", {"command": "finetune", "aborted_at": exc.step, "reason": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save_agent(agent, out / "checkpoints" / "final.json")
    after, _ = evaluate_policy(agent.act, env, episodes, seed=seed + 1)
    summary = {"command": "finetune", "seed": seed, "steps": agent.step, "offline_return": before,
               "final_return": after, "improvement": after - before}
    _score(summary, cfg)
    _dump(out / "summary.json", _clean(summary))
    return EXIT_OK


def run_eval(cfg: RunConfig | None, out: Path | None, checkpoint: str, episodes: int, seed: int) -> int:
    agent = load_agent(checkpoint)
    if cfg is None:
        cfg = RunConfig.parse(agent.extra.get("run_config", ""), f"{checkpoint} (stored config)")
    if cfg.get("env") is None:
        raise ConfigError("missing required key 'env'")
    env = make_env(cfg)
    mean, returns = evaluate_policy(agent.act, env, episodes, seed=seed)
    summary = {"command": "eval", "checkpoint_step": agent.step, "episodes": episodes, "seed": seed,
               "final_return": mean, "returns": returns}
    if not isinstance(env, PointMass):
        summary["greedy_actions"] = [int(a) for a in agent.greedy_table_policy()]
    _score(summary, cfg)
    text = json.dumps(_clean(summary), indent=2, sort_keys=True) + "\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def verify_reports(suite: str, seed: int, trials: int | None, cfg: RunConfig,
                   corrupt_lambda: float | None = None) -> dict[str, verify.TheoremReport]:
    def n(default):
        return default if trials is None else trials

    lam = cfg.values.get("lam")
    eps_a = cfg.values.get("eps_a")
    k_q = cfg.get("k_q")
    reports = {}
    names = ("lemma1", "thm2", "thm3", "thm4", "thm5", "probe") if suite == "all" else (suite,)
    for name in names:
        if name == "lemma1":
            reports[name] = verify.check_contraction(verify.InstanceGenerator(), "in_sample", n(200), 50,
                                                     eps_a=0.5 if eps_a is None else eps_a, seed=seed)
        elif name == "thm2":
            gen = verify.InstanceGenerator()
            e = 0.5 if eps_a is None else eps_a
            if corrupt_lambda is not None:
                reports[name] = verify._contraction(gen, "dmg", n(200), 50, e, corrupt_lambda, seed)
            else:
                reports[name] = verify.check_contraction(gen, "dmg", n(200), 50, e, 0.5 if lam is None else lam, seed)
        elif name == "thm3":
            e = 0.5 if eps_a is None else eps_a
            reports[name] = verify.check_performance_dominance(verify.InstanceGenerator(), e,
                                                               0.5 if lam is None else lam, n(200), seed)
            reports["thm3_chain"] = verify.check_performance_dominance(
                verify.InstanceGenerator(kind="chain", gamma=0.5), eps_a=1.0, lam=0.25, trials=1)
        elif name == "thm4":
            for lv in ((0.0, 0.25, 1.0) if lam is None else (lam,)):
                reports[f"thm4_lam{lv:g}"] = verify.check_overestimation_bound(
                    verify.InstanceGenerator(), k_q, 1.0 if eps_a is None else eps_a, lv, 100, n(50), seed)
        elif name == "thm5":
            reports[name] = verify.check_performance_lower_bound(
                verify.InstanceGenerator(kind="linear", n_grid=401), k_q, lam=0.25 if lam is None else lam,
                trials=n(50), seed=seed)
        elif name == "probe":
            reports[name] = verify.check_generalization_probe(trials=n(20), seed=seed)
    return reports


def run_verify(args, cfg: RunConfig) -> int:
    reports = verify_reports(args.suite, args.seed, args.trials, cfg, args.corrupt_lambda)
    out = Path(args.out) if args.out else None
    if out is not None:
        (out / "reports").mkdir(parents=True, exist_ok=True)
        for name, rep in reports.items():
            rep.save(out / "reports" / f"{name}.json")
    summary = {name: {"passed": rep.passed, "instances_checked": rep.instances_checked,
                      "violations": len(rep.violations)} for name, rep in reports.items()}
    text = json.dumps({"command": "verify", "suite": args.suite, "seed": args.seed, "reports": summary},
                      indent=2, sort_keys=True) + "\n"
    if out is not None:
        (out / "summary.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_VIOLATION


# ---------------------------------------------------------------- fan-out

def _seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {text!r}") from exc


def _one(job) -> int:
    fn, kwargs = job
    return _guard(lambda: fn(**kwargs))


def _fan_out(fn, cfg: RunConfig, out: Path, seeds: list[int] | None, seed: int | None, **kw) -> int:
    if seeds is None:
        if seed is not None:
            cfg = cfg.with_seed(seed)
        return fn(cfg=cfg, out=out, **kw)
    jobs = [(fn, dict(cfg=cfg.with_seed(s), out=out / f"seed_{s}", **kw)) for s in seeds]
    workers = max(1, min(len(jobs), int(os.environ.get("DMG_LAB_THREADS", "1") or 1)))
    if workers == 1:
        codes = [_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            codes = list(pool.map(_one, jobs))
    return max(codes)


def _guard(fn) -> int:
    try:
        return fn()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmg-lab", description="Offline RL with mildly generalized backups.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded offline dataset (JSONL)")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output JSONL path")

    t = sub.add_parser("train", help="offline training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--dataset", help="JSONL dataset; generated from the config when omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--seeds", help="comma-separated seeds, one output subdirectory each")

    f = sub.add_parser("finetune", help="online fine-tuning from a checkpoint")
    f.add_argument("--config", required=True)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--dataset")
    f.add_argument("--seed", type=int)
    f.add_argument("--seeds")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="environment config; defaults to the one stored in the checkpoint")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")

    v = sub.add_parser("verify", help="run theorem checks")
    v.add_argument("--suite", choices=SUITES, default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trials", type=int)
    v.add_argument("--config", help="optional overrides: lam, eps_a, k_q")
    v.add_argument("--out")
    # negative-control hook: feed this lambda to the contraction check unvalidated
    v.add_argument("--corrupt-lambda", type=float, default=None, help=argparse.SUPPRESS)
    return p


def _dispatch(args) -> int:
    if args.command == "gen-data":
        return cmd_gen_data(args)
    if args.command == "eval":
        cfg = RunConfig.load(args.config) if args.config else None
        if args.episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        return run_eval(cfg, Path(args.out) if args.out else None, args.checkpoint, args.episodes, args.seed)
    if args.command == "verify":
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.trials is not None and args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        return run_verify(args, cfg)
    cfg = RunConfig.load(args.config)
    seeds = _seeds(args.seeds)
    if args.command == "train":
        return _fan_out(run_train, cfg, Path(args.out), seeds, args.seed, config_path=args.config,
                        dataset_path=args.dataset)
    return _fan_out(run_finetune, cfg, Path(args.out), seeds, args.seed, config_path=args.config,
                    checkpoint=args.checkpoint, dataset_path=args.dataset)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _guard(lambda: _dispatch(args))


if __name__ == "__main__":
    sys.exit(main())
