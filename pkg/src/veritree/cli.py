"""Command-line entry point: generate, extract, pairs, loss, evolve, infer, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .bank import BankError, load_bank
from .config import AppConfig, ConfigError, load_config
from .evolution import (
    ModelResolutionError,
    coverage_trend,
    round_report_from_dict,
    run_round,
)
from .inference import (
    InferenceConfig,
    ScoredAnswer,
    deep_think,
    pass_at_n,
)
from .metrics import metrics
from .models import (
    ConstantReward,
    PolicyTransportError,
    ScriptedPolicy,
    ScriptOracleReward,
)
from .pairs import (
    build_final_answer_pairs,
    build_pairs,
    dataset_mse_loss,
    dataset_pairwise_loss,
    write_pairs_jsonl,
)
from .sandbox import SandboxTransportError
from .steps import StepParseError
from .trajectories import (
    extract_trajectories,
    select_sft,
    sft_record,
    trajectory_record,
    union_trajectories,
    write_jsonl,
)
from .tree import GenerationConfig, run_mcts, tree_from_json_bytes, tree_to_json_bytes
from .verify import ScriptedVerifier

logger = logging.getLogger(__name__)

DOMAIN_ERRORS = (
    BankError,
    ConfigError,
    ModelResolutionError,
    PolicyTransportError,
    SandboxTransportError,
    StepParseError,
    ValueError,
    OSError,
)


CONFIG_ENV_VAR = "VERITREE_CONFIG"


def _load_app_config(args) -> AppConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    if path:
        return load_config(path)
    return AppConfig()


def _resolve_policy(args, config: AppConfig):
    spec = getattr(args, "policy", None)
    if spec:
        if spec.startswith("scripted:"):
            return ScriptedPolicy.load(spec.split(":", 1)[1])
        if spec == "http":
            return config.build_policy()
        raise ConfigError(f"unknown --policy spec {spec!r}")
    return config.build_policy()


def _resolve_reward(args, config: AppConfig, policy):
    spec = getattr(args, "reward", None)
    if spec:
        if spec.startswith("constant:"):
            return ConstantReward(float(spec.split(":", 1)[1]))
        if spec == "oracle":
            if not isinstance(policy, ScriptedPolicy):
                raise ConfigError("oracle reward requires a scripted policy")
            return ScriptOracleReward(policy)
        if spec == "http":
            return config.build_reward(policy)
        raise ConfigError(f"unknown --reward spec {spec!r}")
    return config.build_reward(policy)


def _resolve_verifier(args, config: AppConfig):
    if getattr(args, "verifier", "sandbox") == "scripted":
        return ScriptedVerifier()
    if getattr(args, "timeout_ms", None) is not None:
        config.sandbox.timeout_ms = args.timeout_ms
    if getattr(args, "memory_mb", None) is not None:
        config.sandbox.memory_mb = args.memory_mb
    return config.build_verifier()


def _close_verifier(verifier) -> None:
    """Drain and release sandbox resources on command exit."""
    sandbox = getattr(verifier, "sandbox", None)
    if sandbox is not None and hasattr(sandbox, "close"):
        sandbox.close()


def _generation_config(args, config: AppConfig) -> GenerationConfig:
    base = config.generation
    return GenerationConfig(
        num_rollouts=args.rollouts if args.rollouts is not None else base.num_rollouts,
        candidates_per_step=(args.candidates if args.candidates is not None
                             else base.candidates_per_step),
        max_depth=args.depth if args.depth is not None else base.max_depth,
        exploration_c=args.c if args.c is not None else base.exploration_c,
        annotation_mode=args.mode if args.mode is not None else base.annotation_mode,
        seed=args.seed if args.seed is not None else base.seed,
        temperature=(args.temperature if args.temperature is not None
                     else base.temperature),
    )


def _dump_metrics(args) -> None:
    out = getattr(args, "out", None)
    if out and Path(out).is_dir():
        (Path(out) / "metrics.json").write_text(metrics.dump_json() + "\n",
                                                encoding="utf-8")
    else:
        logger.debug("metrics: %s", metrics.dump_json())


def _load_trees_by_problem(trees_dir: str) -> dict[str, list]:
    grouped: dict[str, list] = {}
    paths = sorted(Path(trees_dir).glob("*.tree.json"))
    if not paths:
        raise ConfigError(f"no *.tree.json files under {trees_dir}")
    for path in paths:
        tree = tree_from_json_bytes(path.read_bytes())
        grouped.setdefault(tree.problem_id, []).append(tree)
    return grouped


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    config = _load_app_config(args)
    problems = load_bank(args.bank)
    policy = _resolve_policy(args, config)
    gen = _generation_config(args, config)
    if gen.annotation_mode == "ppm_augmented":
        reward = _resolve_reward(args, config, policy)
        if reward is None:
            raise ConfigError("ppm_augmented generation requires a reward model")
    else:
        reward = None
    verifier = _resolve_verifier(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        for problem in problems:
            tree = run_mcts(problem, policy, verifier, reward, gen)
            (out / f"{problem.id}.tree.json").write_bytes(tree_to_json_bytes(tree))
    finally:
        _close_verifier(verifier)
    print(f"wrote {len(problems)} trees to {out}")
    return 0


def cmd_extract(args) -> int:
    problems = {p.id: p for p in load_bank(args.bank)}
    grouped = _load_trees_by_problem(args.trees)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trajectory_records = []
    sft_records = []
    for pid in sorted(grouped):
        union = union_trajectories([extract_trajectories(t) for t in grouped[pid]])
        trajectory_records.extend(trajectory_record(t) for t in union)
        problem = problems.get(pid)
        if problem is not None:
            sft_records.extend(sft_record(problem, t) for t in select_sft(union))
    n_traj = write_jsonl(trajectory_records, out / "trajectories.jsonl")
    n_sft = write_jsonl(sft_records, out / "sft.jsonl")
    print(f"wrote {n_traj} trajectories and {n_sft} sft records to {out}")
    return 0


def cmd_pairs(args) -> int:
    grouped = _load_trees_by_problem(args.trees)
    all_pairs = []
    for pid in sorted(grouped):
        trees = grouped[pid]
        union = union_trajectories([extract_trajectories(t) for t in trees])
        for tree in trees:
            all_pairs.extend(build_pairs(tree, union, include_final_answer=False))
        if (any(t.is_correct for t in union)
                and any(t.is_correct is False for t in union)):
            all_pairs.extend(build_final_answer_pairs(pid, union))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    count = write_pairs_jsonl(all_pairs, args.out)
    print(f"wrote {count} pairs to {args.out}")
    return 0


def cmd_loss(args) -> int:
    records = []
    with open(args.input, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.input}: line {lineno}: {exc.msg}") from exc
    if args.kind in ("ppm", "orm"):
        report = dataset_pairwise_loss(records)
    else:
        report = dataset_mse_loss(records)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_evolve_run(args) -> int:
    config = _load_app_config(args)
    if args.round not in config.rounds:
        raise ConfigError(f"config defines no [rounds.{args.round}] table")
    round_config = config.rounds[args.round]
    bank = load_bank(args.bank)
    registry = config.registry_for_round(round_config)
    verifier = _resolve_verifier(args, config)
    out_dir = Path(args.out) / f"round_{args.round}"
    try:
        report = run_round(
            bank, round_config, registry, verifier, out_dir,
            workers=args.workers or config.workers,
            resume=not args.no_resume,
        )
    finally:
        _close_verifier(verifier)
    print(report.render_table())
    return 0


def cmd_infer(args) -> int:
    config = _load_app_config(args)
    problems = load_bank(args.bank)
    policy = _resolve_policy(args, config)
    reward = _resolve_reward(args, config, policy)
    if reward is None:
        raise ConfigError("infer requires a reward model")
    verifier = _resolve_verifier(args, config)
    rule = "final_step_ppm" if args.select == "final" else "mean_step_ppm"
    inference = InferenceConfig(
        candidates_per_step=config.inference.candidates_per_step,
        rollouts_per_step_budget=config.inference.rollouts_per_step_budget,
        trajectories_to_sample=args.n,
        selection_rule=rule,
        max_depth=config.inference.max_depth,
        exploration_c=config.inference.exploration_c,
        temperature=config.inference.temperature,
        seed=args.seed if args.seed is not None else config.inference.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    samples = []
    truths = []
    token_counts = []
    try:
        for problem in problems:
            result = deep_think(problem, policy, verifier, reward, inference)
            best = result.best()
            records.append(
                {
                    "problem_id": problem.id,
                    "no_answer": result.no_answer,
                    "chosen_answer": best.answer if best else None,
                    "trajectories": [
                        {"answer": t.answer, "score": t.score,
                         "token_count": t.trajectory.token_count,
                         "steps": [s.raw_text for s in t.trajectory.steps]}
                        for t in result.trajectories
                    ],
                }
            )
            samples.append([ScoredAnswer(t.answer, t.score) for t in result.trajectories])
            truths.append(problem.ground_truth)
            token_counts.extend(t.trajectory.token_count for t in result.trajectories)
    finally:
        _close_verifier(verifier)
    write_jsonl(records, out / "results.jsonl")
    ns = sorted({1, args.n})
    usable = [s for s in samples if len(s) >= max(ns)]
    summary = {}
    if usable:
        evaluation = pass_at_n(samples, truths, ns)
        summary = evaluation.to_dict()
    summary["avg_tokens_per_trajectory"] = (
        sum(token_counts) / len(token_counts) if token_counts else 0.0
    )
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps({k: summary.get(k) for k in ("pass_at_n", "selected_accuracy")},
                     indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    problems = {p.id: p for p in load_bank(args.bank)}
    samples = []
    truths = []
    with open(args.results, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            problem = problems.get(record["problem_id"])
            if problem is None:
                raise ConfigError(f"results reference unknown problem {record['problem_id']!r}")
            samples.append(
                [ScoredAnswer(t["answer"], t["score"]) for t in record["trajectories"]]
            )
            truths.append(problem.ground_truth)
    ns = [int(n) for n in args.ns.split(",")]
    evaluation = pass_at_n(samples, truths, ns)
    print(json.dumps(evaluation.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    reports = []
    for round_dir in args.rounds:
        payload = json.loads((Path(round_dir) / "report.json").read_text(encoding="utf-8"))
        reports.append(round_report_from_dict(payload))
    trend = coverage_trend(reports)
    print(json.dumps(trend, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="veritree",
        description="Code-verified step-by-step reasoning: search, datasets, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--policy", help="scripted:<script.json> or http")
        p.add_argument("--reward", help="constant:<v>, oracle, or http")
        p.add_argument("--verifier", choices=["sandbox", "scripted"], default="sandbox")
        p.add_argument("--timeout-ms", type=int, help="sandbox wall-clock limit")
        p.add_argument("--memory-mb", type=int, help="sandbox memory limit")

    p = sub.add_parser("generate", help="run search trees over a problem bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", default="trees")
    p.add_argument("--rollouts", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--mode", choices=["terminal_guided", "ppm_augmented"])
    add_model_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="trees -> trajectories + sft records")
    p.add_argument("--trees", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("pairs", help="trees -> preference pairs")
    p.add_argument("--trees", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("loss", help="reference losses over a scores file")
    p.add_argument("kind", choices=["ppm", "orm", "pqm"])
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("evolve", help="multi-round self-evolution")
    evolve_sub = p.add_subparsers(dest="evolve_command", required=True)
    p = evolve_sub.add_parser("run", help="run one round")
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-resume", action="store_true")
    add_model_flags(p)
    p.set_defaults(func=cmd_evolve_run)

    p = sub.add_parser("infer", help="reward-guided deep thinking over a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--select", choices=["mean", "final"], default="mean")
    p.add_argument("--seed", type=int)
    add_model_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Pass@N over saved inference results")
    p.add_argument("--results", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--ns", default="1,4,8")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="coverage trend across round reports")
    p.add_argument("rounds", nargs="+", help="round output directories")
    p.set_defaults(func=cmd_report)

    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except DOMAIN_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    _dump_metrics(args)
    return code


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
