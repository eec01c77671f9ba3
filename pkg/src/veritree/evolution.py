"""Multi-round self-evolution driver: per-round generation sweeps, rollout
escalation for hard problems, synthetic-noise filtering, dataset export, and
coverage reporting.

Model training between rounds is out of scope; rounds reference policy/reward
models by name and a registry resolves them (scripted models in tests,
endpoint-backed models in real runs).
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .bank import Problem
from .hashing import derive_seed
from .pairs import PreferencePair, build_final_answer_pairs, build_pairs, pair_record
from .trajectories import (
    HARD,
    Trajectory,
    categorize,
    extract_trajectories,
    select_sft,
    sft_record,
    union_trajectories,
    write_jsonl,
)
from .tree import (
    PPM_AUGMENTED,
    TERMINAL_GUIDED,
    GenerationConfig,
    SearchTree,
    run_mcts,
    tree_from_json_bytes,
    tree_to_json_bytes,
)

logger = logging.getLogger(__name__)


class ModelResolutionError(RuntimeError):
    """A round references a policy/reward name the registry cannot provide."""


class ModelRegistry:
    """Named policy and reward models; the between-rounds 'upgrade' is just
    pointing the next round's refs at stronger entries."""

    def __init__(self) -> None:
        self._policies: dict[str, object] = {}
        self._rewards: dict[str, object] = {}

    def register_policy(self, ref: str, policy) -> None:
        self._policies[ref] = policy

    def register_reward(self, ref: str, reward) -> None:
        self._rewards[ref] = reward

    def resolve_policy(self, ref: str):
        if ref not in self._policies:
            raise ModelResolutionError(f"unknown policy ref {ref!r}")
        return self._policies[ref]

    def resolve_reward(self, ref: str):
        if ref not in self._rewards:
            raise ModelResolutionError(f"unknown reward ref {ref!r}")
        return self._rewards[ref]


@dataclass
class RoundConfig:
    round_index: int
    policy_ref: str
    reward_ref: str | None = None
    annotation_mode: str = TERMINAL_GUIDED
    rollouts: int = 16
    candidates_per_step: int = 8
    escalation_ladder: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0,)
    max_depth: int = 16
    exploration_c: float = 2.0
    temperature: float = 0.8

    def __post_init__(self) -> None:
        if not 1 <= self.round_index <= 4:
            raise ValueError("round_index must be within 1..4")
        if (self.reward_ref is not None) != (self.annotation_mode == PPM_AUGMENTED):
            raise ValueError("reward_ref present iff annotation_mode is ppm_augmented")
        if list(self.escalation_ladder) != sorted(set(self.escalation_ladder)):
            raise ValueError("escalation_ladder must be strictly increasing")
        if not self.seeds:
            raise ValueError("at least one seed required")

    def generation_config(self, seed: int, rollouts: int | None = None) -> GenerationConfig:
        return GenerationConfig(
            num_rollouts=rollouts or self.rollouts,
            candidates_per_step=self.candidates_per_step,
            max_depth=self.max_depth,
            exploration_c=self.exploration_c,
            annotation_mode=self.annotation_mode,
            seed=seed,
            temperature=self.temperature,
        )


def default_recipe(policy_refs: list[str], reward_refs: list[str | None],
                   base_seed: int = 0) -> list[RoundConfig]:
    """The four-round schedule: a small bootstrap round, two 16-rollout rounds
    (reward-guided from round 3), and a wide final round with 16 candidates,
    two seeded expansions per problem and a 64->128 escalation ladder."""
    if len(policy_refs) != 4 or len(reward_refs) != 4:
        raise ValueError("exactly four policy refs and four reward refs required")
    rounds = []
    settings = [
        dict(rollouts=8, candidates_per_step=5, escalation_ladder=(16,),
             seeds=(base_seed,)),
        dict(rollouts=16, candidates_per_step=8, escalation_ladder=(16,),
             seeds=(base_seed,)),
        dict(rollouts=16, candidates_per_step=8, escalation_ladder=(16,),
             seeds=(base_seed,)),
        dict(rollouts=16, candidates_per_step=16, escalation_ladder=(64, 128),
             seeds=(base_seed, base_seed + 1)),
    ]
    for i, (policy_ref, reward_ref, setting) in enumerate(
            zip(policy_refs, reward_refs, settings), start=1):
        rounds.append(
            RoundConfig(
                round_index=i,
                policy_ref=policy_ref,
                reward_ref=reward_ref,
                annotation_mode=PPM_AUGMENTED if reward_ref else TERMINAL_GUIDED,
                **setting,
            )
        )
    return rounds


# ---------------------------------------------------------------------------
# Per-problem processing
# ---------------------------------------------------------------------------

@dataclass
class ProblemResult:
    problem: Problem
    base_trees: list[SearchTree] = field(default_factory=list)
    escalation_trees: list[tuple[int, SearchTree]] = field(default_factory=list)
    tree_files: list[str] = field(default_factory=list)
    error: str | None = None

    @property
    def all_trees(self) -> list[SearchTree]:
        return self.base_trees + [t for _, t in self.escalation_trees]

    def analysis(self) -> dict:
        """Derived quantities: trajectory union, difficulty before and after
        escalation, solvedness."""
        base_groups = [extract_trajectories(t) for t in self.base_trees]
        union = union_trajectories(base_groups)
        initial = categorize(self.problem, union)
        difficulty = initial
        rungs_run = []
        for rung, tree in self.escalation_trees:
            union = union_trajectories([union, extract_trajectories(tree)])
            difficulty = categorize(self.problem, union)
            rungs_run.append(rung)
        return {
            "trajectories": union,
            "initial_difficulty": initial,
            "final_difficulty": difficulty,
            "rungs_run": rungs_run,
            "solved": any(t.is_correct for t in union),
        }


def _tree_filename(problem_id: str, seed_index: int, rung: int | None) -> str:
    if rung is not None:
        return f"{problem_id}.esc{rung}.tree.json"
    if seed_index == 0:
        return f"{problem_id}.tree.json"
    return f"{problem_id}.seed{seed_index}.tree.json"


def process_problem(problem: Problem, config: RoundConfig, policy, reward,
                    verifier, trees_dir: Path) -> ProblemResult:
    """Generate all tree expansions for one problem, escalating while it stays
    hard, and persist every tree."""
    result = ProblemResult(problem=problem)
    try:
        for k, seed in enumerate(config.seeds):
            gen = config.generation_config(seed=derive_seed(seed, problem.id))
            tree = run_mcts(problem, policy, verifier, reward, gen)
            result.base_trees.append(tree)
            result.tree_files.append(
                _write_tree(tree, trees_dir / _tree_filename(problem.id, k, None))
            )
        union = union_trajectories([extract_trajectories(t) for t in result.base_trees])
        difficulty = categorize(problem, union)
        for rung in config.escalation_ladder:
            if difficulty != HARD:
                break
            gen = config.generation_config(
                seed=derive_seed(config.seeds[0], problem.id, "escalation", rung),
                rollouts=rung,
            )
            tree = run_mcts(problem, policy, verifier, reward, gen)
            result.escalation_trees.append((rung, tree))
            result.tree_files.append(
                _write_tree(tree, trees_dir / _tree_filename(problem.id, 0, rung))
            )
            union = union_trajectories([union, extract_trajectories(tree)])
            difficulty = categorize(problem, union)
    except Exception as exc:  # per-problem failures never abort the round
        logger.exception("problem %s failed", problem.id)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _write_tree(tree: SearchTree, path: Path) -> str:
    path.write_bytes(tree_to_json_bytes(tree))
    return path.name


# ---------------------------------------------------------------------------
# Filtering and reporting
# ---------------------------------------------------------------------------

def filter_synthetic(bank: list[Problem],
                     trajectories_by_problem: dict[str, list[Trajectory]]) -> list[Problem]:
    """Drop synthetic problems whose correct ratio is below 1/2 (rollout-
    weighted); curated problems always stay."""
    kept = []
    for problem in bank:
        if problem.origin != "synthetic":
            kept.append(problem)
            continue
        trajectories = trajectories_by_problem.get(problem.id, [])
        total = sum(len(t.rollout_indices) for t in trajectories)
        correct = sum(len(t.rollout_indices) for t in trajectories if t.is_correct)
        if total and correct / total >= 0.5:
            kept.append(problem)
    return kept


def tree_token_count(tree: SearchTree) -> int:
    return sum(len(n.raw_text.split()) for n in tree.nodes.values() if n.parent is not None)


@dataclass
class RoundReport:
    round_index: int
    policy_ref: str
    reward_ref: str | None
    total_problems: int
    solved: int
    initial_difficulty_counts: dict[str, int]
    solved_by_initial_difficulty: dict[str, int]
    final_difficulty_counts: dict[str, int]
    escalated: int
    escalation_runs: int
    errors: int
    filtered_synthetic: list[str]
    dataset_sizes: dict[str, int]
    token_count: int
    per_problem: list[dict]
    wall_clock_seconds: float = 0.0

    @property
    def solved_pct(self) -> float:
        return 100.0 * self.solved / self.total_problems if self.total_problems else 0.0

    def to_dict(self) -> dict:
        # Timing is deliberately not serialized so identical inputs produce
        # byte-identical reports; wall clock lives in the metrics dump.
        return {
            "schema_version": 1,
            "round_index": self.round_index,
            "policy_ref": self.policy_ref,
            "reward_ref": self.reward_ref,
            "total_problems": self.total_problems,
            "solved": self.solved,
            "solved_pct": self.solved_pct,
            "initial_difficulty_counts": self.initial_difficulty_counts,
            "solved_by_initial_difficulty": self.solved_by_initial_difficulty,
            "final_difficulty_counts": self.final_difficulty_counts,
            "escalated": self.escalated,
            "escalation_runs": self.escalation_runs,
            "errors": self.errors,
            "filtered_synthetic": self.filtered_synthetic,
            "dataset_sizes": self.dataset_sizes,
            "token_count": self.token_count,
            "per_problem": self.per_problem,
        }

    def render_table(self) -> str:
        def rate(bucket: str) -> str:
            total = self.initial_difficulty_counts.get(bucket, 0)
            if not total:
                return "-"
            return f"{100.0 * self.solved_by_initial_difficulty.get(bucket, 0) / total:.2f}%"

        header = f"{'round':>5}  {'policy':<24} {'easy':>8} {'medium':>8} {'hard':>8} {'all':>8}"
        row = (
            f"{self.round_index:>5}  {self.policy_ref:<24} "
            f"{rate('easy'):>8} {rate('medium'):>8} {rate('hard'):>8} "
            f"{self.solved_pct:>7.2f}%"
        )
        lines = [header, "-" * len(header), row,
                 f"wall clock: {self.wall_clock_seconds:.2f}s"]
        return "\n".join(lines)


def round_report_from_dict(record: dict) -> RoundReport:
    return RoundReport(
        round_index=record["round_index"],
        policy_ref=record["policy_ref"],
        reward_ref=record.get("reward_ref"),
        total_problems=record["total_problems"],
        solved=record["solved"],
        initial_difficulty_counts=record["initial_difficulty_counts"],
        solved_by_initial_difficulty=record["solved_by_initial_difficulty"],
        final_difficulty_counts=record["final_difficulty_counts"],
        escalated=record["escalated"],
        escalation_runs=record["escalation_runs"],
        errors=record["errors"],
        filtered_synthetic=record["filtered_synthetic"],
        dataset_sizes=record["dataset_sizes"],
        token_count=record["token_count"],
        per_problem=record["per_problem"],
    )


def coverage_trend(reports: list[RoundReport]) -> dict:
    """Coverage deltas between consecutive rounds with regression flags."""
    if len(reports) < 2:
        raise ValueError("coverage_trend needs at least two round reports")
    coverage = [r.solved_pct for r in reports]
    deltas = [b - a for a, b in zip(coverage, coverage[1:])]
    per_difficulty = {}
    for bucket in ("easy", "medium", "hard"):
        rates = []
        for report in reports:
            total = report.initial_difficulty_counts.get(bucket, 0)
            solved = report.solved_by_initial_difficulty.get(bucket, 0)
            rates.append(100.0 * solved / total if total else None)
        valid = [r for r in rates if r is not None]
        per_difficulty[bucket] = {
            "rates": rates,
            "deltas": [b - a for a, b in zip(valid, valid[1:])],
        }
    return {
        "coverage_pct": coverage,
        "deltas": deltas,
        "monotone_increasing": all(d > 0 for d in deltas),
        "regressions": [i + 1 for i, d in enumerate(deltas) if d < 0],
        "per_difficulty": per_difficulty,
    }


# ---------------------------------------------------------------------------
# Round driver
# ---------------------------------------------------------------------------

def run_round(bank: list[Problem], config: RoundConfig, registry: ModelRegistry,
              verifier, out_dir: str | Path, workers: int = 1,
              resume: bool = True) -> RoundReport:
    """Generate, escalate, filter and export one round.

    Idempotent for a fixed (bank, config, seeds): datasets and report.json are
    reduced in bank order from per-problem artifacts, so re-runs overwrite
    identically regardless of worker scheduling. Completed problems found in
    the checkpoint are not regenerated.
    """
    out = Path(out_dir)
    trees_dir = out / "trees"
    trees_dir.mkdir(parents=True, exist_ok=True)
    policy = registry.resolve_policy(config.policy_ref)
    reward = registry.resolve_reward(config.reward_ref) if config.reward_ref else None

    started = time.monotonic()
    checkpoint_path = out / "checkpoint.jsonl"
    done = _load_checkpoint(checkpoint_path) if resume else {}
    checkpoint_lock = threading.Lock()
    results: dict[str, ProblemResult] = {}

    def handle(problem: Problem) -> None:
        record = done.get(problem.id)
        if record is not None:
            restored = _restore_result(problem, record, trees_dir)
            if restored is not None:
                results[problem.id] = restored
                return
        result = process_problem(problem, config, policy, reward, verifier, trees_dir)
        results[problem.id] = result
        with checkpoint_lock:
            with open(checkpoint_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(_checkpoint_record(result), sort_keys=True) + "\n")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(handle, bank))
    else:
        for problem in bank:
            handle(problem)

    report = _reduce_round(bank, config, results, out)
    report.wall_clock_seconds = time.monotonic() - started
    (out / "report.txt").write_text(report.render_table() + "\n", encoding="utf-8")
    return report


def _checkpoint_record(result: ProblemResult) -> dict:
    return {
        "problem_id": result.problem.id,
        "base_files": [f for f in result.tree_files[:len(result.base_trees)]],
        "escalation": [
            {"rung": rung, "file": result.tree_files[len(result.base_trees) + i]}
            for i, (rung, _) in enumerate(result.escalation_trees)
        ],
        "error": result.error,
    }


def _load_checkpoint(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    records = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                record = json.loads(line)
                records[record["problem_id"]] = record
    return records


def _restore_result(problem: Problem, record: dict, trees_dir: Path) -> ProblemResult | None:
    if record.get("error"):
        return ProblemResult(problem=problem, error=record["error"])
    try:
        base = [tree_from_json_bytes((trees_dir / f).read_bytes())
                for f in record["base_files"]]
        escalation = [
            (entry["rung"], tree_from_json_bytes((trees_dir / entry["file"]).read_bytes()))
            for entry in record["escalation"]
        ]
    except (OSError, ValueError, KeyError):
        return None  # stale checkpoint; regenerate
    files = list(record["base_files"]) + [e["file"] for e in record["escalation"]]
    return ProblemResult(problem=problem, base_trees=base,
                         escalation_trees=escalation, tree_files=files)


def _reduce_round(bank: list[Problem], config: RoundConfig,
                  results: dict[str, ProblemResult], out: Path) -> RoundReport:
    analyses: dict[str, dict] = {}
    trajectories_by_problem: dict[str, list[Trajectory]] = {}
    for problem in bank:
        result = results[problem.id]
        if result.error is not None:
            continue
        analysis = result.analysis()
        analyses[problem.id] = analysis
        trajectories_by_problem[problem.id] = analysis["trajectories"]

    surviving = filter_synthetic(
        [p for p in bank if p.id in analyses], trajectories_by_problem
    )
    surviving_ids = {p.id for p in surviving}
    filtered = sorted(
        pid for pid in analyses
        if pid not in surviving_ids
    )

    sft_records: list[dict] = []
    pair_records: list[dict] = []
    n_pairs = 0
    token_total = 0
    per_problem = []
    counts = {"easy": 0, "medium": 0, "hard": 0}
    solved_by = {"easy": 0, "medium": 0, "hard": 0}
    final_counts = {"easy": 0, "medium": 0, "hard": 0}
    solved_total = 0
    escalated = 0
    escalation_runs = 0
    errors = 0

    for problem in bank:
        result = results[problem.id]
        if result.error is not None:
            errors += 1
            per_problem.append(
                {"problem_id": problem.id, "status": "error", "error": result.error}
            )
            continue
        analysis = analyses[problem.id]
        token_total += sum(tree_token_count(t) for t in result.all_trees)
        counts[analysis["initial_difficulty"]] += 1
        final_counts[analysis["final_difficulty"]] += 1
        if analysis["solved"]:
            solved_total += 1
            solved_by[analysis["initial_difficulty"]] += 1
        if analysis["rungs_run"]:
            escalated += 1
            escalation_runs += len(analysis["rungs_run"])
        per_problem.append(
            {
                "problem_id": problem.id,
                "status": "ok",
                "initial_difficulty": analysis["initial_difficulty"],
                "final_difficulty": analysis["final_difficulty"],
                "solved": analysis["solved"],
                "escalation_rungs": analysis["rungs_run"],
                "n_trajectories": len(analysis["trajectories"]),
                "n_correct": sum(1 for t in analysis["trajectories"] if t.is_correct),
                "tree_files": result.tree_files,
                "in_training_set": problem.id in surviving_ids,
            }
        )
        if problem.id not in surviving_ids:
            continue
        union = analysis["trajectories"]
        for trajectory in select_sft(union):
            sft_records.append(sft_record(problem, trajectory))
        pairs: list[PreferencePair] = []
        for tree in result.all_trees:
            pairs.extend(build_pairs(tree, union, include_final_answer=False))
        if any(t.is_correct for t in union) and any(t.is_correct is False for t in union):
            pairs.extend(build_final_answer_pairs(problem.id, union))
        n_pairs += len(pairs)
        pair_records.extend(pair_record(p) for p in pairs)

    sft_lines = write_jsonl(sft_records, out / "sft.jsonl")
    pair_lines = write_jsonl(pair_records, out / "pairs.jsonl")
    assert sft_lines == len(sft_records) and pair_lines == n_pairs

    report = RoundReport(
        round_index=config.round_index,
        policy_ref=config.policy_ref,
        reward_ref=config.reward_ref,
        total_problems=len(bank),
        solved=solved_total,
        initial_difficulty_counts=counts,
        solved_by_initial_difficulty=solved_by,
        final_difficulty_counts=final_counts,
        escalated=escalated,
        escalation_runs=escalation_runs,
        errors=errors,
        filtered_synthetic=filtered,
        dataset_sizes={
            "sft_records": sft_lines,
            "pair_records": pair_lines,
            "trees": sum(len(results[p.id].tree_files) for p in bank),
        },
        token_count=token_total,
        per_problem=per_problem,
    )
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return report
