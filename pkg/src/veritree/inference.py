"""Reward-guided test-time search, trajectory selection, and Pass@N evaluation.

At inference there is no ground truth: terminal steps are scored by the reward
model like any other step, small tree expansions run under fresh seeds until
enough distinct trajectories are collected, and the selection rule picks the
answer. Evaluation grades collected answers afterwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .bank import Problem
from .hashing import derive_seed
from .metrics import metrics
from .models import (
    GenerationRequest,
    PolicyModel,
    RewardModel,
    generate_candidates,
    score_step,
)
from .steps import CandidateStep
from .trajectories import Trajectory, extract_trajectories
from .tree import PPM_AUGMENTED, GenerationConfig, run_mcts
from .verify import answers_equal, extract_answer

logger = logging.getLogger(__name__)

SELECT_MEAN_STEP = "mean_step_ppm"
SELECT_FINAL_STEP = "final_step_ppm"


@dataclass
class InferenceConfig:
    candidates_per_step: int = 32
    rollouts_per_step_budget: int = 4
    trajectories_to_sample: int = 8
    selection_rule: str = SELECT_MEAN_STEP
    max_depth: int = 16
    exploration_c: float = 2.0
    temperature: float = 0.8
    seed: int = 0
    max_tree_expansions: int | None = None

    def __post_init__(self) -> None:
        if min(self.candidates_per_step, self.rollouts_per_step_budget,
               self.trajectories_to_sample, self.max_depth) < 1:
            raise ValueError("all inference counts must be >= 1")
        if self.selection_rule not in (SELECT_MEAN_STEP, SELECT_FINAL_STEP):
            raise ValueError(f"unknown selection rule {self.selection_rule!r}")

    def expansion_cap(self) -> int:
        return self.max_tree_expansions or self.trajectories_to_sample


@dataclass
class ScoredTrajectory:
    trajectory: Trajectory
    score: float
    answer: str | None


@dataclass
class DeepThinkResult:
    problem_id: str
    trajectories: list[ScoredTrajectory]  # generation order
    no_answer: bool

    def ranked(self) -> list[ScoredTrajectory]:
        return sorted(self.trajectories, key=lambda t: -t.score)

    def best(self) -> ScoredTrajectory | None:
        ranked = self.ranked()
        return ranked[0] if ranked else None


def _step_reward(step) -> float:
    # Non-terminal steps carry the reward model's prior; a terminal step's Q
    # equals its reward-model terminal score (every backprop added that value).
    return step.ppm_score if step.ppm_score is not None else step.q


def trajectory_score(trajectory: Trajectory, rule: str) -> float:
    if rule == SELECT_FINAL_STEP:
        return _step_reward(trajectory.steps[-1])
    return sum(_step_reward(s) for s in trajectory.steps) / len(trajectory.steps)


def deep_think(problem: Problem, policy: PolicyModel, verifier,
               reward: RewardModel, config: InferenceConfig) -> DeepThinkResult:
    """Collect up to ``trajectories_to_sample`` distinct trajectories via
    successive small reward-guided tree expansions, ranked by the selection rule."""
    if reward is None:
        raise ValueError("deep_think requires a reward model")

    def ppm_terminal_scorer(prob: Problem, path: list[CandidateStep],
                            candidate: CandidateStep) -> tuple[float, bool | None]:
        return score_step(reward, prob, list(path) + [candidate]), None

    collected: list[ScoredTrajectory] = []
    seen: set[tuple[str, ...]] = set()
    for expansion in range(config.expansion_cap()):
        gen = GenerationConfig(
            num_rollouts=config.rollouts_per_step_budget,
            candidates_per_step=config.candidates_per_step,
            max_depth=config.max_depth,
            exploration_c=config.exploration_c,
            annotation_mode=PPM_AUGMENTED,
            seed=derive_seed(config.seed, problem.id, expansion),
            temperature=config.temperature,
        )
        tree = run_mcts(problem, policy, verifier, reward, gen,
                        terminal_scorer=ppm_terminal_scorer)
        for trajectory in extract_trajectories(tree):
            key = trajectory.step_texts
            if key in seen:
                continue
            seen.add(key)
            collected.append(
                ScoredTrajectory(
                    trajectory=trajectory,
                    score=trajectory_score(trajectory, config.selection_rule),
                    answer=trajectory.answer_extracted,
                )
            )
            if len(collected) >= config.trajectories_to_sample:
                break
        if len(collected) >= config.trajectories_to_sample:
            break
    if len(collected) < config.trajectories_to_sample:
        metrics.increment("inference.short_samples")
    return DeepThinkResult(
        problem_id=problem.id,
        trajectories=collected,
        no_answer=not collected,
    )


# ---------------------------------------------------------------------------
# Pass@N evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredAnswer:
    answer: str | None
    score: float


@dataclass
class EvalResult:
    ns: list[int]
    pass_at_n: dict[int, float]
    selected_accuracy: dict[int, float]
    per_problem: list[dict]
    excluded: int

    def to_dict(self) -> dict:
        return {
            "ns": self.ns,
            "pass_at_n": {str(n): v for n, v in self.pass_at_n.items()},
            "selected_accuracy": {str(n): v for n, v in self.selected_accuracy.items()},
            "excluded": self.excluded,
            "per_problem": self.per_problem,
        }


def _is_correct(sample: ScoredAnswer, ground_truth: str) -> bool:
    return sample.answer is not None and answers_equal(sample.answer, ground_truth)


def pass_at_n(samples_per_problem: list[list[ScoredAnswer]],
              ground_truths: list[str], ns: list[int]) -> EvalResult:
    """Pass@N (any of the first N correct) and selected-answer accuracy (argmax
    score within the first N) per N; problems with fewer than max(N) samples
    are excluded with a warning."""
    if len(samples_per_problem) != len(ground_truths):
        raise ValueError("one ground truth per problem required")
    ns = sorted(set(ns))
    needed = max(ns)
    solved = {n: 0 for n in ns}
    selected_ok = {n: 0 for n in ns}
    per_problem = []
    included = 0
    excluded = 0
    for samples, truth in zip(samples_per_problem, ground_truths):
        if len(samples) < needed:
            excluded += 1
            metrics.increment("eval.excluded_problems")
            logger.warning("problem excluded from Pass@N: %d < %d samples",
                           len(samples), needed)
            continue
        included += 1
        correctness = [_is_correct(s, truth) for s in samples]
        detail = {"n_samples": len(samples), "per_n": {}}
        for n in ns:
            window = samples[:n]
            hit = any(correctness[:n])
            best_idx = max(range(n), key=lambda i: (window[i].score, -i))
            chosen_ok = correctness[best_idx]
            solved[n] += int(hit)
            selected_ok[n] += int(chosen_ok)
            detail["per_n"][n] = {
                "pass": hit,
                "chosen_answer": window[best_idx].answer,
                "chosen_correct": chosen_ok,
            }
        per_problem.append(detail)
    denom = max(included, 1)
    return EvalResult(
        ns=ns,
        pass_at_n={n: solved[n] / denom for n in ns},
        selected_accuracy={n: selected_ok[n] / denom for n in ns},
        per_problem=per_problem,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# Best-of-N baseline (no tree search)
# ---------------------------------------------------------------------------

@dataclass
class SampledSolution:
    steps: list[CandidateStep]
    answer: str | None
    score: float | None


def sample_solution(problem: Problem, policy: PolicyModel, seed: int,
                    max_depth: int = 16, temperature: float = 0.8) -> SampledSolution | None:
    """One full solution by sequential single-candidate decoding; None if the
    policy stalls or never terminates within the depth budget."""
    steps: list[CandidateStep] = []
    for depth in range(max_depth):
        req = GenerationRequest(
            problem=problem,
            prefix=tuple(steps),
            n=1,
            temperature=temperature,
            seed=derive_seed(seed, problem.id, depth),
        )
        candidates = generate_candidates(policy, req)
        if not candidates:
            metrics.increment("baseline.stalled_samples")
            return None
        step = candidates[0]
        steps.append(step)
        if step.declared_terminal:
            return SampledSolution(steps=steps, answer=extract_answer(step), score=None)
    metrics.increment("baseline.unterminated_samples")
    return None


def best_of_n_baseline(problem: Problem, policy: PolicyModel, orm: RewardModel,
                       n: int, seed: int = 0, max_depth: int = 16,
                       temperature: float = 0.8) -> tuple[SampledSolution | None,
                                                          list[SampledSolution]]:
    """Sample N independent full solutions, score each with the outcome reward
    model, and return (argmax-scored solution, all completed samples)."""
    samples: list[SampledSolution] = []
    for i in range(n):
        solution = sample_solution(
            problem, policy, seed=derive_seed(seed, "sample", i),
            max_depth=max_depth, temperature=temperature,
        )
        if solution is None:
            continue
        solution.score = score_step(orm, problem, solution.steps)
        samples.append(solution)
    if not samples:
        return None, []
    best = max(samples, key=lambda s: s.score)
    # max() keeps the first of equal scores, matching the documented tie rule.
    return best, samples
