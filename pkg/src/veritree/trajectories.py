"""Turn finished search trees into annotated trajectories and training records."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .bank import Problem
from .prompts import render_solution_text
from .steps import render_step
from .tree import ROLLOUT_TERMINAL, SearchTree

EASY = "easy"
MEDIUM = "medium"
HARD = "hard"


@dataclass(frozen=True)
class TrajectoryStep:
    nl_comment: str
    code: str
    raw_text: str
    q: float
    visits: int
    ppm_score: float | None
    is_terminal: bool
    answer_text: str | None
    stdout: str


@dataclass
class Trajectory:
    """One root-to-terminal path with per-step Q values at extraction time."""

    problem_id: str
    steps: list[TrajectoryStep]
    is_correct: bool | None
    avg_q: float
    rollout_indices: list[int]
    tree_seed: int
    node_ids: list[int]
    answer_extracted: str | None
    token_count: int

    @property
    def step_texts(self) -> tuple[str, ...]:
        return tuple(s.raw_text for s in self.steps)


def extract_trajectories(tree: SearchTree) -> list[Trajectory]:
    """One trajectory per completed terminal rollout; identical step sequences
    are kept once with their rollout indices merged."""
    by_key: dict[tuple[str, ...], Trajectory] = {}
    order: list[tuple[str, ...]] = []
    for record in tree.rollout_log:
        if record.status != ROLLOUT_TERMINAL:
            continue
        nodes = [tree.node(nid) for nid in record.path[1:]]
        key = tuple(n.raw_text for n in nodes)
        if key in by_key:
            by_key[key].rollout_indices.append(record.index)
            continue
        steps = [
            TrajectoryStep(
                nl_comment=n.nl_comment,
                code=n.code,
                raw_text=n.raw_text,
                q=n.q_cum / n.visits,
                visits=n.visits,
                ppm_score=n.ppm_score,
                is_terminal=n.is_terminal,
                answer_text=n.candidate.answer_text if n.candidate else None,
                stdout=n.stdout,
            )
            for n in nodes
        ]
        terminal = nodes[-1]
        trajectory = Trajectory(
            problem_id=tree.problem_id,
            steps=steps,
            is_correct=terminal.is_correct,
            avg_q=sum(s.q for s in steps) / len(steps),
            rollout_indices=[record.index],
            tree_seed=tree.rng_seed,
            node_ids=[n.id for n in nodes],
            answer_extracted=terminal.answer_extracted,
            token_count=sum(len(s.raw_text.split()) for s in steps),
        )
        by_key[key] = trajectory
        order.append(key)
    return [by_key[key] for key in order]


def union_trajectories(groups: list[list[Trajectory]]) -> list[Trajectory]:
    """Union trajectory sets from several tree expansions of one problem,
    deduplicating identical step sequences (first occurrence wins)."""
    seen: set[tuple[str, ...]] = set()
    merged: list[Trajectory] = []
    for group in groups:
        for trajectory in group:
            key = trajectory.step_texts
            if key in seen:
                continue
            seen.add(key)
            merged.append(trajectory)
    return merged


def categorize(problem: Problem, trajectories: list[Trajectory]) -> str:
    """easy: every trajectory correct; hard: none correct (or none at all);
    medium otherwise."""
    if not trajectories:
        return HARD
    correct = sum(1 for t in trajectories if t.is_correct)
    if correct == len(trajectories):
        return EASY
    if correct == 0:
        return HARD
    return MEDIUM


def select_sft(trajectories: list[Trajectory]) -> list[Trajectory]:
    """Up to two correct trajectories with the highest average Q; ties keep
    extraction order."""
    correct = [t for t in trajectories if t.is_correct]
    ranked = sorted(correct, key=lambda t: -t.avg_q)
    return ranked[:2]


def render_trajectory_text(problem: Problem, trajectory: Trajectory) -> str:
    """Training-format text; the terminal step's output block is rebuilt from
    the verified execution's stdout (model-claimed outputs are ignored)."""
    texts = [s.raw_text for s in trajectory.steps[:-1]]
    last = trajectory.steps[-1]
    texts.append(
        render_step(
            last.code,
            terminal=True,
            output=last.stdout.rstrip("\n"),
            answer=last.answer_text,
        )
    )
    return render_solution_text(problem.statement, texts)


def sft_record(problem: Problem, trajectory: Trajectory) -> dict:
    return {
        "problem": problem.statement,
        "problem_id": problem.id,
        "steps": [s.raw_text for s in trajectory.steps],
        "final_answer": trajectory.answer_extracted,
        "text": render_trajectory_text(problem, trajectory),
        "avg_q": trajectory.avg_q,
        "token_count": trajectory.token_count,
        "tree_seed": trajectory.tree_seed,
    }


def trajectory_record(trajectory: Trajectory) -> dict:
    return {
        "schema_version": 1,
        "problem_id": trajectory.problem_id,
        "steps": [
            {
                "nl_comment": s.nl_comment,
                "code": s.code,
                "raw_text": s.raw_text,
                "q": s.q,
                "visits": s.visits,
                "ppm_score": s.ppm_score,
            }
            for s in trajectory.steps
        ],
        "is_correct": trajectory.is_correct,
        "avg_q": trajectory.avg_q,
        "rollout_indices": trajectory.rollout_indices,
        "tree_seed": trajectory.tree_seed,
        "answer": trajectory.answer_extracted,
        "token_count": trajectory.token_count,
    }


def write_jsonl(records: list[dict], path: str | Path) -> int:
    """Append-free JSONL writer; returns the number of lines written."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    return len(records)
