"""Step-level preference pairs and reference losses for reward-model training.

Intermediate pairs contrast sibling steps under a shared prefix: positives
must be able to reach a correct final answer in their subtree, negatives must
only reach incorrect ones. Final-answer pairs contrast whole trajectories.
The losses here are numeric oracles over scores, not a training loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .trajectories import Trajectory
from .tree import Node, SearchTree

KIND_INTERMEDIATE = "intermediate"
KIND_FINAL_ANSWER = "final_answer"


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    kind: str
    shared_prefix: tuple[str, ...]
    positive: tuple[str, ...]
    negative: tuple[str, ...]
    q_pos: float
    q_neg: float
    pos_node: int | None = None
    neg_node: int | None = None

    def key(self) -> tuple:
        """Identity used for multiset comparison against reference extractors."""
        return (self.problem_id, self.kind, self.shared_prefix, self.positive,
                self.negative, self.q_pos, self.q_neg)


@dataclass(frozen=True)
class QVector:
    labels: tuple[float, ...]
    predictions: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.predictions):
            raise ValueError("labels and predictions must have equal length")
        if len(self.labels) < 1:
            raise ValueError("QVector must be non-empty")


# ---------------------------------------------------------------------------
# Pair construction
# ---------------------------------------------------------------------------

def _subtree_outcomes(tree: SearchTree) -> dict[int, tuple[int, int]]:
    """(terminal_count, correct_count) per node over its whole subtree."""
    outcomes: dict[int, tuple[int, int]] = {}

    def visit(node: Node) -> tuple[int, int]:
        terminals = 0
        correct = 0
        if node.is_terminal:
            terminals += 1
            if node.is_correct:
                correct += 1
        for child in tree.children_of(node):
            t, c = visit(child)
            terminals += t
            correct += c
        outcomes[node.id] = (terminals, correct)
        return terminals, correct

    visit(tree.root)
    return outcomes


def _mixed(trajectories: list[Trajectory]) -> bool:
    return (any(t.is_correct for t in trajectories)
            and any(t.is_correct is False for t in trajectories))


def build_pairs(tree: SearchTree, trajectories: list[Trajectory],
                include_final_answer: bool = True) -> list[PreferencePair]:
    """All preference pairs from one tree.

    For each expanded position: up to two highest-Q non-terminal siblings whose
    subtree reaches a correct answer, crossed with up to two lowest-Q siblings
    whose subtree reaches only incorrect answers. Problems whose trajectories
    are all correct or all incorrect produce nothing.
    """
    if not _mixed(trajectories):
        return []
    outcomes = _subtree_outcomes(tree)
    pairs: list[PreferencePair] = []
    for node_id in sorted(tree.expanded):
        parent = tree.node(node_id)
        if not parent.children:
            continue
        prefix = tuple(
            n.raw_text for n in tree.path_to_root(parent)[1:]
        )
        positives: list[Node] = []
        negatives: list[Node] = []
        for child in tree.children_of(parent):
            if child.is_terminal or child.visits < 1:
                continue  # answer steps pair at trajectory level; Q needs visits
            terminals, correct = outcomes[child.id]
            if correct >= 1:
                positives.append(child)
            elif terminals >= 1:
                negatives.append(child)
        positives.sort(key=lambda n: -n.q_value)
        negatives.sort(key=lambda n: n.q_value)
        for pos in positives[:2]:
            for neg in negatives[:2]:
                if pos.q_value < neg.q_value:
                    continue
                pairs.append(
                    PreferencePair(
                        problem_id=tree.problem_id,
                        kind=KIND_INTERMEDIATE,
                        shared_prefix=prefix,
                        positive=(pos.raw_text,),
                        negative=(neg.raw_text,),
                        q_pos=pos.q_value,
                        q_neg=neg.q_value,
                        pos_node=pos.id,
                        neg_node=neg.id,
                    )
                )
    if include_final_answer:
        pairs.extend(build_final_answer_pairs(tree.problem_id, trajectories))
    return pairs


def build_final_answer_pairs(problem_id: str,
                             trajectories: list[Trajectory]) -> list[PreferencePair]:
    """Two highest-average-Q correct trajectories crossed with the two
    lowest-average-Q incorrect ones; prefixes are relaxed to empty."""
    correct = sorted(
        [t for t in trajectories if t.is_correct], key=lambda t: -t.avg_q
    )[:2]
    incorrect = sorted(
        [t for t in trajectories if t.is_correct is False], key=lambda t: t.avg_q
    )[:2]
    pairs = []
    for pos in correct:
        for neg in incorrect:
            if pos.avg_q < neg.avg_q:
                continue
            pairs.append(
                PreferencePair(
                    problem_id=problem_id,
                    kind=KIND_FINAL_ANSWER,
                    shared_prefix=(),
                    positive=pos.step_texts,
                    negative=neg.step_texts,
                    q_pos=pos.avg_q,
                    q_neg=neg.avg_q,
                )
            )
    return pairs


def build_orm_pairs(trajectories: list[Trajectory]) -> list[PreferencePair]:
    """Whole-trajectory pairs for outcome-reward training: same top-2 / bottom-2
    selection by average Q."""
    if not trajectories:
        return []
    return build_final_answer_pairs(trajectories[0].problem_id, trajectories)


def validate_pairs(tree: SearchTree, pairs: list[PreferencePair]) -> list[str]:
    """Re-check every intermediate pair against the tree: shared prefix, sibling
    relation, subtree destinations, and Q ordering. Returns violations."""
    violations = []
    outcomes = _subtree_outcomes(tree)
    for i, pair in enumerate(pairs):
        if pair.q_pos < pair.q_neg:
            violations.append(f"pair {i}: q_pos < q_neg")
        if pair.kind != KIND_INTERMEDIATE:
            continue
        pos = tree.nodes.get(pair.pos_node) if pair.pos_node is not None else None
        neg = tree.nodes.get(pair.neg_node) if pair.neg_node is not None else None
        if pos is None or neg is None:
            violations.append(f"pair {i}: missing node references")
            continue
        if pos.parent != neg.parent:
            violations.append(f"pair {i}: positive and negative are not siblings")
            continue
        prefix = tuple(n.raw_text for n in tree.path_to_root(pos)[1:-1])
        if prefix != pair.shared_prefix:
            violations.append(f"pair {i}: shared_prefix does not match the tree path")
        if pair.positive != (pos.raw_text,) or pair.negative != (neg.raw_text,):
            violations.append(f"pair {i}: step texts do not match the nodes")
        pos_terminals, pos_correct = outcomes[pos.id]
        neg_terminals, neg_correct = outcomes[neg.id]
        if pos_correct < 1:
            violations.append(f"pair {i}: positive subtree reaches no correct answer")
        if neg_correct != 0 or neg_terminals < 1:
            violations.append(f"pair {i}: negative subtree is not incorrect-only")
    return violations


# ---------------------------------------------------------------------------
# Reference losses
# ---------------------------------------------------------------------------

def _softplus(x: float) -> float:
    # log(1 + e^x) without overflow; equals -log(sigmoid(-x)).
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def ppm_pairwise_loss(scores_pos: list[float], scores_neg: list[float]) -> float:
    """Mean of -log sigmoid(r_pos - r_neg) over every positive x negative
    combination (1/(2x2) normalization when both sides carry two scores)."""
    if not scores_pos or not scores_neg:
        raise ValueError("both score lists must be non-empty")
    total = 0.0
    for rp in scores_pos:
        for rn in scores_neg:
            total += _softplus(-(rp - rn))
    return total / (len(scores_pos) * len(scores_neg))


def pqm_mse_loss(v: QVector) -> float:
    """Squared error ||labels - predictions||^2 (a sum, not a mean)."""
    return sum((a - b) ** 2 for a, b in zip(v.labels, v.predictions))


def orm_pairwise_loss(scores_pos: list[float], scores_neg: list[float]) -> float:
    """Trajectory-level pairwise ranking loss; same form as the step-level one."""
    return ppm_pairwise_loss(scores_pos, scores_neg)


def dataset_pairwise_loss(records: list[dict]) -> dict:
    """Aggregate pairwise loss over score records, reported under both
    averaging conventions (per combination and per problem)."""
    per_problem: dict[str, list[float]] = {}
    weighted_total = 0.0
    total_combos = 0
    for record in records:
        loss = ppm_pairwise_loss(record["scores_pos"], record["scores_neg"])
        combos = len(record["scores_pos"]) * len(record["scores_neg"])
        weighted_total += loss * combos
        total_combos += combos
        per_problem.setdefault(str(record.get("problem_id", "")), []).append(loss)
    problem_means = [sum(v) / len(v) for v in per_problem.values()]
    return {
        "per_pair_mean": weighted_total / total_combos if total_combos else 0.0,
        "per_problem_mean": (sum(problem_means) / len(problem_means)
                             if problem_means else 0.0),
        "n_records": len(records),
        "n_pairs": total_combos,
        "n_problems": len(per_problem),
    }


def dataset_mse_loss(records: list[dict]) -> dict:
    losses = [
        pqm_mse_loss(QVector(tuple(r["labels"]), tuple(r["predictions"])))
        for r in records
    ]
    return {
        "per_trajectory_mean": sum(losses) / len(losses) if losses else 0.0,
        "total": sum(losses),
        "n_records": len(records),
    }


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def pair_record(pair: PreferencePair) -> dict:
    return {
        "problem_id": pair.problem_id,
        "kind": pair.kind,
        "prefix_text": "\n\n".join(pair.shared_prefix),
        "pos_text": "\n\n".join(pair.positive),
        "neg_text": "\n\n".join(pair.negative),
        "prefix_steps": list(pair.shared_prefix),
        "pos_steps": list(pair.positive),
        "neg_steps": list(pair.negative),
        "q_pos": pair.q_pos,
        "q_neg": pair.q_neg,
    }


def write_pairs_jsonl(pairs: list[PreferencePair], path: str | Path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_record(pair), ensure_ascii=False, sort_keys=True) + "\n")
    return len(pairs)
