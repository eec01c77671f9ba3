"""MCTS engine over code-verified reasoning steps.

A search tree grows one problem at a time: each rollout descends from the
root by UCT, expands unexpanded nodes by sampling candidate steps from the
policy, keeps only candidates whose concatenated path code executes cleanly,
and backpropagates a terminal reward along the path. Cumulative reward q and
visit count N give each step its quality estimate Q = q / N.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable

from .bank import Problem
from .metrics import metrics
from .models import (
    GenerationRequest,
    PolicyModel,
    RewardModel,
    generate_candidates,
    score_step,
)
from .steps import CandidateStep, parse_candidate
from .verify import STATUS_OK, grade_candidate

TERMINAL_GUIDED = "terminal_guided"
PPM_AUGMENTED = "ppm_augmented"

ROLLOUT_TERMINAL = "terminal"
ROLLOUT_TRUNCATED = "truncated"
ROLLOUT_ABORTED = "aborted"

TREE_SCHEMA_VERSION = 1


class SelectionError(RuntimeError):
    """A node with no valid children was selected for descent."""


@dataclass
class GenerationConfig:
    """Settings for one search-tree expansion."""

    num_rollouts: int = 16
    candidates_per_step: int = 8
    max_depth: int = 16
    exploration_c: float = 2.0
    annotation_mode: str = TERMINAL_GUIDED
    seed: int = 0
    temperature: float = 0.8
    count_aborted_rollouts: bool = False
    max_rollout_attempts: int | None = None

    def __post_init__(self) -> None:
        if self.num_rollouts < 1:
            raise ValueError("num_rollouts must be >= 1")
        if self.candidates_per_step < 1:
            raise ValueError("candidates_per_step must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.exploration_c < 0:
            raise ValueError("exploration_c must be >= 0")
        if self.annotation_mode not in (TERMINAL_GUIDED, PPM_AUGMENTED):
            raise ValueError(f"unknown annotation_mode {self.annotation_mode!r}")

    def attempt_cap(self) -> int:
        if self.max_rollout_attempts is not None:
            return self.max_rollout_attempts
        return max(4 * self.num_rollouts, self.num_rollouts + 8)

    def to_dict(self) -> dict:
        return {
            "num_rollouts": self.num_rollouts,
            "candidates_per_step": self.candidates_per_step,
            "max_depth": self.max_depth,
            "exploration_c": self.exploration_c,
            "annotation_mode": self.annotation_mode,
            "seed": self.seed,
            "temperature": self.temperature,
            "count_aborted_rollouts": self.count_aborted_rollouts,
            "max_rollout_attempts": self.max_rollout_attempts,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "GenerationConfig":
        return cls(**record)


@dataclass
class Node:
    """One reasoning step (the root is the question and is never scored)."""

    id: int
    parent: int | None
    step_index: int
    nl_comment: str
    code: str
    raw_text: str
    q_cum: float = 0.0
    visits: int = 0
    ppm_score: float | None = None
    is_terminal: bool = False
    terminal_reward: float | None = None
    answer_extracted: str | None = None
    is_correct: bool | None = None
    stdout: str = ""
    children: list[int] = field(default_factory=list)
    candidate: CandidateStep | None = field(default=None, repr=False, compare=False)

    @property
    def q_value(self) -> float:
        if self.visits == 0:
            raise ValueError(f"node {self.id} is unvisited; Q undefined")
        return self.q_cum / self.visits


@dataclass
class RolloutRecord:
    index: int
    path: list[int]
    reward: float | None
    status: str


@dataclass
class SearchTree:
    problem_id: str
    rng_seed: int
    config: GenerationConfig
    nodes: dict[int, Node] = field(default_factory=dict)
    root_id: int = 0
    rollouts_completed: int = 0
    rollouts_aborted: int = 0
    rollout_log: list[RolloutRecord] = field(default_factory=list)
    expanded: set[int] = field(default_factory=set)

    @property
    def root(self) -> Node:
        return self.nodes[self.root_id]

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def children_of(self, node: Node) -> list[Node]:
        return [self.nodes[cid] for cid in node.children]

    def path_to_root(self, node: Node) -> list[Node]:
        path = [node]
        while path[-1].parent is not None:
            path.append(self.nodes[path[-1].parent])
        return list(reversed(path))

    def add_node(self, parent: Node, candidate: CandidateStep) -> Node:
        node = Node(
            id=len(self.nodes),
            parent=parent.id,
            step_index=parent.step_index + 1,
            nl_comment=candidate.nl_comment,
            code=candidate.code,
            raw_text=candidate.raw_text,
            is_terminal=candidate.declared_terminal,
            candidate=candidate,
        )
        self.nodes[node.id] = node
        parent.children.append(node.id)
        return node


def new_tree(problem: Problem, config: GenerationConfig) -> SearchTree:
    tree = SearchTree(problem_id=problem.id, rng_seed=config.seed, config=config)
    root = Node(id=0, parent=None, step_index=0, nl_comment="", code="", raw_text="")
    tree.nodes[0] = root
    return tree


# ---------------------------------------------------------------------------
# Selection and backpropagation
# ---------------------------------------------------------------------------

def uct_score(node: Node, parent_visits: int, c: float) -> float:
    """Exploitation Q(s) plus exploration bonus c * sqrt(ln N_parent / N(s)).

    Pure and deterministic; unvisited nodes are a domain error (selection
    handles them separately).
    """
    if node.visits < 1:
        raise ValueError(f"uct_score undefined for unvisited node {node.id}")
    if parent_visits < node.visits:
        raise ValueError("parent_visits must be >= node.visits")
    return node.q_cum / node.visits + c * math.sqrt(math.log(parent_visits) / node.visits)


def select_child(tree: SearchTree, parent: Node, c: float) -> Node:
    """Unvisited child with the lowest index first; otherwise argmax UCT.

    Ties break toward the lowest child index, so selection is a pure function
    of the tree state.
    """
    children = tree.children_of(parent)
    if not children:
        raise SelectionError(f"node {parent.id} has no children to select from")
    for child in children:
        if child.visits == 0:
            return child
    best = children[0]
    best_score = uct_score(best, parent.visits, c)
    for child in children[1:]:
        score = uct_score(child, parent.visits, c)
        if score > best_score:
            best, best_score = child, score
    return best


def _apply_rollout(tree: SearchTree, path: list[Node], reward: float, status: str) -> None:
    for node in path[1:]:
        node.q_cum += reward
        node.visits += 1
    tree.root.visits += 1
    tree.rollouts_completed += 1
    tree.rollout_log.append(
        RolloutRecord(
            index=len(tree.rollout_log),
            path=[n.id for n in path],
            reward=reward,
            status=status,
        )
    )


def backpropagate(tree: SearchTree, leaf: Node, terminal_reward: float) -> SearchTree:
    """Add ``terminal_reward`` to q and bump visits for every node on the
    root-to-leaf path (the root only counts the visit)."""
    if leaf.id not in tree.nodes or tree.nodes[leaf.id] is not leaf:
        raise ValueError(f"leaf {leaf.id} is not part of this tree")
    if not leaf.is_terminal:
        raise ValueError(f"node {leaf.id} is not terminal")
    _apply_rollout(tree, tree.path_to_root(leaf), terminal_reward, ROLLOUT_TERMINAL)
    return tree


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

# (reward, is_correct) for a freshly expanded terminal candidate.
TerminalScorer = Callable[[Problem, list[CandidateStep], CandidateStep], "tuple[float, bool | None]"]


def training_terminal_scorer(problem: Problem, path: list[CandidateStep],
                             candidate: CandidateStep) -> tuple[float, bool | None]:
    """Ground-truth scoring used during data generation: +1 correct, -1 otherwise."""
    verdict = grade_candidate(candidate, problem.ground_truth)
    return (1.0 if verdict.is_correct else -1.0), verdict.is_correct


def _expand(tree: SearchTree, node: Node, path: list[Node], problem: Problem,
            policy: PolicyModel, verifier, reward: RewardModel | None,
            config: GenerationConfig, rng: random.Random,
            terminal_scorer: TerminalScorer) -> None:
    prefix = tuple(n.candidate for n in path[1:])
    req = GenerationRequest(
        problem=problem,
        prefix=prefix,
        n=config.candidates_per_step,
        temperature=config.temperature,
        seed=rng.getrandbits(31),
    )
    path_code = [n.code for n in path[1:]]
    for cand in generate_candidates(policy, req):
        result = verifier.verify(path_code, cand)
        if result.status != STATUS_OK:
            metrics.increment("engine.candidates_rejected")
            continue
        child = tree.add_node(node, cand)
        child.stdout = result.stdout
        if cand.declared_terminal:
            verdict = grade_candidate(cand, problem.ground_truth)
            child.answer_extracted = verdict.answer_extracted
            reward_value, is_correct = terminal_scorer(problem, list(prefix), cand)
            child.terminal_reward = reward_value
            child.is_correct = is_correct
        elif config.annotation_mode == PPM_AUGMENTED:
            # Initial q from the reward model; visits stay 0 until a rollout
            # passes through, so the prior never inflates the visit count.
            ppm = score_step(reward, problem, list(prefix) + [cand])
            child.ppm_score = ppm
            child.q_cum = ppm
    if not node.children:
        metrics.increment("engine.failed_expansions")


def _rollout(tree: SearchTree, problem: Problem, policy: PolicyModel, verifier,
             reward: RewardModel | None, config: GenerationConfig,
             rng: random.Random, terminal_scorer: TerminalScorer):
    node = tree.root
    path = [node]
    while True:
        if node.is_terminal:
            return ROLLOUT_TERMINAL, path, node.terminal_reward
        if node.step_index >= config.max_depth:
            return ROLLOUT_TRUNCATED, path, -1.0
        if node.id not in tree.expanded:
            tree.expanded.add(node.id)
            _expand(tree, node, path, problem, policy, verifier, reward, config,
                    rng, terminal_scorer)
        if not node.children:
            return ROLLOUT_ABORTED, path, None
        node = select_child(tree, node, config.exploration_c)
        path.append(node)


def run_mcts(problem: Problem, policy: PolicyModel, verifier,
             reward: RewardModel | None, config: GenerationConfig,
             terminal_scorer: TerminalScorer | None = None) -> SearchTree:
    """Run ``config.num_rollouts`` rollouts and return the finished tree.

    Rollouts whose expansion yields zero valid candidates are logged as
    aborted and by default do not consume a rollout slot; a hard attempt cap
    prevents livelock when the policy never produces runnable code.
    Deterministic given the seed and a deterministic policy.
    """
    if config.annotation_mode == PPM_AUGMENTED and reward is None:
        raise ValueError("ppm_augmented annotation requires a reward model")
    if config.annotation_mode == TERMINAL_GUIDED and reward is not None:
        raise ValueError("terminal_guided annotation does not take a reward model")
    scorer = terminal_scorer or training_terminal_scorer
    rng = random.Random(config.seed)
    tree = new_tree(problem, config)
    attempts = 0
    cap = config.attempt_cap()
    while tree.rollouts_completed < config.num_rollouts and attempts < cap:
        attempts += 1
        status, path, reward_value = _rollout(
            tree, problem, policy, verifier, reward, config, rng, scorer
        )
        if status == ROLLOUT_ABORTED:
            tree.rollouts_aborted += 1
            tree.rollout_log.append(
                RolloutRecord(
                    index=len(tree.rollout_log),
                    path=[n.id for n in path],
                    reward=None,
                    status=ROLLOUT_ABORTED,
                )
            )
            if config.count_aborted_rollouts:
                tree.rollouts_completed += 1
            if path[-1].id == tree.root_id and not tree.root.children:
                break  # the root itself is a dead end; nothing can progress
        else:
            _apply_rollout(tree, path, reward_value, status)
    return tree


# ---------------------------------------------------------------------------
# Serialization and integrity checks
# ---------------------------------------------------------------------------

def tree_to_dict(tree: SearchTree) -> dict:
    return {
        "schema_version": TREE_SCHEMA_VERSION,
        "problem_id": tree.problem_id,
        "rng_seed": tree.rng_seed,
        "rollouts_completed": tree.rollouts_completed,
        "rollouts_aborted": tree.rollouts_aborted,
        "config": tree.config.to_dict(),
        "expanded": sorted(tree.expanded),
        "nodes": [
            {
                "id": n.id,
                "parent": n.parent,
                "step_index": n.step_index,
                "nl_comment": n.nl_comment,
                "code": n.code,
                "raw_text": n.raw_text,
                "q_cum": n.q_cum,
                "visits": n.visits,
                "ppm_score": n.ppm_score,
                "is_terminal": n.is_terminal,
                "terminal_reward": n.terminal_reward,
                "answer_extracted": n.answer_extracted,
                "is_correct": n.is_correct,
                "stdout": n.stdout,
                "children": list(n.children),
            }
            for _, n in sorted(tree.nodes.items())
        ],
        "rollout_log": [
            {"index": r.index, "path": list(r.path), "reward": r.reward, "status": r.status}
            for r in tree.rollout_log
        ],
    }


def tree_to_json_bytes(tree: SearchTree) -> bytes:
    payload = json.dumps(tree_to_dict(tree), indent=2, sort_keys=True, ensure_ascii=False)
    return (payload + "\n").encode("utf-8")


def tree_from_dict(record: dict) -> SearchTree:
    config = GenerationConfig.from_dict(record["config"])
    tree = SearchTree(
        problem_id=record["problem_id"],
        rng_seed=record["rng_seed"],
        config=config,
        rollouts_completed=record["rollouts_completed"],
        rollouts_aborted=record.get("rollouts_aborted", 0),
        expanded=set(record.get("expanded", [])),
    )
    for entry in record["nodes"]:
        node = Node(
            id=entry["id"],
            parent=entry["parent"],
            step_index=entry["step_index"],
            nl_comment=entry["nl_comment"],
            code=entry["code"],
            raw_text=entry["raw_text"],
            q_cum=entry["q_cum"],
            visits=entry["visits"],
            ppm_score=entry["ppm_score"],
            is_terminal=entry["is_terminal"],
            terminal_reward=entry["terminal_reward"],
            answer_extracted=entry.get("answer_extracted"),
            is_correct=entry.get("is_correct"),
            stdout=entry.get("stdout", ""),
            children=list(entry["children"]),
        )
        if node.raw_text:
            node.candidate = parse_candidate(node.raw_text)
        tree.nodes[node.id] = node
    tree.rollout_log = [
        RolloutRecord(index=r["index"], path=list(r["path"]), reward=r["reward"],
                      status=r["status"])
        for r in record["rollout_log"]
    ]
    return tree


def tree_from_json_bytes(data: bytes) -> SearchTree:
    return tree_from_dict(json.loads(data.decode("utf-8")))


def replay_q_values(tree: SearchTree) -> dict[int, tuple[float, int]]:
    """Recompute (q_cum, visits) for every node from the rollout log, adding
    rewards in rollout order so float summation order matches the engine's."""
    state: dict[int, tuple[float, int]] = {}
    for node in tree.nodes.values():
        initial = node.ppm_score if node.ppm_score is not None else 0.0
        state[node.id] = (initial, 0)
    for record in tree.rollout_log:
        if record.status == ROLLOUT_ABORTED:
            continue
        for node_id in record.path[1:]:
            q, v = state[node_id]
            state[node_id] = (q + record.reward, v + 1)
        q, v = state[tree.root_id]
        state[tree.root_id] = (q, v + 1)
    return state


def check_replay(tree: SearchTree, tol: float = 1e-12) -> list[str]:
    """Replay the rollout log; report every node whose stored q/visits deviate."""
    problems = []
    replayed = replay_q_values(tree)
    for node in tree.nodes.values():
        q, v = replayed[node.id]
        if node.id == tree.root_id:
            if node.visits != v:
                problems.append(f"root visits {node.visits} != replayed {v}")
            continue
        if abs(node.q_cum - q) > tol:
            problems.append(f"node {node.id}: q_cum {node.q_cum!r} != replayed {q!r}")
        if node.visits != v:
            problems.append(f"node {node.id}: visits {node.visits} != replayed {v}")
    return problems


def validate_tree(tree: SearchTree) -> list[str]:
    """Structural invariants: single root, acyclic links, depth cap, terminal
    bookkeeping, ppm range."""
    problems = []
    roots = [n for n in tree.nodes.values() if n.parent is None]
    if len(roots) != 1 or roots[0].id != tree.root_id:
        problems.append(f"expected exactly one root with id {tree.root_id}")
    for node in tree.nodes.values():
        for cid in node.children:
            child = tree.nodes.get(cid)
            if child is None or child.parent != node.id:
                problems.append(f"broken parent/child link {node.id} -> {cid}")
        if node.parent is not None:
            parent = tree.nodes.get(node.parent)
            if parent is None or node.id not in parent.children:
                problems.append(f"node {node.id} missing from parent's children")
            if parent is not None and node.step_index != parent.step_index + 1:
                problems.append(f"node {node.id} has inconsistent step_index")
        if node.step_index > tree.config.max_depth:
            problems.append(f"node {node.id} exceeds max_depth")
        if node.is_terminal != (node.terminal_reward is not None):
            problems.append(f"node {node.id}: terminal_reward present iff terminal violated")
        if node.ppm_score is not None and not -1.0 <= node.ppm_score <= 1.0:
            problems.append(f"node {node.id}: ppm_score outside [-1, 1]")
    # Cycle check: walking up from any node must reach the root.
    for node in tree.nodes.values():
        seen = set()
        cursor = node
        while cursor.parent is not None:
            if cursor.id in seen:
                problems.append(f"cycle detected at node {node.id}")
                break
            seen.add(cursor.id)
            cursor = tree.nodes[cursor.parent]
    return problems
