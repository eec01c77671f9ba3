"""Shared scripted-model builders for the test suite."""

from __future__ import annotations

from veritree.bank import Problem
from veritree.models import ScriptNode, ScriptedPolicy


def leaf(name: str, correct: bool = True, valid: bool = True,
         p: float | None = None) -> ScriptNode:
    """Terminal script node; pass p for a stochastic outcome."""
    return ScriptNode(
        name=name,
        terminal=True,
        correct=None if p is not None else correct,
        success_probability=p,
        valid=valid,
    )


def step(name: str, children: list[ScriptNode], valid: bool = True) -> ScriptNode:
    return ScriptNode(name=name, children=children, valid=valid)


def problem(pid: str = "p1", gt: str = "17", origin: str = "curated") -> Problem:
    return Problem(id=pid, statement=f"question {pid}", ground_truth=gt, origin=origin)


def fraction_branch(name: str, n_children: int, n_correct: int,
                    order: list[int] | None = None) -> ScriptNode:
    """Branch whose terminal children are correct in a known fraction.

    ``order`` permutes which child indices are the correct ones so tests can
    avoid index-position artifacts.
    """
    flags = [i < n_correct for i in range(n_children)]
    if order is not None:
        flags = [flags[i] for i in order]
    children = [leaf(f"{name}{i}", correct=flag) for i, flag in enumerate(flags)]
    return step(name, children)


def single_chain_script(depth: int, correct: bool = True) -> ScriptNode:
    """Linear script: depth-1 plain steps then one terminal leaf."""
    node = leaf("end", correct=correct)
    for i in reversed(range(depth - 1)):
        node = step(f"s{i}", [node])
    return step("root", [node])


def two_branch_script(n_a: int = 4, correct_a: int = 3,
                      n_b: int = 4, correct_b: int = 1) -> ScriptNode:
    return step("root", [
        fraction_branch("a", n_a, correct_a),
        fraction_branch("b", n_b, correct_b),
    ])


def scripted(problems_to_scripts: dict[str, ScriptNode], seed: int = 0) -> ScriptedPolicy:
    return ScriptedPolicy(problems_to_scripts, seed=seed)
