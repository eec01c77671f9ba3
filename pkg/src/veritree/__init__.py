"""Code-verified step-by-step reasoning engine.

Search trees over natural-language-plus-code reasoning steps with execution
verification, rollout-based Q annotation, preference-pair dataset export,
multi-round self-evolution, and reward-guided test-time search.
"""

__version__ = "0.1.0"

from .bank import Problem, load_bank, write_bank
from .inference import InferenceConfig, best_of_n_baseline, deep_think, pass_at_n
from .pairs import (
    PreferencePair,
    QVector,
    build_orm_pairs,
    build_pairs,
    ppm_pairwise_loss,
    pqm_mse_loss,
)
from .trajectories import Trajectory, categorize, extract_trajectories, select_sft
from .tree import (
    GenerationConfig,
    Node,
    SearchTree,
    backpropagate,
    run_mcts,
    select_child,
    uct_score,
)
from .verify import grade_answer

__all__ = [
    "GenerationConfig",
    "InferenceConfig",
    "Node",
    "PreferencePair",
    "Problem",
    "QVector",
    "SearchTree",
    "Trajectory",
    "backpropagate",
    "best_of_n_baseline",
    "build_orm_pairs",
    "build_pairs",
    "categorize",
    "deep_think",
    "extract_trajectories",
    "grade_answer",
    "load_bank",
    "pass_at_n",
    "ppm_pairwise_loss",
    "pqm_mse_loss",
    "run_mcts",
    "select_child",
    "select_sft",
    "uct_score",
    "write_bank",
]
