from __future__ import annotations

from helpers import fraction_branch, leaf, problem, scripted, step, two_branch_script
from veritree.trajectories import (
    EASY,
    HARD,
    MEDIUM,
    Trajectory,
    TrajectoryStep,
    categorize,
    extract_trajectories,
    render_trajectory_text,
    select_sft,
    sft_record,
    union_trajectories,
)
from veritree.tree import GenerationConfig, run_mcts
from veritree.verify import ScriptedVerifier


def _run(script, n_rollouts=16, candidates=8, seed=7):
    prob = problem()
    policy = scripted({prob.id: script})
    config = GenerationConfig(num_rollouts=n_rollouts, candidates_per_step=candidates,
                              seed=seed)
    return prob, run_mcts(prob, policy, ScriptedVerifier(), None, config)


def _fake_trajectory(avg_q, correct=True, pid="p1", tag="t"):
    steps = [TrajectoryStep(nl_comment="", code="", raw_text=f"{tag}-{avg_q}-{correct}",
                            q=avg_q, visits=1, ppm_score=None, is_terminal=True,
                            answer_text="\\boxed{1}", stdout="1\n")]
    return Trajectory(problem_id=pid, steps=steps, is_correct=correct, avg_q=avg_q,
                      rollout_indices=[0], tree_seed=0, node_ids=[1],
                      answer_extracted="1", token_count=1)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def test_sixteen_rollouts_five_paths_dedup():
    # 5 distinct leaves; 16 rollouts revisit them, dedup keeps 5 trajectories.
    script = step("root", [fraction_branch("a", 5, 2)])
    prob, tree = _run(script, n_rollouts=16, candidates=8)
    trajectories = extract_trajectories(tree)
    assert len(trajectories) == 5
    assert sum(len(t.rollout_indices) for t in trajectories) == 16


def test_single_rollout_every_step_q_equals_terminal_reward():
    script = step("root", [step("s", [leaf("t", correct=True)])])
    prob, tree = _run(script, n_rollouts=1)
    (trajectory,) = extract_trajectories(tree)
    assert trajectory.is_correct is True
    assert [s.q for s in trajectory.steps] == [1.0, 1.0]
    assert trajectory.avg_q == 1.0
    assert trajectory.steps[-1].is_terminal


def test_avg_q_matches_replayed_sums():
    prob, tree = _run(two_branch_script(), n_rollouts=64, candidates=4)
    for trajectory in extract_trajectories(tree):
        recomputed = []
        for node_id in trajectory.node_ids:
            node = tree.node(node_id)
            recomputed.append(node.q_cum / node.visits)
        expected = sum(recomputed) / len(recomputed)
        assert abs(trajectory.avg_q - expected) <= 1e-12


def test_trajectory_last_step_is_terminal_and_root_excluded():
    prob, tree = _run(two_branch_script(), n_rollouts=16, candidates=4)
    for trajectory in extract_trajectories(tree):
        assert trajectory.steps[-1].is_terminal
        assert all(s.raw_text for s in trajectory.steps)  # root has no text


def test_truncated_rollouts_yield_no_trajectory():
    chain = leaf("end", correct=True)
    for i in reversed(range(5)):
        chain = step(f"s{i}", [chain])
    prob = problem()
    policy = scripted({prob.id: step("root", [chain])})
    config = GenerationConfig(num_rollouts=3, candidates_per_step=2, max_depth=3, seed=1)
    tree = run_mcts(prob, policy, ScriptedVerifier(), None, config)
    assert tree.rollouts_completed == 3
    assert extract_trajectories(tree) == []


def test_union_dedups_across_trees():
    prob, tree_a = _run(two_branch_script(), n_rollouts=16, candidates=4, seed=1)
    prob, tree_b = _run(two_branch_script(), n_rollouts=16, candidates=4, seed=2)
    a = extract_trajectories(tree_a)
    b = extract_trajectories(tree_b)
    union = union_trajectories([a, b])
    keys = [t.step_texts for t in union]
    assert len(keys) == len(set(keys))
    assert len(union) <= len(a) + len(b)
    assert len(union) >= max(len(a), len(b))


# ---------------------------------------------------------------------------
# Difficulty
# ---------------------------------------------------------------------------

def test_categorize_all_correct_is_easy():
    trajectories = [_fake_trajectory(0.5, True, tag=str(i)) for i in range(16)]
    assert categorize(problem(), trajectories) == EASY


def test_categorize_none_correct_is_hard():
    trajectories = [_fake_trajectory(-0.5, False, tag=str(i)) for i in range(16)]
    assert categorize(problem(), trajectories) == HARD


def test_categorize_mixed_is_medium():
    trajectories = [_fake_trajectory(0.5, i < 9, tag=str(i)) for i in range(16)]
    assert categorize(problem(), trajectories) == MEDIUM


def test_categorize_empty_is_hard():
    assert categorize(problem(), []) == HARD


def test_categorize_depends_only_on_correctness_multiset():
    a = [_fake_trajectory(q, c, tag=f"a{i}")
         for i, (q, c) in enumerate([(0.9, True), (-0.2, False), (0.1, True)])]
    b = [_fake_trajectory(q, c, tag=f"b{i}")
         for i, (q, c) in enumerate([(-0.9, True), (0.8, False), (0.4, True)])]
    assert categorize(problem(), a) == categorize(problem(), b) == MEDIUM


# ---------------------------------------------------------------------------
# SFT selection
# ---------------------------------------------------------------------------

def test_select_top_two_by_avg_q():
    trajectories = [_fake_trajectory(q, True, tag=str(q)) for q in (0.9, 0.7, 0.4)]
    chosen = select_sft(trajectories)
    assert [t.avg_q for t in chosen] == [0.9, 0.7]


def test_select_single_correct():
    trajectories = [_fake_trajectory(0.3, True), _fake_trajectory(0.9, False, tag="x")]
    chosen = select_sft(trajectories)
    assert len(chosen) == 1 and chosen[0].avg_q == 0.3


def test_select_tie_keeps_extraction_order():
    trajectories = [_fake_trajectory(0.8, True, tag=str(i)) for i in range(3)]
    chosen = select_sft(trajectories)
    assert chosen == trajectories[:2]


def test_selected_sft_always_correct():
    trajectories = [_fake_trajectory(0.9, False, tag="a"),
                    _fake_trajectory(0.8, False, tag="b")]
    assert select_sft(trajectories) == []


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def test_sft_record_renders_markers_bit_exact():
    script = step("root", [step("s", [leaf("t", correct=True)])])
    prob, tree = _run(script, n_rollouts=2)
    (trajectory,) = extract_trajectories(tree)
    record = sft_record(prob, trajectory)
    text = record["text"]
    assert text.startswith(f"<|user|>:\n{prob.statement}\n<|assistant|>: ")
    assert "<code>" in text and "<end_of_step>" in text
    assert "<end_of_code>" in text
    assert "<output>17<end_of_output>" in text  # verified stdout, not a claim
    assert text.rstrip().endswith("<end_of_answer>")
    assert record["final_answer"] == "17"


def test_render_uses_executed_stdout():
    script = step("root", [leaf("t", correct=True)])
    prob, tree = _run(script, n_rollouts=1)
    (trajectory,) = extract_trajectories(tree)
    text = render_trajectory_text(prob, trajectory)
    assert f"<output>{trajectory.steps[-1].stdout.rstrip()}<end_of_output>" in text
