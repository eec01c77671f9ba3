"""Primary worker-pool client against the real out-of-process worker package.

Skipped until `npm run build` has produced sandbox-worker/dist/worker.js.
"""

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from helpers import leaf, problem, scripted, step
from veritree.sandbox import ResourceLimits, WorkerPoolSandbox
from veritree.tree import GenerationConfig, run_mcts
from veritree.verify import SandboxVerifier

WORKER_JS = Path(__file__).resolve().parent.parent / "sandbox-worker" / "dist" / "worker.js"

pytestmark = pytest.mark.skipif(
    not WORKER_JS.exists() or shutil.which("node") is None,
    reason="sandbox-worker not built (run `npm run build` in sandbox-worker/)",
)


@pytest.fixture(scope="module")
def pool():
    with WorkerPoolSandbox(["node", str(WORKER_JS)], pool_size=2) as sandbox:
        yield sandbox


def test_round_trip(pool):
    result = pool.execute("print(1+1)")
    assert result.status == "ok"
    assert result.stdout == "2\n"


def test_error_and_timeout(pool):
    assert pool.execute("print(whoops)").status == "error"
    result = pool.execute("while True: pass", ResourceLimits(timeout_ms=1000))
    assert result.status == "timeout"
    assert result.duration_ms >= 1000


def test_statelessness(pool):
    pool.execute("leaky = 1")
    probe = pool.execute("print('leaky' in globals())")
    assert probe.stdout == "False\n"


def test_full_search_through_worker_pool(pool):
    prob = problem()
    policy = scripted({prob.id: step("root", [
        leaf("good", correct=True),
        leaf("broken", correct=True, valid=False),
    ])})
    config = GenerationConfig(num_rollouts=4, candidates_per_step=2, seed=1)
    tree = run_mcts(prob, policy, SandboxVerifier(pool), None, config)
    assert len(tree.root.children) == 1  # the broken candidate was rejected
    terminal = tree.node(tree.root.children[0])
    assert terminal.is_correct is True
    assert terminal.stdout == "17\n"
