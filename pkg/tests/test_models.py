from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from helpers import fraction_branch, leaf, problem, scripted, step
from veritree.metrics import metrics
from veritree.models import (
    ChatCompletionsClient,
    ConstantReward,
    FunctionReward,
    GenerationRequest,
    HttpPolicy,
    HttpReward,
    PolicyTransportError,
    ScriptedPolicy,
    ScriptOracleReward,
    StaticPolicy,
    generate_candidates,
    score_step,
    wrong_answer,
)
from veritree.steps import parse_candidate


def _req(prob, prefix=(), n=4, seed=0):
    return GenerationRequest(problem=prob, prefix=tuple(prefix), n=n, seed=seed)


# ---------------------------------------------------------------------------
# Scripted policy
# ---------------------------------------------------------------------------

def test_scripted_returns_script_order():
    prob = problem()
    policy = scripted({prob.id: step("root", [leaf("x"), leaf("y"), leaf("z")])})
    candidates = generate_candidates(policy, _req(prob, n=8))
    assert len(candidates) == 3
    assert ["x" in c.code for c in candidates] == [True, False, False]


def test_scripted_is_referentially_transparent():
    prob = problem()
    policy = scripted({prob.id: fraction_branch("root", 4, 2)}, seed=3)
    req = _req(prob, n=4, seed=9)
    first = policy.generate(req)
    policy.generate(_req(prob, n=2, seed=1))  # interleaved unrelated call
    assert policy.generate(req) == first


def test_scripted_descends_by_prefix_marker():
    prob = problem()
    inner = step("a", [leaf("a1", correct=True)])
    policy = scripted({prob.id: step("root", [inner])})
    first = generate_candidates(policy, _req(prob))
    assert len(first) == 1 and not first[0].declared_terminal
    second = generate_candidates(policy, _req(prob, prefix=[first[0]]))
    assert len(second) == 1 and second[0].declared_terminal
    assert f"\\boxed{{{prob.ground_truth}}}" in second[0].answer_text


def test_scripted_stochastic_draw_depends_on_request_seed():
    prob = problem()
    policy = scripted({prob.id: step("root", [leaf("t", p=0.5)])}, seed=0)
    outcomes = set()
    for seed in range(32):
        cand = generate_candidates(policy, _req(prob, seed=seed))[0]
        outcomes.add(f"\\boxed{{{prob.ground_truth}}}" in cand.answer_text)
        # identical request seed must redraw identically
        again = generate_candidates(policy, _req(prob, seed=seed))[0]
        assert again.raw_text == cand.raw_text
    assert outcomes == {True, False}


def test_scripted_round_trips_through_json(tmp_path):
    prob = problem()
    policy = scripted({prob.id: fraction_branch("root", 3, 1)}, seed=5)
    path = tmp_path / "script.json"
    policy.save(str(path))
    loaded = ScriptedPolicy.load(str(path))
    assert loaded.generate(_req(prob)) == policy.generate(_req(prob))


def test_wrong_answer_never_matches():
    assert wrong_answer("17") == "18"
    assert wrong_answer("20/3") == "20/3_wrong"


# ---------------------------------------------------------------------------
# generate_candidates post-processing
# ---------------------------------------------------------------------------

def test_duplicates_by_raw_text_removed():
    texts = [f"x{i} = 1\n<end_of_step>" for i in range(6)]
    texts = texts + [texts[0], texts[3]]  # 8 returned, 2 byte-identical
    candidates = generate_candidates(StaticPolicy(texts), _req(problem(), n=8))
    assert len(candidates) == 6
    assert metrics.get("policy.duplicate_candidates") == 2


def test_malformed_candidates_dropped_and_counted():
    texts = ["ok = 1\n<end_of_step>", "", "no markers at all"]
    candidates = generate_candidates(StaticPolicy(texts), _req(problem(), n=4))
    assert len(candidates) == 1
    assert metrics.get("policy.malformed_candidates") == 2


def test_request_validation():
    with pytest.raises(ValueError):
        _req(problem(), n=0)
    with pytest.raises(ValueError):
        GenerationRequest(problem=problem(), prefix=(), n=1, temperature=-0.1)


# ---------------------------------------------------------------------------
# Reward models and clamping
# ---------------------------------------------------------------------------

def test_constant_reward_is_constant():
    prob = problem()
    cand = parse_candidate("x = 1\n<end_of_step>")
    assert score_step(ConstantReward(0.0), prob, [cand]) == 0.0
    assert score_step(ConstantReward(0.25), prob, [cand, cand]) == 0.25


def test_out_of_range_scores_clamped_with_warning():
    prob = problem()
    cand = parse_candidate("x = 1\n<end_of_step>")
    assert score_step(ConstantReward(1.7), prob, [cand]) == 1.0
    assert score_step(ConstantReward(-3.0), prob, [cand]) == -1.0
    assert metrics.get("reward.clamped") == 2


def test_score_step_requires_steps():
    with pytest.raises(ValueError):
        score_step(ConstantReward(0.0), problem(), [])


def test_oracle_reward_tracks_script():
    prob = problem()
    good_branch = step("g", [leaf("g1", correct=True)])
    bad_branch = step("b", [leaf("b1", correct=False)])
    policy = scripted({prob.id: step("root", [good_branch, bad_branch])})
    oracle = ScriptOracleReward(policy)
    adversary = ScriptOracleReward(policy, invert=True)
    candidates = generate_candidates(policy, _req(prob))
    good = next(c for c in candidates if "step:g" in c.code)
    bad = next(c for c in candidates if "step:b" in c.code)
    assert oracle.score(prob, [good]) == 1.0
    assert oracle.score(prob, [bad]) == -1.0
    assert adversary.score(prob, [good]) == -1.0
    assert adversary.score(prob, [bad]) == 1.0


def test_function_reward_wraps_callable():
    reward = FunctionReward(lambda p, steps: -0.5 if len(steps) > 1 else 0.5)
    cand = parse_candidate("x = 1\n<end_of_step>")
    assert reward.score(problem(), [cand]) == 0.5
    assert reward.score(problem(), [cand, cand]) == -0.5


# ---------------------------------------------------------------------------
# HTTP client against a local stub endpoint
# ---------------------------------------------------------------------------

class _StubHandler(BaseHTTPRequestHandler):
    failures_left = 0
    calls = 0
    contents = ["x = 1\n<end_of_step>"]

    def do_POST(self):  # noqa: N802  (stdlib handler naming)
        type(self).calls += 1
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if type(self).failures_left > 0:
            type(self).failures_left -= 1
            self.send_response(500)
            self.end_headers()
            return
        body = json.dumps({
            "choices": [{"message": {"content": c}} for c in type(self).contents],
            "usage": {"completion_tokens": 7},
        }).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.failures_left = 0
    _StubHandler.calls = 0
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_policy_retries_then_succeeds(stub_server):
    _StubHandler.failures_left = 2
    client = ChatCompletionsClient(stub_server, model="m", max_retries=3, backoff_s=0.01)
    policy = HttpPolicy(client)
    candidates = generate_candidates(policy, _req(problem(), n=1))
    assert len(candidates) == 1
    assert metrics.get("http.retries") == 2
    assert metrics.get("http.completion_tokens") == 7


def test_http_transport_error_after_max_retries(stub_server):
    _StubHandler.failures_left = 99
    client = ChatCompletionsClient(stub_server, model="m", max_retries=2, backoff_s=0.01)
    with pytest.raises(PolicyTransportError):
        client.complete([{"role": "user", "content": "hi"}])
    assert _StubHandler.calls == 3  # initial try plus two retries


def test_http_reward_scores_and_clamps(stub_server):
    client = ChatCompletionsClient(stub_server, model="m", backoff_s=0.01)
    reward = HttpReward(client)
    cand = parse_candidate("x = 1\n<end_of_step>")
    _StubHandler.contents = ["0.75"]
    assert score_step(reward, problem(), [cand]) == 0.75
    _StubHandler.contents = ["1.7"]  # out of range, clamped with a warning
    assert score_step(reward, problem(), [cand]) == 1.0
    assert metrics.get("reward.clamped") == 1
    _StubHandler.contents = ["no score at all"]
    assert score_step(reward, problem(), [cand]) == 0.0
    assert metrics.get("reward.unparseable") == 1
    _StubHandler.contents = ["x = 1\n<end_of_step>"]
