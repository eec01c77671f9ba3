"""Policy and reward model interfaces: scripted oracles for tests, HTTP for real runs.

A policy turns (problem, prefix steps) into candidate next-step texts; a reward
model scores a partial solution in [-1, 1]. Scripted implementations are pure
functions of their inputs so searches are exactly reproducible and test
expectations can be brute-forced.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import requests

from .bank import Problem
from .hashing import stable_unit
from .metrics import metrics
from .prompts import build_reward_messages, build_step_messages
from .steps import CandidateStep, StepParseError, parse_candidate, render_step
from .verify import INVALID_CODE_TOKEN

logger = logging.getLogger(__name__)


class PolicyTransportError(RuntimeError):
    """Endpoint unreachable after exhausting retries."""


@dataclass(frozen=True)
class GenerationRequest:
    problem: Problem
    prefix: tuple[CandidateStep, ...]
    n: int
    temperature: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class PolicyModel(Protocol):
    def generate(self, req: GenerationRequest) -> list[str]:
        """Raw candidate texts for the next step; may return fewer than req.n."""
        ...


class RewardModel(Protocol):
    def score(self, problem: Problem, steps: list[CandidateStep]) -> float:
        """Quality score of the latest step given the partial solution."""
        ...


def generate_candidates(policy: PolicyModel, req: GenerationRequest) -> list[CandidateStep]:
    """Ask the policy for candidates; dedup byte-identical texts, drop unparseable ones."""
    raw_texts = policy.generate(req)
    seen: set[str] = set()
    candidates: list[CandidateStep] = []
    for text in raw_texts:
        if text in seen:
            metrics.increment("policy.duplicate_candidates")
            continue
        seen.add(text)
        try:
            candidates.append(parse_candidate(text))
        except StepParseError:
            metrics.increment("policy.malformed_candidates")
    return candidates


def score_step(reward: RewardModel, problem: Problem,
               prefix_plus_step: list[CandidateStep]) -> float:
    """Reward-model score for the latest step, clamped to [-1, 1]."""
    if not prefix_plus_step:
        raise ValueError("prefix_plus_step must be non-empty")
    value = float(reward.score(problem, prefix_plus_step))
    if value < -1.0 or value > 1.0:
        metrics.increment("reward.clamped")
        value = max(-1.0, min(1.0, value))
    return value


# ---------------------------------------------------------------------------
# Scripted policy
# ---------------------------------------------------------------------------

_STEP_MARKER_RE = re.compile(r"# step:(\S+)")


@dataclass
class ScriptNode:
    """One scripted candidate; a branching script is a tree of these under a root.

    ``correct`` fixes a terminal's outcome; ``success_probability`` draws it
    deterministically from (problem id, path, seeds) instead. ``valid=False``
    renders code that fails with a NameError in any real interpreter.
    """

    name: str
    terminal: bool = False
    correct: bool | None = None
    success_probability: float | None = None
    valid: bool = True
    comment: str | None = None
    children: list["ScriptNode"] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.success_probability is not None and not 0.0 <= self.success_probability <= 1.0:
            raise ValueError("success_probability must be in [0, 1]")
        if self.terminal and self.children:
            raise ValueError(f"terminal script node {self.name!r} cannot have children")

    def child_by_name(self, name: str) -> "ScriptNode | None":
        for child in self.children:
            if child.name == name:
                return child
        return None

    def to_dict(self) -> dict:
        record: dict = {"name": self.name}
        if self.terminal:
            record["terminal"] = True
        if self.correct is not None:
            record["correct"] = self.correct
        if self.success_probability is not None:
            record["success_probability"] = self.success_probability
        if not self.valid:
            record["valid"] = False
        if self.comment is not None:
            record["comment"] = self.comment
        if self.children:
            record["children"] = [c.to_dict() for c in self.children]
        return record

    @classmethod
    def from_dict(cls, record: dict) -> "ScriptNode":
        return cls(
            name=record["name"],
            terminal=record.get("terminal", False),
            correct=record.get("correct"),
            success_probability=record.get("success_probability"),
            valid=record.get("valid", True),
            comment=record.get("comment"),
            children=[cls.from_dict(c) for c in record.get("children", [])],
        )


def wrong_answer(ground_truth: str) -> str:
    """An answer guaranteed to grade incorrect against ``ground_truth``."""
    try:
        return str(int(ground_truth) + 1)
    except ValueError:
        return ground_truth + "_wrong"


class ScriptedPolicy:
    """Deterministic policy following a per-problem branching script.

    Each emitted candidate embeds its script path as a ``# step:<path>``
    comment, so the next request's prefix pins down the current script node
    exactly. Same (problem, prefix, seed) always yields the same candidates.
    """

    def __init__(self, scripts: dict[str, ScriptNode], seed: int = 0):
        self.scripts = scripts
        self.seed = seed

    def generate(self, req: GenerationRequest) -> list[str]:
        root = self.scripts.get(req.problem.id)
        if root is None:
            return []
        node, path = self._locate(root, req.prefix)
        if node is None or node.terminal:
            return []
        return [
            self._render(child, path + (child.name,), req)
            for child in node.children
        ]

    def _locate(self, root: ScriptNode,
                prefix: tuple[CandidateStep, ...]) -> tuple[ScriptNode | None, tuple[str, ...]]:
        if not prefix:
            return root, ()
        match = _STEP_MARKER_RE.search(prefix[-1].code)
        if match is None:
            return None, ()
        path = tuple(match.group(1).split("."))
        node: ScriptNode | None = root
        for name in path:
            node = node.child_by_name(name) if node is not None else None
        return node, path

    def _is_correct(self, node: ScriptNode, path: tuple[str, ...],
                    req: GenerationRequest) -> bool:
        if node.correct is not None:
            return node.correct
        if node.success_probability is not None:
            draw = stable_unit(req.problem.id, ".".join(path), self.seed, req.seed)
            return draw < node.success_probability
        return False

    def _render(self, node: ScriptNode, path: tuple[str, ...],
                req: GenerationRequest) -> str:
        dotted = ".".join(path)
        var = "v_" + dotted.replace(".", "_").replace("-", "_")
        comment = node.comment or f"Work on step {dotted}"
        lines = [f"# {comment}"]
        if not node.valid:
            lines.append(f"print({INVALID_CODE_TOKEN})")
        if node.terminal:
            answer = (req.problem.ground_truth if self._is_correct(node, path, req)
                      else wrong_answer(req.problem.ground_truth))
            lines.append("# Now print the final answer")
            lines.append(f"print({json.dumps(answer)})  # step:{dotted}")
            return render_step(
                "\n".join(lines),
                terminal=True,
                output=answer,
                answer=f"The final answer is \\boxed{{{answer}}}",
            )
        lines.append(f"{var} = 1  # step:{dotted}")
        return render_step("\n".join(lines))

    # -- persistence (used by the CLI's scripted:<path> policy spec) --------

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "problems": {pid: node.to_dict() for pid, node in sorted(self.scripts.items())},
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ScriptedPolicy":
        scripts = {
            pid: ScriptNode.from_dict(node)
            for pid, node in record.get("problems", {}).items()
        }
        return cls(scripts, seed=record.get("seed", 0))

    @classmethod
    def load(cls, path: str) -> "ScriptedPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


class StaticPolicy:
    """Returns a fixed list of raw texts regardless of the request (test stub)."""

    def __init__(self, texts: list[str]):
        self.texts = texts

    def generate(self, req: GenerationRequest) -> list[str]:
        return list(self.texts)


# ---------------------------------------------------------------------------
# Scripted / mock reward models
# ---------------------------------------------------------------------------

class ConstantReward:
    def __init__(self, value: float):
        self.value = value

    def score(self, problem: Problem, steps: list[CandidateStep]) -> float:
        return self.value


class FunctionReward:
    """Wrap any pure function of (problem, steps) as a reward model."""

    def __init__(self, fn: Callable[[Problem, list[CandidateStep]], float]):
        self.fn = fn

    def score(self, problem: Problem, steps: list[CandidateStep]) -> float:
        return self.fn(problem, steps)


class ScriptOracleReward:
    """+1 when the latest step sits on a path whose script subtree can still
    reach a correct terminal, else -1. ``invert=True`` flips the signs
    (adversarial variant). Only meaningful for fixed-outcome scripts."""

    def __init__(self, policy: ScriptedPolicy, invert: bool = False):
        self.policy = policy
        self.invert = invert

    def score(self, problem: Problem, steps: list[CandidateStep]) -> float:
        root = self.policy.scripts.get(problem.id)
        good = False
        if root is not None and steps:
            node, _ = self.policy._locate(root, tuple(steps))
            good = node is not None and _subtree_has_correct(node)
        value = 1.0 if good else -1.0
        return -value if self.invert else value


def _subtree_has_correct(node: ScriptNode) -> bool:
    if node.terminal:
        return bool(node.correct)
    return any(_subtree_has_correct(c) for c in node.children)


# ---------------------------------------------------------------------------
# HTTP chat-completions client
# ---------------------------------------------------------------------------

class ChatCompletionsClient:
    """Minimal chat-completions HTTP client with retry, backoff and a
    bound on concurrent in-flight requests."""

    def __init__(self, base_url: str, model: str, api_key_env: str = "VERITREE_API_KEY",
                 timeout_s: float = 60.0, max_retries: int = 3, backoff_s: float = 0.5,
                 max_inflight: int = 8, session: requests.Session | None = None):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = os.environ.get(api_key_env, "")
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._inflight = threading.Semaphore(max_inflight)
        self._session = session or requests.Session()

    def complete(self, messages: list[dict], n: int = 1, temperature: float = 0.8,
                 seed: int | None = None, max_tokens: int | None = None) -> list[str]:
        body: dict = {
            "model": self.model,
            "messages": messages,
            "n": n,
            "temperature": temperature,
        }
        if seed is not None:
            body["seed"] = seed
        if max_tokens is not None:
            body["max_tokens"] = max_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        logger.debug("POST %s body=%s", self.url, json.dumps(body)[:2000])

        last_error: Exception | None = None
        with self._inflight:
            for attempt in range(self.max_retries + 1):
                if attempt > 0:
                    metrics.increment("http.retries")
                    time.sleep(self.backoff_s * (2 ** (attempt - 1)))
                try:
                    response = self._session.post(
                        self.url, json=body, headers=headers, timeout=self.timeout_s
                    )
                except requests.RequestException as exc:
                    last_error = exc
                    continue
                if response.status_code in (429,) or response.status_code >= 500:
                    last_error = RuntimeError(f"HTTP {response.status_code}")
                    continue
                if response.status_code != 200:
                    raise PolicyTransportError(
                        f"endpoint returned HTTP {response.status_code}: {response.text[:500]}"
                    )
                payload = response.json()
                logger.debug("response=%s", json.dumps(payload)[:2000])
                usage = payload.get("usage") or {}
                if "completion_tokens" in usage:
                    metrics.increment("http.completion_tokens", int(usage["completion_tokens"]))
                return [
                    choice.get("message", {}).get("content", "") or ""
                    for choice in payload.get("choices", [])
                ]
        raise PolicyTransportError(f"endpoint failed after {self.max_retries} retries: {last_error}")


class HttpPolicy:
    """Policy backed by a chat-completions endpoint."""

    def __init__(self, client: ChatCompletionsClient):
        self.client = client

    def generate(self, req: GenerationRequest) -> list[str]:
        messages = build_step_messages(
            req.problem.statement, [s.raw_text for s in req.prefix]
        )
        return self.client.complete(
            messages, n=req.n, temperature=req.temperature, seed=req.seed
        )


class HttpReward:
    """Reward model backed by a chat-completions endpoint returning a number."""

    _NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")

    def __init__(self, client: ChatCompletionsClient):
        self.client = client

    def score(self, problem: Problem, steps: list[CandidateStep]) -> float:
        messages = build_reward_messages(problem.statement, [s.raw_text for s in steps])
        contents = self.client.complete(messages, n=1, temperature=0.0)
        text = contents[0] if contents else ""
        match = self._NUMBER_RE.search(text)
        if match is None:
            metrics.increment("reward.unparseable")
            return 0.0
        return float(match.group(0))
