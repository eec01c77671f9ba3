"""Execution-based step verification and final-answer grading.

Every candidate step is validated by executing the concatenation of all code
along its path in a fresh sandbox process; a step becomes a tree node only if
that program exits cleanly. Final answers are graded by extracting the last
\\boxed{} value and comparing canonical forms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .metrics import metrics
from .steps import CandidateStep

STATUS_OK = "ok"
STATUS_ERROR = "error"
STATUS_TIMEOUT = "timeout"

INVALID_CODE_TOKEN = "_scripted_invalid_step"


@dataclass(frozen=True)
class ExecutionResult:
    status: str  # ok | error | timeout
    stdout: str
    stderr: str
    duration_ms: int


@dataclass(frozen=True)
class Verdict:
    """Grading outcome of a terminal step; absent fields mean 'not terminal'."""

    answer_extracted: str | None
    is_correct: bool | None


def extract_boxed(text: str) -> str | None:
    """Content of the last \\boxed{...} in ``text`` (brace-matched), or None."""
    marker = "\\boxed{"
    last = text.rfind(marker)
    if last < 0:
        return None
    depth = 1
    i = last + len(marker)
    start = i
    while i < len(text) and depth > 0:
        if text[i] == "{":
            depth += 1
        elif text[i] == "}":
            depth -= 1
        i += 1
    if depth != 0:
        return None
    return text[start:i - 1]


_FRAC_RE = re.compile(r"\\[dt]?frac\{([^{}]+)\}\{([^{}]+)\}")
_GROUPED_INT_RE = re.compile(r"^-?\d{1,3}(,\d{3})+$")
_RATIONAL_RE = re.compile(r"^-?\d+\s*/\s*-?\d+$")
_DECIMAL_RE = re.compile(r"^-?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$")


def canonicalize_answer(text: str) -> str:
    """Trim wrappers and collapse whitespace; rewrite \\frac{a}{b} as a/b."""
    s = text.strip()
    s = s.strip("$").strip()
    s = _FRAC_RE.sub(lambda m: f"{m.group(1).strip()}/{m.group(2).strip()}", s)
    if s.endswith("."):
        s = s[:-1]
    if len(s) >= 2 and s[0] == "{" and s[-1] == "}":
        s = s[1:-1].strip()
    if _GROUPED_INT_RE.match(s):
        s = s.replace(",", "")
    return " ".join(s.split())


def _parse_numeric(s: str) -> Fraction | float | None:
    if _RATIONAL_RE.match(s):
        num, den = s.split("/")
        den_val = int(den)
        if den_val == 0:
            return None
        return Fraction(int(num), den_val)
    if _DECIMAL_RE.match(s):
        if re.match(r"^-?\d+$", s):
            return Fraction(int(s))
        return float(s)
    return None


def answers_equal(a: str, b: str) -> bool:
    """Canonical comparison: exact for integers/rationals, 1e-9 relative for decimals."""
    ca, cb = canonicalize_answer(a), canonicalize_answer(b)
    if ca == cb:
        return True
    na, nb = _parse_numeric(ca), _parse_numeric(cb)
    if na is None or nb is None:
        return False
    if isinstance(na, Fraction) and isinstance(nb, Fraction):
        return na == nb
    fa, fb = float(na), float(nb)
    return abs(fa - fb) <= 1e-9 * max(1.0, abs(fb))


def grade_answer(answer_text: str, ground_truth: str) -> bool:
    """True iff the last boxed value in ``answer_text`` matches ``ground_truth``.

    Extraction failure grades as incorrect, never raises.
    """
    boxed = extract_boxed(answer_text)
    if boxed is None:
        return False
    return answers_equal(boxed, ground_truth)


def extract_answer(candidate: CandidateStep) -> str | None:
    """Canonical boxed answer of a terminal candidate (its answer block when
    present, else the whole text); None when extraction fails."""
    source = candidate.answer_text if candidate.answer_text is not None else candidate.raw_text
    boxed = extract_boxed(source)
    return canonicalize_answer(boxed) if boxed is not None else None


def grade_candidate(candidate: CandidateStep, ground_truth: str) -> Verdict:
    """Verdict for a terminal candidate; (None, None) for a non-terminal one."""
    if not candidate.declared_terminal:
        return Verdict(answer_extracted=None, is_correct=None)
    extracted = extract_answer(candidate)
    if extracted is None:
        return Verdict(answer_extracted=None, is_correct=False)
    return Verdict(answer_extracted=extracted,
                   is_correct=answers_equal(extracted, ground_truth))


def concatenate_path(path_code: Sequence[str], candidate_code: str) -> str:
    """Single program: code of every prior step, in path order, then the candidate."""
    snippets = [c for c in path_code if c.strip()]
    if candidate_code.strip():
        snippets.append(candidate_code)
    return "\n".join(snippets) + "\n"


def verify_step(path_code: Sequence[str], candidate: CandidateStep,
                sandbox, limits=None) -> ExecutionResult:
    """Execute prefix code plus the candidate as one program in the sandbox.

    Status ok means the candidate is retained as a valid node. Sandbox
    transport failures propagate as errors; program failures do not.
    """
    program = concatenate_path(path_code, candidate.code)
    result = sandbox.execute(program, limits)
    if result.status != STATUS_OK:
        metrics.increment("verify.rejected")
    return result


class SandboxVerifier:
    """Verifier backed by a real sandbox client."""

    def __init__(self, sandbox, limits=None):
        self.sandbox = sandbox
        self.limits = limits

    def verify(self, path_code: Sequence[str], candidate: CandidateStep) -> ExecutionResult:
        return verify_step(path_code, candidate, self.sandbox, self.limits)


class ScriptedVerifier:
    """Fast verifier for scripted candidates: rejects the invalid-code sentinel.

    Scripted invalid candidates reference an undefined name containing
    INVALID_CODE_TOKEN, so a real sandbox reaches the same verdict.
    """

    def verify(self, path_code: Sequence[str], candidate: CandidateStep) -> ExecutionResult:
        if INVALID_CODE_TOKEN in candidate.code:
            return ExecutionResult(
                status=STATUS_ERROR,
                stdout="",
                stderr=f"NameError: name '{INVALID_CODE_TOKEN}' is not defined",
                duration_ms=0,
            )
        stdout = ""
        if candidate.declared_terminal and candidate.output_text is not None:
            stdout = candidate.output_text + "\n"
        return ExecutionResult(status=STATUS_OK, stdout=stdout, stderr="", duration_ms=0)
