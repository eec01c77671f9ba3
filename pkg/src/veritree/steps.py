"""Step text format: one reasoning step is a natural-language comment plus code.

A candidate is a single step delimited by literal markers. Non-terminal steps end
with <end_of_step>; the final step ends with <end_of_code> and may carry an
<output>...<end_of_output> block and an <answer>...<end_of_answer> block whose
\\boxed{} content is the declared final answer.
"""

from __future__ import annotations

from dataclasses import dataclass

CODE_OPEN = "<code>"
END_OF_STEP = "<end_of_step>"
END_OF_CODE = "<end_of_code>"
OUTPUT_OPEN = "<output>"
OUTPUT_CLOSE = "<end_of_output>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "<end_of_answer>"


class StepParseError(ValueError):
    """Candidate text could not be split into a step."""


@dataclass(frozen=True)
class CandidateStep:
    """One parsed candidate step as emitted by a policy model."""

    raw_text: str
    nl_comment: str
    code: str
    declared_terminal: bool
    output_text: str | None = None
    answer_text: str | None = None


def _section(text: str, open_marker: str, close_marker: str) -> str | None:
    start = text.find(open_marker)
    if start < 0:
        return None
    start += len(open_marker)
    end = text.find(close_marker, start)
    if end < 0:
        return text[start:].strip()
    return text[start:end].strip()


def comment_lines(code: str) -> str:
    """Natural-language part of a step: the '#' comment lines inside its code."""
    lines = []
    for line in code.splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            lines.append(stripped.lstrip("#").strip())
    return "\n".join(lines)


def parse_candidate(raw_text: str) -> CandidateStep:
    """Split raw candidate text into (comment, code, markers).

    Terminal iff <end_of_code> or <end_of_answer> is present. Raises
    StepParseError on empty text, text without any marker, or a step with
    neither code nor an answer block.
    """
    if not raw_text or not raw_text.strip():
        raise StepParseError("empty candidate text")

    text = raw_text
    body = text.lstrip()
    if body.startswith(CODE_OPEN):
        body = body[len(CODE_OPEN):]

    step_idx = body.find(END_OF_STEP)
    code_idx = body.find(END_OF_CODE)
    answer_idx = body.find(ANSWER_OPEN)

    if step_idx < 0 and code_idx < 0 and answer_idx < 0:
        raise StepParseError("no step markers found")

    if code_idx >= 0 and (step_idx < 0 or code_idx < step_idx):
        code = body[:code_idx].strip("\n")
        rest = body[code_idx + len(END_OF_CODE):]
        terminal = True
    elif step_idx >= 0:
        code = body[:step_idx].strip("\n")
        rest = body[step_idx + len(END_OF_STEP):]
        # An answer block after <end_of_step> still terminates the solution.
        terminal = ANSWER_CLOSE in rest or ANSWER_OPEN in rest
    else:
        code = body[:answer_idx].strip("\n")
        rest = body[answer_idx:]
        terminal = True

    output_text = _section(rest, OUTPUT_OPEN, OUTPUT_CLOSE)
    answer_text = _section(rest, ANSWER_OPEN, ANSWER_CLOSE)

    if not code.strip() and answer_text is None:
        raise StepParseError("candidate has neither code nor an answer block")

    return CandidateStep(
        raw_text=raw_text,
        nl_comment=comment_lines(code),
        code=code,
        declared_terminal=terminal,
        output_text=output_text,
        answer_text=answer_text,
    )


def render_step(code: str, *, terminal: bool = False,
                output: str | None = None, answer: str | None = None) -> str:
    """Render a step back into marker-delimited text (inverse of parse_candidate)."""
    if not terminal:
        return f"{code}\n{END_OF_STEP}"
    parts = [f"{code}\n{END_OF_CODE}"]
    if output is not None:
        parts.append(f"{OUTPUT_OPEN}{output}{OUTPUT_CLOSE}")
    if answer is not None:
        parts.append(f"{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
    return "\n".join(parts)
