from __future__ import annotations

import pytest

from veritree.steps import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    END_OF_CODE,
    END_OF_STEP,
    CandidateStep,
    StepParseError,
    parse_candidate,
    render_step,
)

NONTERMINAL = "# Step 1: add the numbers\ntotal = 1 + 2\n<end_of_step>"
TERMINAL = (
    "# Now print the final answer\nprint(x_plus_y)\n<end_of_code>\n"
    "<output>17<end_of_output>\n"
    "<answer>The value of x + y is \\boxed{17}<end_of_answer>"
)


def test_nonterminal_step_parses():
    cand = parse_candidate(NONTERMINAL)
    assert not cand.declared_terminal
    assert cand.code == "# Step 1: add the numbers\ntotal = 1 + 2"
    assert cand.nl_comment == "Step 1: add the numbers"
    assert cand.answer_text is None


def test_terminal_marker_sets_declared_terminal():
    cand = parse_candidate(TERMINAL)
    assert cand.declared_terminal
    assert cand.code.endswith("print(x_plus_y)")
    assert cand.output_text == "17"
    assert cand.answer_text == "The value of x + y is \\boxed{17}"


def test_answer_block_alone_is_terminal():
    cand = parse_candidate("x = 1\n<end_of_step>\n<answer>\\boxed{3}<end_of_answer>")
    assert cand.declared_terminal
    assert cand.answer_text == "\\boxed{3}"


def test_empty_string_is_parse_error():
    with pytest.raises(StepParseError):
        parse_candidate("")
    with pytest.raises(StepParseError):
        parse_candidate("   \n  ")


def test_markerless_text_is_parse_error():
    with pytest.raises(StepParseError):
        parse_candidate("x = 1\nprint(x)")


def test_leading_code_marker_is_stripped():
    cand = parse_candidate("<code>\nx = 1\n<end_of_step>")
    assert cand.code == "x = 1"


def test_multiline_comments_joined():
    cand = parse_candidate("# first\n# second\nx = 1\n<end_of_step>")
    assert cand.nl_comment == "first\nsecond"


def test_render_parse_round_trip_nonterminal():
    raw = render_step("# do a thing\nvalue = 2")
    cand = parse_candidate(raw)
    assert cand.raw_text == raw
    assert raw == f"{cand.code}\n{END_OF_STEP}"


def test_render_parse_round_trip_terminal():
    raw = render_step("print(3)", terminal=True, output="3",
                      answer="The final answer is \\boxed{3}")
    cand = parse_candidate(raw)
    assert cand.declared_terminal
    assert cand.output_text == "3"
    reassembled = (
        f"{cand.code}\n{END_OF_CODE}\n"
        f"<output>{cand.output_text}<end_of_output>\n"
        f"{ANSWER_OPEN}{cand.answer_text}{ANSWER_CLOSE}"
    )
    assert reassembled == raw


def test_candidate_step_is_frozen():
    cand = parse_candidate(NONTERMINAL)
    assert isinstance(cand, CandidateStep)
    with pytest.raises(AttributeError):
        cand.code = "other"
