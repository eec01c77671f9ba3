"""Problem records and JSONL problem-bank I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

ORIGINS = ("curated", "synthetic")
_BANK_KEYS = {"id", "statement", "answer", "origin", "metadata"}


class BankError(ValueError):
    """Problem bank failed validation; message itemizes every offending line."""


@dataclass(frozen=True)
class Problem:
    """A math word problem with a ground-truth final answer."""

    id: str
    statement: str
    ground_truth: str
    origin: str = "curated"
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if not self.ground_truth:
            raise ValueError(f"problem {self.id!r}: ground_truth must be non-empty")
        if self.origin not in ORIGINS:
            raise ValueError(f"problem {self.id!r}: origin must be one of {ORIGINS}")
        if any(not isinstance(k, str) or not isinstance(v, str)
               for k, v in self.metadata.items()):
            raise ValueError(f"problem {self.id!r}: metadata must map strings to strings")


def load_bank(path: str | Path) -> list[Problem]:
    """Parse a JSONL bank {id, statement, answer, origin?, metadata?} in file order.

    Raises BankError listing every malformed line, missing field and duplicate id
    (duplicates name both line numbers).
    """
    problems: list[Problem] = []
    errors: list[str] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                errors.append(f"line {lineno}: malformed JSON ({exc.msg})")
                continue
            if not isinstance(record, dict):
                errors.append(f"line {lineno}: expected an object")
                continue
            unknown = set(record) - _BANK_KEYS
            if unknown:
                errors.append(f"line {lineno}: unknown keys {sorted(unknown)}")
                continue
            pid = record.get("id")
            answer = record.get("answer")
            if not pid:
                errors.append(f"line {lineno}: missing id")
                continue
            if pid in seen:
                errors.append(
                    f"line {lineno}: duplicate id {pid!r} (first seen on line {seen[pid]})"
                )
                continue
            if not answer:
                errors.append(f"line {lineno}: missing answer for id {pid!r}")
                continue
            seen[pid] = lineno
            try:
                problems.append(
                    Problem(
                        id=str(pid),
                        statement=str(record.get("statement", "")),
                        ground_truth=str(answer),
                        origin=record.get("origin", "curated"),
                        metadata=dict(record.get("metadata") or {}),
                    )
                )
            except ValueError as exc:
                errors.append(f"line {lineno}: {exc}")
    if errors:
        raise BankError("invalid problem bank:\n" + "\n".join(errors))
    return problems


def write_bank(problems: list[Problem], path: str | Path) -> None:
    """Write problems as JSONL; load_bank(write_bank(b)) round-trips."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            record = {
                "id": p.id,
                "statement": p.statement,
                "answer": p.ground_truth,
                "origin": p.origin,
                "metadata": p.metadata,
            }
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
