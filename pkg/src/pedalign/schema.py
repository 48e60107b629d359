"""Structured tutor-turn format: parsing, serialization and ordering checks.

A tutor turn carries three classification fields (evaluation of the student
response, the action taken, the subproblem state) plus the subproblem text
and the tutor utterance itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Mapping

EVAL_CODES = ("a", "b", "c", "d", "e", "f", "g")
ACTION_CODES = tuple(range(1, 13))
SUBSTATE_CODES = ("w", "x", "y", "z")

EVAL_KEY = "Evaluation of Student Response"
ACTION_KEY = "Action Based on Evaluation"
SUBSTATE_KEY = "Subproblem State"
SUBPROBLEM_KEY = "Subproblem"
UTTERANCE_KEY = "Tutorbot"

# short spellings used by some generation prompts
_ALIASES = {
    EVAL_KEY: (EVAL_KEY, "Eval of Student Response"),
    ACTION_KEY: (ACTION_KEY, "Action Based on Eval"),
    SUBSTATE_KEY: (SUBSTATE_KEY,),
    SUBPROBLEM_KEY: (SUBPROBLEM_KEY,),
    UTTERANCE_KEY: (UTTERANCE_KEY,),
}

RULE_A2_BEFORE_A1 = "A2_BEFORE_A1"
RULE_A5_BEFORE_A4 = "A5_BEFORE_A4"


class SchemaError(ValueError):
    """Base class for malformed tutor records."""


class MissingField(SchemaError):
    def __init__(self, name: str):
        super().__init__(f"missing field: {name!r}")
        self.name = name


class UnknownCode(SchemaError):
    def __init__(self, field_name: str, value: Any):
        super().__init__(f"unknown code {value!r} for field {field_name!r}")
        self.field = field_name
        self.value = value


class NonObjectInput(SchemaError):
    def __init__(self, got: Any):
        super().__init__(f"expected a key/value object, got {type(got).__name__}")


@dataclass(frozen=True)
class TutorAnnotation:
    eval: str
    action: int
    substate: str
    subproblem: str
    utterance: str

    def __post_init__(self):
        if self.eval not in EVAL_CODES:
            raise UnknownCode(EVAL_KEY, self.eval)
        if self.action not in ACTION_CODES:
            raise UnknownCode(ACTION_KEY, self.action)
        if self.substate not in SUBSTATE_CODES:
            raise UnknownCode(SUBSTATE_KEY, self.substate)
        if not self.utterance:
            raise MissingField(UTTERANCE_KEY)


@dataclass(frozen=True)
class ConversationTurn:
    index: int
    student_utterance: str
    tutor: TutorAnnotation


@dataclass(frozen=True)
class Conversation:
    id: str
    question: str
    turns: tuple[ConversationTurn, ...]

    def __post_init__(self):
        if not self.turns:
            raise SchemaError(f"conversation {self.id!r} has no turns")
        for expected, turn in enumerate(self.turns, start=1):
            if turn.index != expected:
                raise SchemaError(
                    f"conversation {self.id!r}: turn indices must run 1..n, "
                    f"found {turn.index} at position {expected}"
                )

    @property
    def actions(self) -> list[int]:
        return [t.tutor.action for t in self.turns]


@dataclass(frozen=True)
class Violation:
    turn: int
    rule: str
    message: str


@dataclass
class ValidationReport:
    conversation_id: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations


@dataclass
class ParseStats:
    total: int = 0
    parsed: int = 0
    skipped: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)


@dataclass(frozen=True)
class DatasetStats:
    n_conversations: int
    n_qa_pairs: int
    mean_rounds: float
    mean_words: float


def _lookup(raw: Mapping[str, Any], key: str) -> Any:
    for name in _ALIASES[key]:
        if name in raw:
            return raw[name]
    raise MissingField(key)


def _parse_action(value: Any) -> int:
    if isinstance(value, bool):
        raise UnknownCode(ACTION_KEY, value)
    if isinstance(value, int):
        code = value
    elif isinstance(value, str) and value.strip().isdigit():
        code = int(value.strip())
    else:
        raise UnknownCode(ACTION_KEY, value)
    if code not in ACTION_CODES:
        raise UnknownCode(ACTION_KEY, value)
    return code


def _parse_letter(value: Any, key: str, allowed: tuple[str, ...]) -> str:
    if not isinstance(value, str) or value.strip().lower() not in allowed:
        raise UnknownCode(key, value)
    return value.strip().lower()


def parse_turn_annotation(raw: Any) -> TutorAnnotation:
    """Parse one tutor record in either the long or short field-name form."""
    if not isinstance(raw, Mapping):
        raise NonObjectInput(raw)
    eval_code = _parse_letter(_lookup(raw, EVAL_KEY), EVAL_KEY, EVAL_CODES)
    action = _parse_action(_lookup(raw, ACTION_KEY))
    substate = _parse_letter(_lookup(raw, SUBSTATE_KEY), SUBSTATE_KEY, SUBSTATE_CODES)
    subproblem = _lookup(raw, SUBPROBLEM_KEY)
    utterance = _lookup(raw, UTTERANCE_KEY)
    if not isinstance(subproblem, str):
        raise SchemaError(f"{SUBPROBLEM_KEY!r} must be a string")
    if not isinstance(utterance, str) or not utterance:
        raise MissingField(UTTERANCE_KEY)
    return TutorAnnotation(eval_code, action, substate, subproblem, utterance)


def annotation_to_dict(ann: TutorAnnotation) -> dict[str, str]:
    return {
        EVAL_KEY: ann.eval,
        ACTION_KEY: str(ann.action),
        SUBSTATE_KEY: ann.substate,
        SUBPROBLEM_KEY: ann.subproblem,
        UTTERANCE_KEY: ann.utterance,
    }


def parse_conversation(record: Any) -> Conversation:
    if not isinstance(record, Mapping):
        raise NonObjectInput(record)
    for key in ("id", "question", "turns"):
        if key not in record:
            raise MissingField(key)
    if not isinstance(record["turns"], list):
        raise SchemaError("'turns' must be an array")
    turns = []
    for i, raw_turn in enumerate(record["turns"], start=1):
        if not isinstance(raw_turn, Mapping):
            raise NonObjectInput(raw_turn)
        if "student" not in raw_turn:
            raise MissingField("student")
        if "tutor" not in raw_turn:
            raise MissingField("tutor")
        turns.append(ConversationTurn(i, str(raw_turn["student"]), parse_turn_annotation(raw_turn["tutor"])))
    return Conversation(str(record["id"]), str(record["question"]), tuple(turns))


def conversation_to_dict(conv: Conversation) -> dict[str, Any]:
    return {
        "id": conv.id,
        "question": conv.question,
        "turns": [
            {"student": t.student_utterance, "tutor": annotation_to_dict(t.tutor)}
            for t in conv.turns
        ],
    }


def parse_conversation_stream(
    source: Iterable[str] | IO[str], strict: bool = True
) -> tuple[list[Conversation], ParseStats]:
    """Parse line-delimited conversation records.

    Blank lines are ignored. In strict mode the first malformed line raises
    ``SchemaError`` (or ``json.JSONDecodeError``); otherwise it is counted in
    ``stats.skipped`` and parsing continues.
    """
    stats = ParseStats()
    convs: list[Conversation] = []
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        stats.total += 1
        try:
            conv = parse_conversation(json.loads(line))
        except (json.JSONDecodeError, SchemaError) as exc:
            if strict:
                raise SchemaError(f"line {line_no}: {exc}") from exc
            stats.skipped += 1
            stats.errors.append((line_no, str(exc)))
            continue
        stats.parsed += 1
        convs.append(conv)
    return convs, stats


def load_conversations(path, strict: bool = True) -> tuple[list[Conversation], ParseStats]:
    with open(path, encoding="utf-8") as fh:
        return parse_conversation_stream(fh, strict=strict)


def validate_action_ordering(conv: Conversation) -> ValidationReport:
    """Flag direct-solution actions issued before the matching guidance action.

    Action 2 needs an earlier action 1, action 5 needs an earlier action 4.
    """
    report = ValidationReport(conv.id)
    seen: set[int] = set()
    for turn in conv.turns:
        action = turn.tutor.action
        if action == 2 and 1 not in seen:
            report.violations.append(
                Violation(turn.index, RULE_A2_BEFORE_A1, "action 2 issued before any action 1")
            )
        elif action == 5 and 4 not in seen:
            report.violations.append(
                Violation(turn.index, RULE_A5_BEFORE_A4, "action 5 issued before any action 4")
            )
        seen.add(action)
    return report


def _word_count(text: str) -> int:
    return len(text.split())


def dataset_stats(convs: list[Conversation]) -> DatasetStats:
    if not convs:
        return DatasetStats(0, 0, 0.0, 0.0)
    n_turns = sum(len(c.turns) for c in convs)
    words = 0
    for c in convs:
        words += _word_count(c.question)
        for t in c.turns:
            words += _word_count(t.student_utterance) + _word_count(t.tutor.utterance)
    return DatasetStats(len(convs), n_turns, n_turns / len(convs), words / len(convs))
