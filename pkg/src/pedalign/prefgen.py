"""Preference data construction.

Two tutor streams that answered the same student turns are compared on their
pedagogical signature (evaluation, action, subproblem state). Every turn where
the signatures differ becomes a preference pair with the reference tutor's
turn as ``chosen`` and the other tutor's turn as ``rejected``.

The module also builds perplexity probes (a guidance turn next to a synthetic
direct-solution counterpart) and the seeded corpus split.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Any, Literal, Mapping

from .schema import (
    ACTION_CODES,
    EVAL_CODES,
    SUBSTATE_CODES,
    Conversation,
    ConversationTurn,
    TutorAnnotation,
    annotation_to_dict,
    parse_turn_annotation,
    validate_action_ordering,
)

MISALIGNED_TEMPLATE = "The answer to this part is: {answer}. Let's move on."

ProbeKind = Literal["A1vsA2", "A4vsA5"]


class TurnOutOfRange(IndexError):
    pass


class MisalignedStreams(ValueError):
    pass


class MissingSolution(KeyError):
    def __init__(self, subproblem: str):
        super().__init__(subproblem)
        self.subproblem = subproblem

    def __str__(self):
        return f"solution bank has no answer for subproblem {self.subproblem!r}"


class InsufficientCorpus(ValueError):
    pass


@dataclass(frozen=True)
class Context:
    question: str
    student_utterances: tuple[str, ...]
    tutor_annotations: tuple[TutorAnnotation, ...]

    def __post_init__(self):
        if len(self.student_utterances) != len(self.tutor_annotations) + 1:
            raise ValueError("context needs exactly one more student utterance than tutor turns")

    @property
    def turn(self) -> int:
        return len(self.student_utterances)


@dataclass(frozen=True)
class Signature:
    eval: str
    action: int
    substate: str


@dataclass(frozen=True)
class PreferencePair:
    context: Context
    chosen: TutorAnnotation
    rejected: TutorAnnotation
    source_conversation: str
    turn: int


@dataclass(frozen=True)
class PerplexityProbe:
    context: Context
    aligned: TutorAnnotation
    misaligned: TutorAnnotation
    probe_kind: ProbeKind
    source_conversation: str = ""
    turn: int = 0


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    sizes: tuple[int, int, int] = (600, 600, 450)


def build_context(conv: Conversation, t: int) -> Context:
    """History the tutor sees before answering turn ``t`` (1-based)."""
    if not 1 <= t <= len(conv.turns):
        raise TurnOutOfRange(f"turn {t} outside 1..{len(conv.turns)} in {conv.id!r}")
    prior = conv.turns[:t]
    return Context(
        question=conv.question,
        student_utterances=tuple(turn.student_utterance for turn in prior),
        tutor_annotations=tuple(turn.tutor for turn in prior[:-1]),
    )


def pedagogical_signature(ann: TutorAnnotation) -> Signature:
    return Signature(ann.eval, ann.action, ann.substate)


def supervised_examples(convs: list[Conversation]) -> list[tuple[Context, TutorAnnotation]]:
    return [(build_context(c, t.index), t.tutor) for c in convs for t in c.turns]


def build_preference_pairs(
    tutor_stream: list[Conversation], sft_stream: list[Conversation]
) -> list[PreferencePair]:
    """Pair up divergent turns of two aligned tutor streams.

    Output is ordered by the tutor stream's conversation order, then turn.
    """
    by_id = {c.id: c for c in sft_stream}
    if len(by_id) != len(sft_stream):
        raise MisalignedStreams("duplicate conversation ids in the rejected stream")
    if set(by_id) != {c.id for c in tutor_stream}:
        missing = sorted({c.id for c in tutor_stream} ^ set(by_id))
        raise MisalignedStreams(f"conversation ids differ between streams: {missing[:5]}")

    pairs = []
    for conv in tutor_stream:
        other = by_id[conv.id]
        if conv.question != other.question:
            raise MisalignedStreams(f"{conv.id}: questions differ")
        if len(conv.turns) != len(other.turns):
            raise MisalignedStreams(
                f"{conv.id}: turn counts differ ({len(conv.turns)} vs {len(other.turns)})"
            )
        for mine, theirs in zip(conv.turns, other.turns):
            if mine.student_utterance != theirs.student_utterance:
                raise MisalignedStreams(f"{conv.id}: student utterance differs at turn {mine.index}")
            if pedagogical_signature(mine.tutor) != pedagogical_signature(theirs.tutor):
                pairs.append(
                    PreferencePair(
                        context=build_context(conv, mine.index),
                        chosen=mine.tutor,
                        rejected=theirs.tutor,
                        source_conversation=conv.id,
                        turn=mine.index,
                    )
                )
    return pairs


def noisy_stream(
    convs: list[Conversation], flip_prob: float = 0.3, seed: int = 0
) -> list[Conversation]:
    """Stand-in for a second tutor: perturb each signature field independently.

    A flipped field takes a uniformly drawn different code. Student turns,
    subproblem text and utterances are copied unchanged.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    rng = random.Random(seed)
    out = []
    for conv in sorted(convs, key=lambda c: c.id):
        turns = []
        for turn in conv.turns:
            ann = turn.tutor
            changes: dict[str, Any] = {}
            for name, codes in (("eval", EVAL_CODES), ("action", ACTION_CODES), ("substate", SUBSTATE_CODES)):
                if rng.random() < flip_prob:
                    current = getattr(ann, name)
                    changes[name] = rng.choice([c for c in codes if c != current])
            turns.append(ConversationTurn(turn.index, turn.student_utterance, replace(ann, **changes)))
        out.append(replace(conv, turns=tuple(turns)))
    order = {c.id: i for i, c in enumerate(convs)}
    out.sort(key=lambda c: order[c.id])
    return out


def build_misaligned_probes(
    conv: Conversation, solution_bank: Mapping[str, str]
) -> list[PerplexityProbe]:
    """Probes for the first action-1 and first action-4 turn of a conversation."""
    report = validate_action_ordering(conv)
    if not report.is_valid:
        raise ValueError(f"{conv.id}: conversation violates action ordering")
    probes = []
    seen: set[int] = set()
    for turn in conv.turns:
        action = turn.tutor.action
        if action not in (1, 4) or action in seen:
            continue
        seen.add(action)
        aligned = turn.tutor
        if aligned.subproblem not in solution_bank:
            raise MissingSolution(aligned.subproblem)
        misaligned = replace(
            aligned,
            action=action + 1,
            utterance=MISALIGNED_TEMPLATE.format(answer=solution_bank[aligned.subproblem]),
        )
        probes.append(
            PerplexityProbe(
                context=build_context(conv, turn.index),
                aligned=aligned,
                misaligned=misaligned,
                probe_kind="A1vsA2" if action == 1 else "A4vsA5",
                source_conversation=conv.id,
                turn=turn.index,
            )
        )
    return probes


def probes_to_pairs(probes: list[PerplexityProbe]) -> list[PreferencePair]:
    """Guidance turn preferred over its direct-solution counterpart."""
    return [
        PreferencePair(p.context, p.aligned, p.misaligned, p.source_conversation, p.turn)
        for p in probes
    ]


def split_dataset(
    convs: list[Conversation], spec: SplitSpec
) -> tuple[list[Conversation], list[Conversation], list[Conversation]]:
    """Seeded shuffle then contiguous (sft, lhp, test) slices; leftovers dropped."""
    n_sft, n_lhp, n_test = spec.sizes
    if min(spec.sizes) < 0:
        raise ValueError("split sizes must be non-negative")
    need = n_sft + n_lhp + n_test
    if need > len(convs):
        raise InsufficientCorpus(f"split needs {need} conversations, corpus has {len(convs)}")
    items = sorted(convs, key=lambda c: c.id)
    rng = random.Random(spec.seed)
    # Fisher-Yates, written out so the permutation does not depend on library internals
    for i in range(len(items) - 1, 0, -1):
        j = rng.randrange(i + 1)
        items[i], items[j] = items[j], items[i]
    return items[:n_sft], items[n_sft:n_sft + n_lhp], items[n_sft + n_lhp:need]


# -- serialization --------------------------------------------------------


def context_to_dict(ctx: Context) -> dict[str, Any]:
    return {
        "question": ctx.question,
        "students": list(ctx.student_utterances),
        "tutors": [annotation_to_dict(a) for a in ctx.tutor_annotations],
    }


def context_from_dict(d: Mapping[str, Any]) -> Context:
    return Context(
        question=d["question"],
        student_utterances=tuple(d["students"]),
        tutor_annotations=tuple(parse_turn_annotation(a) for a in d["tutors"]),
    )


def pair_to_dict(pair: PreferencePair) -> dict[str, Any]:
    return {
        "context": context_to_dict(pair.context),
        "chosen": annotation_to_dict(pair.chosen),
        "rejected": annotation_to_dict(pair.rejected),
        "conv_id": pair.source_conversation,
        "turn": pair.turn,
    }


def pair_from_dict(d: Mapping[str, Any]) -> PreferencePair:
    return PreferencePair(
        context=context_from_dict(d["context"]),
        chosen=parse_turn_annotation(d["chosen"]),
        rejected=parse_turn_annotation(d["rejected"]),
        source_conversation=d["conv_id"],
        turn=int(d["turn"]),
    )


def probe_to_dict(probe: PerplexityProbe) -> dict[str, Any]:
    return {
        "context": context_to_dict(probe.context),
        "aligned": annotation_to_dict(probe.aligned),
        "misaligned": annotation_to_dict(probe.misaligned),
        "probe_kind": probe.probe_kind,
        "conv_id": probe.source_conversation,
        "turn": probe.turn,
    }


def probe_from_dict(d: Mapping[str, Any]) -> PerplexityProbe:
    kind = d["probe_kind"]
    if kind not in ("A1vsA2", "A4vsA5"):
        raise ValueError(f"unknown probe kind {kind!r}")
    return PerplexityProbe(
        context=context_from_dict(d["context"]),
        aligned=parse_turn_annotation(d["aligned"]),
        misaligned=parse_turn_annotation(d["misaligned"]),
        probe_kind=kind,
        source_conversation=d.get("conv_id", ""),
        turn=int(d.get("turn", 0)),
    )
