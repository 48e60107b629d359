"""Pedagogical-alignment evaluation.

Per-field accuracy and macro-F1 over the three classification fields,
accuracy by conversation round, and perplexity of guidance versus
direct-solution utterances.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

from .prefgen import PerplexityProbe, Signature, build_context, pedagogical_signature
from .schema import ACTION_CODES, EVAL_CODES, SUBSTATE_CODES, Conversation

FIELDS = ("eval", "action", "substate")
DEFAULT_ROUND_CAP = 8
PPL_BUCKETS = ("A1", "A2", "A4", "A5")


class EmptyInput(ValueError):
    pass


class EmptyTokens(ValueError):
    pass


class PositiveLogProb(ValueError):
    pass


@dataclass(frozen=True)
class FieldPrediction:
    conv_id: str
    round: int
    gold: Signature
    pred: Signature | None  # None: the model output could not be parsed

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round index starts at 1")

    def hit(self, name: str) -> bool:
        return self.pred is not None and getattr(self.pred, name) == getattr(self.gold, name)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: tuple[float, float, float]
    accuracy_mean: float
    f1: tuple[float, float, float]
    f1_mean: float
    n_examples: int

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["accuracy"] = dict(zip(FIELDS, self.accuracy))
        d["f1"] = dict(zip(FIELDS, self.f1))
        d["display"] = {
            "accuracy": format_accuracy_cell(self.accuracy),
            "f1": format_f1_cell(self.f1),
        }
        return d


@dataclass(frozen=True)
class PplTable:
    mean: dict[str, float | None]
    count: dict[str, int]

    def gap(self, guidance: str, direct: str) -> float | None:
        a, b = self.mean[guidance], self.mean[direct]
        return None if a is None or b is None else b - a

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": dict(self.mean),
            "count": dict(self.count),
            "gap_a1_a2": self.gap("A1", "A2"),
            "gap_a4_a5": self.gap("A4", "A5"),
        }


def _require(preds: Sequence[Any]) -> None:
    if not preds:
        raise EmptyInput("need at least one prediction")


def field_mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def field_accuracy(preds: Sequence[FieldPrediction]) -> tuple[float, float, float, float]:
    _require(preds)
    accs = [sum(p.hit(name) for p in preds) / len(preds) for name in FIELDS]
    return accs[0], accs[1], accs[2], field_mean(accs)


def _macro_f1_one(gold: list[Any], pred: list[Any]) -> float:
    scores = []
    for cls in sorted(set(gold), key=str):
        tp = sum(1 for g, p in zip(gold, pred) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(gold, pred) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(gold, pred) if g == cls and p != cls)
        scores.append(2 * tp / (2 * tp + fp + fn))
    return math.fsum(scores) / len(scores)


def macro_f1(preds: Sequence[FieldPrediction]) -> tuple[float, float, float, float]:
    """Unweighted mean of per-class F1, over the classes present in gold."""
    _require(preds)
    f1s = []
    for name in FIELDS:
        gold = [getattr(p.gold, name) for p in preds]
        pred = [getattr(p.pred, name) if p.pred is not None else None for p in preds]
        f1s.append(_macro_f1_one(gold, pred))
    return f1s[0], f1s[1], f1s[2], field_mean(f1s)


def metrics_report(preds: Sequence[FieldPrediction]) -> MetricsReport:
    acc = field_accuracy(preds)
    f1 = macro_f1(preds)
    return MetricsReport(acc[:3], acc[3], f1[:3], f1[3], len(preds))


def multi_round_curve(
    preds: Sequence[FieldPrediction], cap: int = DEFAULT_ROUND_CAP
) -> list[tuple[int, float, int]]:
    """(round, mean three-field accuracy, n) per round; rounds past ``cap`` pool into ``cap``."""
    _require(preds)
    groups: dict[int, list[FieldPrediction]] = defaultdict(list)
    for p in preds:
        groups[min(p.round, cap)].append(p)
    return [(t, field_accuracy(groups[t])[3], len(groups[t])) for t in sorted(groups)]


def perplexity(token_logprobs: Sequence[float]) -> float:
    """exp of the mean per-token negative log-likelihood."""
    if len(token_logprobs) == 0:
        raise EmptyTokens("perplexity of an empty sequence is undefined")
    values = [float(x) for x in token_logprobs]
    for x in values:
        if not math.isfinite(x):
            raise ValueError("token log-probabilities must be finite")
        if x > 0:
            raise PositiveLogProb(f"log-probability {x} is positive")
    return math.exp(-math.fsum(values) / len(values))


def ppl_gap_report(probes: Sequence[PerplexityProbe], policy) -> PplTable:
    """Mean utterance perplexity of aligned (A1/A4) and misaligned (A2/A5) turns."""
    if not probes:
        raise EmptyInput("need at least one probe")
    values: dict[str, list[float]] = {b: [] for b in PPL_BUCKETS}
    for probe in probes:
        for ann in (probe.aligned, probe.misaligned):
            values[f"A{ann.action}"].append(perplexity(policy.token_logprobs(ann)))
    return PplTable(
        mean={b: (math.fsum(v) / len(v) if v else None) for b, v in values.items()},
        count={b: len(v) for b, v in values.items()},
    )


# -- formatting -------------------------------------------------------------


def _round_half_up(x: float, places: str) -> Decimal:
    return Decimal(repr(x)).quantize(Decimal(places), rounding=ROUND_HALF_UP)


def display_accuracy(x: float) -> int:
    """Accuracy as a whole percentage."""
    return int(_round_half_up(x * 100, "1"))


def display_f1(x: float) -> str:
    return str(_round_half_up(x, "0.01"))


def format_accuracy_cell(per_field: Sequence[float]) -> str:
    inner = ", ".join(str(display_accuracy(v)) for v in per_field)
    return f"{display_accuracy(field_mean(per_field))} ({inner})"


def format_f1_cell(per_field: Sequence[float]) -> str:
    inner = ", ".join(display_f1(v) for v in per_field)
    return f"{display_f1(field_mean(per_field))} ({inner})"


def render_report(report: MetricsReport, curve: Iterable[tuple[int, float, int]] = ()) -> str:
    lines = [
        f"examples  {report.n_examples}",
        f"Acc       {format_accuracy_cell(report.accuracy)}",
        f"F1        {format_f1_cell(report.f1)}",
    ]
    curve = list(curve)
    if curve:
        lines.append("round  acc     n")
        lines += [f"{t:>5}  {acc:.3f}  {n}" for t, acc, n in curve]
    return "\n".join(lines)


def render_ppl_table(table: PplTable) -> str:
    head = " ".join(f"{b:>8}" for b in PPL_BUCKETS)
    row = " ".join(f"{table.mean[b]:8.3f}" if table.mean[b] is not None else f"{'-':>8}" for b in PPL_BUCKETS)
    counts = " ".join(f"{table.count[b]:>8}" for b in PPL_BUCKETS)
    return f"{head}\n{row}\n{counts}"


# -- predictions ------------------------------------------------------------


def predict_conversations(policy, convs: Sequence[Conversation]) -> list[FieldPrediction]:
    """Teacher-forced predictions: the gold history conditions every turn."""
    preds = []
    for conv in convs:
        for turn in conv.turns:
            ann = policy.annotate(build_context(conv, turn.index))
            preds.append(
                FieldPrediction(conv.id, turn.index, pedagogical_signature(turn.tutor), pedagogical_signature(ann))
            )
    return preds


def _signature_or_none(raw: Any) -> Signature | None:
    try:
        e = str(raw["eval"]).strip().lower()
        a = int(str(raw["action"]).strip())
        s = str(raw["substate"]).strip().lower()
    except (KeyError, TypeError, ValueError):
        return None
    if e not in EVAL_CODES or a not in ACTION_CODES or s not in SUBSTATE_CODES:
        return None
    return Signature(e, a, s)


def prediction_from_dict(d: Mapping[str, Any]) -> FieldPrediction:
    gold = _signature_or_none(d["gold"])
    if gold is None:
        raise ValueError(f"unparseable gold signature in {d.get('conv_id')!r} turn {d.get('turn')}")
    return FieldPrediction(str(d["conv_id"]), int(d["turn"]), gold, _signature_or_none(d.get("pred")))


def prediction_to_dict(p: FieldPrediction) -> dict[str, Any]:
    return {
        "conv_id": p.conv_id,
        "turn": p.round,
        "gold": asdict(p.gold),
        "pred": asdict(p.pred) if p.pred is not None else None,
    }
