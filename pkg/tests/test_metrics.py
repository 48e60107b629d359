import json
import math
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from pedalign import metrics as m
from pedalign import prefgen as pg
from pedalign.policy import ToyTutorPolicy, build_vocab
from pedalign.prefgen import Signature

from helpers import conv


def fp(gold, pred, round=1, conv_id="c"):
    return m.FieldPrediction(conv_id, round, Signature(*gold), None if pred is None else Signature(*pred))


def with_field_accuracy(accs, n=100):
    """Predictions whose per-field accuracies are exactly ``accs`` (multiples of 1/n)."""
    hits = [round(a * n) for a in accs]
    out = []
    for i in range(n):
        pred = tuple(
            code if i < h else wrong
            for code, wrong, h in zip(("a", 1, "x"), ("b", 2, "y"), hits)
        )
        out.append(fp(("a", 1, "x"), pred))
    return out


def test_accuracy_table_cell():
    preds = with_field_accuracy((0.74, 0.74, 0.84))
    acc = m.field_accuracy(preds)
    assert acc[:3] == (0.74, 0.74, 0.84)
    assert acc[3] == pytest.approx(0.773333333333, abs=1e-12)
    assert m.display_accuracy(acc[3]) == 77
    assert m.format_accuracy_cell(acc[:3]) == "77 (74, 74, 84)"


def test_f1_table_cell():
    per_field = (0.42, 0.24, 0.37)
    assert m.field_mean(per_field) == pytest.approx(0.343333333333, abs=1e-12)
    assert m.display_f1(m.field_mean(per_field)) == "0.34"
    assert m.format_f1_cell(per_field) == "0.34 (0.42, 0.24, 0.37)"


@pytest.mark.parametrize("x,shown", [(0.775, 78), (0.765, 77), (0.5, 50), (0.005, 1), (1.0, 100)])
def test_display_accuracy_rounds_half_up(x, shown):
    assert m.display_accuracy(x) == shown


def test_display_f1_half_up():
    assert m.display_f1(0.125) == "0.13"
    assert m.display_f1(1.0) == "1.00"


def test_perfect_predictions():
    preds = [fp(("a", 1, "x"), ("a", 1, "x")), fp(("b", 3, "y"), ("b", 3, "y"))]
    assert m.field_accuracy(preds) == (1.0, 1.0, 1.0, 1.0)
    assert m.macro_f1(preds) == (1.0, 1.0, 1.0, 1.0)


def test_action_accuracy_counting():
    preds = [fp(("a", 1, "x"), ("a", 1, "x"))] * 3 + [fp(("a", 1, "x"), ("a", 2, "x"))]
    assert m.field_accuracy(preds)[1] == 0.75


def test_macro_f1_small_example():
    preds = [fp((g, 1, "x"), (p, 1, "x")) for g, p in zip("aab", "abb")]
    assert m.macro_f1(preds)[0] == pytest.approx(2 / 3, abs=1e-12)


def test_macro_f1_ignores_classes_absent_from_gold():
    # prediction "c" never occurs in gold: it costs recall for "a" but is not a class itself
    preds = [fp(("a", 1, "x"), ("c", 1, "x")), fp(("a", 1, "x"), ("a", 1, "x"))]
    assert m.macro_f1(preds)[0] == pytest.approx(2 / 3)


def test_unparseable_counts_as_wrong():
    preds = [fp(("a", 1, "x"), None), fp(("a", 1, "x"), ("a", 1, "x"))]
    assert m.field_accuracy(preds) == (0.5, 0.5, 0.5, 0.5)
    assert m.macro_f1(preds)[0] == pytest.approx(2 / 3)


def test_empty_inputs():
    for fn in (m.field_accuracy, m.macro_f1, m.multi_round_curve, m.metrics_report):
        with pytest.raises(m.EmptyInput):
            fn([])


def test_round_must_be_positive():
    with pytest.raises(ValueError):
        fp(("a", 1, "x"), None, round=0)


def test_curve_single_round():
    preds = [fp(("a", 1, "x"), ("a", 1, "x"))] * 3
    assert m.multi_round_curve(preds) == [(1, 1.0, 3)]


def test_curve_declining_endpoints():
    preds = []
    for t, acc in zip(range(1, 9), (0.75, 0.73, 0.71, 0.69, 0.67, 0.65, 0.62, 0.60)):
        for p in with_field_accuracy((acc, acc, acc)):
            preds.append(m.FieldPrediction("c", t, p.gold, p.pred))
    curve = m.multi_round_curve(preds)
    assert curve[0][:2] == (1, pytest.approx(0.75))
    assert curve[-1][:2] == (8, pytest.approx(0.60))


def test_curve_pools_late_rounds():
    preds = [fp(("a", 1, "x"), ("a", 1, "x"), round=r) for r in (1, 9, 10)]
    assert m.multi_round_curve(preds, cap=8) == [(1, 1.0, 1), (8, 1.0, 2)]


@given(st.integers(0, 10**6))
def test_round_weighted_mean_equals_overall(seed):
    preds = oracles.random_predictions(random.Random(seed))
    curve = m.multi_round_curve(preds)
    weighted = math.fsum(acc * n for _, acc, n in curve) / sum(n for *_, n in curve)
    assert weighted == pytest.approx(m.field_accuracy(preds)[3], abs=1e-12)


def test_metrics_match_brute_force_oracle():
    rng = random.Random(2024)
    worst = 0.0
    for _ in range(1000):
        preds = oracles.random_predictions(rng)
        acc, f1 = m.field_accuracy(preds), m.macro_f1(preds)
        for i, name in enumerate(m.FIELDS):
            worst = max(worst, abs(acc[i] - oracles.accuracy(preds, name)))
            worst = max(worst, abs(f1[i] - oracles.macro_f1(preds, name)))
        for (t, a, n), (ot, oa, on) in zip(m.multi_round_curve(preds), oracles.round_curve(preds, 8), strict=True):
            assert (t, n) == (ot, on)
            worst = max(worst, abs(a - oa))
    assert worst <= 1e-12


def test_report_dict_and_render():
    preds = with_field_accuracy((0.74, 0.74, 0.84))
    report = m.metrics_report(preds)
    d = report.to_dict()
    assert d["accuracy"]["substate"] == 0.84
    assert d["display"]["accuracy"] == "77 (74, 74, 84)"
    assert d["n_examples"] == 100
    json.dumps(d)
    text = m.render_report(report, m.multi_round_curve(preds))
    assert "77 (74, 74, 84)" in text


def test_perplexity_examples():
    assert m.perplexity([-0.5, -1.0, -1.5]) == pytest.approx(math.e, abs=1e-12)
    assert m.perplexity([0.0]) == 1.0
    for k in (1, 5, 40):
        assert m.perplexity([-math.log(4)] * k) == pytest.approx(4.0, abs=1e-12)


def test_perplexity_errors():
    with pytest.raises(m.EmptyTokens):
        m.perplexity([])
    with pytest.raises(m.PositiveLogProb):
        m.perplexity([-1.0, 0.1])
    with pytest.raises(ValueError):
        m.perplexity([-math.inf])


logprob_lists = st.lists(st.floats(-8, 0, allow_nan=False), min_size=1, max_size=30)


@given(logprob_lists, st.randoms())
def test_perplexity_order_invariant(xs, rnd):
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    assert m.perplexity(shuffled) == pytest.approx(m.perplexity(xs), rel=1e-12)


@given(logprob_lists)
def test_perplexity_duplication_invariant(xs):
    assert m.perplexity(xs + xs) == pytest.approx(m.perplexity(xs), rel=1e-12)
    assert m.perplexity(xs) >= 1.0


def test_perplexity_matches_oracle():
    rng = random.Random(7)
    worst = 0.0
    for _ in range(1000):
        xs = [rng.uniform(-5, 0) for _ in range(rng.randint(1, 25))]
        worst = max(worst, abs(m.perplexity(xs) - oracles.perplexity(xs)) / oracles.perplexity(xs))
    assert worst <= 1e-12


def test_ppl_table_gap_arithmetic():
    table = m.PplTable({"A1": 2.09, "A2": 13.9, "A4": None, "A5": None}, {"A1": 1, "A2": 1, "A4": 0, "A5": 0})
    assert table.gap("A1", "A2") == pytest.approx(11.81, abs=1e-12)
    assert table.gap("A4", "A5") is None
    assert table.to_dict()["gap_a4_a5"] is None
    assert "-" in m.render_ppl_table(table)


BANK = {"s1": "forty two"}


def probe_policy(probes):
    texts = [a.utterance for p in probes for a in (p.aligned, p.misaligned)]
    return ToyTutorPolicy.create(build_vocab(texts), 4)


def test_ppl_report_uniform_policy_is_flat():
    probes = pg.build_misaligned_probes(conv([3, 1, 4]), BANK)
    policy = probe_policy(probes)
    table = m.ppl_gap_report(probes, policy)
    v = len(policy.vocab)
    assert all(table.mean[b] == pytest.approx(v) for b in m.PPL_BUCKETS)
    assert table.gap("A1", "A2") == pytest.approx(0.0, abs=1e-9)


def test_ppl_report_absent_buckets():
    probes = pg.build_misaligned_probes(conv([3, 1]), BANK)
    table = m.ppl_gap_report(probes, probe_policy(probes))
    assert table.mean["A4"] is None and table.count["A4"] == 0
    assert table.count == {"A1": 1, "A2": 1, "A4": 0, "A5": 0}
    with pytest.raises(m.EmptyInput):
        m.ppl_gap_report([], probe_policy(probes))


def test_ppl_report_matches_per_probe_recomputation(corpus, bank, sft_policy):
    probes = [p for c in corpus for p in pg.build_misaligned_probes(c, bank)]
    table = m.ppl_gap_report(probes, sft_policy)
    for bucket in m.PPL_BUCKETS:
        values = [
            oracles.perplexity(sft_policy.token_logprobs(a))
            for p in probes
            for a in (p.aligned, p.misaligned)
            if f"A{a.action}" == bucket
        ]
        assert table.count[bucket] == len(values)
        if values:
            assert table.mean[bucket] == pytest.approx(sum(values) / len(values), rel=1e-12)


def test_prediction_file_round_trip():
    p = fp(("c", 4, "x"), ("a", 1, "w"), round=3, conv_id="z")
    assert m.prediction_from_dict(json.loads(json.dumps(m.prediction_to_dict(p)))) == p


@pytest.mark.parametrize(
    "raw",
    [None, {}, {"eval": "a", "action": "x", "substate": "x"}, {"eval": "q", "action": 1, "substate": "x"}, "garbage"],
)
def test_unparseable_prediction_records(raw):
    d = {"conv_id": "c", "turn": 1, "gold": {"eval": "a", "action": "1", "substate": "x"}, "pred": raw}
    assert m.prediction_from_dict(d).pred is None


def test_bad_gold_is_an_error():
    with pytest.raises(ValueError):
        m.prediction_from_dict({"conv_id": "c", "turn": 1, "gold": {"eval": "a"}, "pred": None})


def test_predict_conversations_teacher_forced(sft_policy, splits):
    _, _, test = splits
    preds = m.predict_conversations(sft_policy, test)
    assert len(preds) == sum(len(c.turns) for c in test)
    assert [p.round for p in preds[: len(test[0].turns)]] == list(range(1, len(test[0].turns) + 1))
