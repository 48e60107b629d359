import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pedalign import prefgen as pg
from pedalign.optim import OptimizerState, ShapeMismatch, TrainConfig, lr_scale, optimizer_step
from pedalign.policy import (
    BOS,
    EOS,
    MAX_DECODE_TOKENS,
    UNK,
    EmptyDataset,
    ToyTutorPolicy,
    action_group,
    build_vocab,
    featurize_context,
    lhp_train,
    load_policy,
    param_grad_check,
    reference_logprobs,
    save_policy,
    sft_train,
    softmax,
    tokenize,
)
from pedalign.schema import ACTION_CODES, EVAL_CODES, SUBSTATE_CODES, TutorAnnotation

from helpers import ann, conv

CTX = pg.Context("q", ("hello there", "i think it is atp"), (ann(1),))


def test_tokenize_and_vocab():
    assert tokenize("  Hello\tWORLD  ") == ["hello", "world"]
    vocab = build_vocab(["b a", "a c"])
    assert vocab == (BOS, EOS, UNK, "a", "b", "c")
    assert build_vocab(["b a", "a c"], min_freq=2) == (BOS, EOS, UNK, "a")


def test_action_groups():
    assert [action_group(a) for a in ACTION_CODES] == [0, 1, 2, 0, 1, 2, 2, 2, 2, 2, 2, 2]


def test_featurize_deterministic_and_bounded():
    assert featurize_context(CTX, 64) == featurize_context(CTX, 64)
    assert featurize_context(CTX, 1) == 0
    with pytest.raises(ValueError):
        featurize_context(CTX, 0)


def test_featurize_ignores_earlier_history():
    other = pg.Context("other question", ("different", "I  think it is ATP"), (ann(1, utterance="x"),))
    assert featurize_context(CTX, 64) == featurize_context(other, 64)


@pytest.mark.parametrize("n_buckets", [8, 64, 1024])
def test_last_action_separates_buckets_over_salts(n_buckets):
    other = pg.Context(CTX.question, CTX.student_utterances, (ann(4),))
    collisions = sum(
        featurize_context(CTX, n_buckets, salt) == featurize_context(other, n_buckets, salt)
        for salt in range(10_000)
    )
    assert collisions / 10_000 <= 1 / n_buckets


def small_policy(texts=("a hint for you", "the answer is atp"), n_buckets=8):
    return ToyTutorPolicy.create(build_vocab(texts), n_buckets)


def test_uniform_classification_logprob():
    p = small_policy()
    expected = math.log(1 / 7) + math.log(1 / 12) + math.log(1 / 4)
    assert p.classification_logprob(CTX, ann(1)) == pytest.approx(expected, abs=1e-12)


def test_uniform_token_logprob_counts_eos():
    p = small_policy()
    lp = p.token_logprobs(ann(1, utterance="a hint zebra"))
    assert len(lp) == 4
    assert lp == pytest.approx([-math.log(len(p.vocab))] * 4)


def test_unknown_tokens_map_to_unk():
    p = small_policy()
    assert p.token_ids("zebra")[1] == p.vocab.index(UNK)


def random_policy(seed=0, n_buckets=8):
    p = small_policy(n_buckets=n_buckets)
    rng = np.random.default_rng(seed)
    for k in p.params:
        p.params[k] = rng.normal(size=p.params[k].shape)
    return p


def test_classification_part_sums_to_one():
    p = random_policy()
    total = math.fsum(
        math.exp(p.classification_logprob(CTX, TutorAnnotation(e, a, s, "s1", "x")))
        for e, a, s in itertools.product(EVAL_CODES, ACTION_CODES, SUBSTATE_CODES)
    )
    assert total == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 50), st.sampled_from(ACTION_CODES), st.text(max_size=40))
def test_logprob_strictly_negative(seed, action, text):
    p = random_policy(seed)
    assert p.annotation_logprob(CTX, ann(action, utterance=text or "x")) < 0


def test_lr_schedule_points():
    cfg = TrainConfig(learning_rate=0.5, warmup_ratio=0.1)
    assert lr_scale(0.0, 0.1) == 0.0
    assert lr_scale(0.1, 0.1) * cfg.learning_rate == 0.5
    assert lr_scale(1.0, 0.1) == pytest.approx(0.0, abs=1e-15)
    assert lr_scale(0.55, 0.1) == pytest.approx(0.5)
    assert lr_scale(0.3, 0.0) == pytest.approx(0.5 * (1 + math.cos(0.3 * math.pi)))


def _params():
    return {"w": np.array([1.0, -2.0, 3.0])}


def test_zero_grad_zero_decay_is_identity():
    params = _params()
    cfg = TrainConfig(weight_decay=0.0)
    state = OptimizerState.for_params(params)
    optimizer_step(params, {"w": np.zeros(3)}, state, cfg, 0.5)
    assert list(params["w"]) == [1.0, -2.0, 3.0]
    assert state.step == 1


def test_step_fraction_zero_means_no_update():
    params = _params()
    state = OptimizerState.for_params(params)
    lr = optimizer_step(params, {"w": np.ones(3)}, state, TrainConfig(), 0.0)
    assert lr == 0.0
    assert list(params["w"]) == [1.0, -2.0, 3.0]


def test_adamw_first_step_oracle():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.05, warmup_ratio=0.0)
    params = _params()
    g = np.array([0.5, -1.0, 0.0])
    state = OptimizerState.for_params(params)
    lr = optimizer_step(params, {"w": g}, state, cfg, 0.0)
    assert lr == pytest.approx(0.1)
    # bias-corrected first step moves each coordinate by lr * sign(g) after decay
    expected = np.array([1.0, -2.0, 3.0]) * (1 - 0.1 * 0.05) - 0.1 * g / (np.abs(g) + 1e-8)
    assert params["w"] == pytest.approx(expected, abs=1e-9)


def test_shape_mismatch():
    params = _params()
    state = OptimizerState.for_params(params)
    with pytest.raises(ShapeMismatch):
        optimizer_step(params, {"w": np.zeros(2)}, state, TrainConfig(), 0.5)
    with pytest.raises(ShapeMismatch):
        optimizer_step(params, {"v": np.zeros(3)}, state, TrainConfig(), 0.5)


@pytest.mark.parametrize(
    "kwargs", [{"learning_rate": -1e-3}, {"batch_size": 0}, {"epochs": 0}, {"warmup_ratio": 1.5}, {"algo": "ppo"}]
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_train_config_defaults():
    cfg = TrainConfig.lhp()
    assert (cfg.batch_size, cfg.epochs, cfg.weight_decay, cfg.warmup_ratio, cfg.beta) == (16, 3, 0.05, 0.1, 0.1)
    assert TrainConfig.sft().learning_rate == 1e-2 and cfg.learning_rate == 1e-3


GOLD = TutorAnnotation("c", 4, "x", "s1", "a hint for you")


def overfit_one():
    p = small_policy()
    cfg = TrainConfig(learning_rate=0.1, epochs=60, batch_size=1, warmup_ratio=0.0)
    return sft_train(p, [(CTX, GOLD)], cfg)


def test_sft_overfits_single_example():
    policy, curve = overfit_one()
    assert all(math.isfinite(x) for x in curve)
    assert curve[-1] < curve[0]
    b = policy.bucket(CTX)
    assert EVAL_CODES[int(np.argmax(policy.params["eval"][b]))] == "c"
    assert ACTION_CODES[int(np.argmax(policy.params["action"][b]))] == 4
    out = policy.annotate(CTX)
    assert (out.eval, out.action, out.substate) == ("c", 4, "x")
    assert out.utterance == "a hint for you"


def test_annotate_uniform_tie_break():
    p = small_policy()
    out = p.annotate(CTX)
    assert (out.eval, out.action, out.substate) == ("a", 1, "w")
    assert out.subproblem == "s1"
    # lowest non-reserved token, then end of sequence
    assert out.utterance == "a"
    assert p.annotate(CTX) == out


def test_annotate_decode_cap():
    p = small_policy()
    a = p.vocab.index("a")
    p.params["tokens"][0, :, a] = 5.0  # "a" always follows, so decoding never ends
    assert p.annotate(CTX).utterance.split() == ["a"] * MAX_DECODE_TOKENS


def test_annotate_first_turn_has_empty_subproblem():
    ctx = pg.Context("q", ("hi",), ())
    assert small_policy().annotate(ctx).subproblem == ""


def test_sft_empty_and_deterministic():
    with pytest.raises(EmptyDataset):
        sft_train(small_policy(), [], TrainConfig())
    a, _ = overfit_one()
    b, _ = overfit_one()
    assert a.to_bytes() == b.to_bytes()


def test_sft_does_not_mutate_input():
    p = small_policy()
    before = p.to_bytes()
    sft_train(p, [(CTX, GOLD)], TrainConfig(learning_rate=0.1))
    assert p.to_bytes() == before


def test_softmax_normalized_after_training():
    policy, _ = overfit_one()
    for name in ("eval", "action", "substate"):
        assert np.allclose(softmax(policy.params[name]).sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(softmax(policy.params["tokens"]).sum(axis=-1), 1.0, atol=1e-9)


def synthetic_pairs(corpus, bank, n=50):
    probes = [p for c in corpus for p in pg.build_misaligned_probes(c, bank)]
    noisy = pg.build_preference_pairs(corpus, pg.noisy_stream(corpus, 0.3, seed=1))
    return (pg.probes_to_pairs(probes) + noisy)[:n]


def vocab_policy(corpus, bank, pairs, n_buckets=64):
    texts = [t.tutor.utterance for c in corpus for t in c.turns] + [p.rejected.utterance for p in pairs]
    return ToyTutorPolicy.create(build_vocab(texts), n_buckets)


@pytest.fixture(scope="module")
def lhp_setup(corpus, bank):
    pairs = synthetic_pairs(corpus, bank)
    assert len(pairs) == 50
    return vocab_policy(corpus, bank, pairs), pairs


def _margin(policy, reference, pairs, algo, beta=0.1):
    from pedalign.policy import mean_margin

    return mean_margin(policy, pairs, reference_logprobs(reference, pairs), algo, beta)


def test_dpo_training_raises_margin(lhp_setup):
    base, pairs = lhp_setup
    cfg = TrainConfig.lhp(learning_rate=0.01, epochs=3, algo="dpo")
    trained, curve = lhp_train(base, base, pairs, cfg)
    assert _margin(base, base, pairs, "dpo") == 0.0
    assert _margin(trained, base, pairs, "dpo") > 0.0
    assert curve[-1] == pytest.approx(_margin(trained, base, pairs, "dpo"))


def test_ipo_training_moves_toward_target(lhp_setup):
    base, pairs = lhp_setup
    cfg = TrainConfig.lhp(learning_rate=0.01, epochs=3, algo="ipo")
    trained, _ = lhp_train(base, base, pairs, cfg)
    before = _margin(base, base, pairs, "ipo")
    after = _margin(trained, base, pairs, "ipo")
    assert abs(after - 5.0) < abs(before - 5.0)


def test_lr_zero_changes_nothing(lhp_setup):
    base, pairs = lhp_setup
    cfg = TrainConfig.lhp(learning_rate=0.0, epochs=1)
    trained, curve = lhp_train(base, base, pairs, cfg)
    assert trained.to_bytes() == base.to_bytes()
    assert curve == [0.0]


@pytest.mark.parametrize("algo", ["dpo", "ipo", "kto"])
def test_reference_is_not_modified(lhp_setup, algo):
    base, pairs = lhp_setup
    reference = base.copy()
    before = [r for r in reference_logprobs(reference, pairs)]
    lhp_train(base, reference, pairs, TrainConfig.lhp(learning_rate=0.01, epochs=1, algo=algo))
    assert reference_logprobs(reference, pairs) == before


def test_lhp_empty():
    with pytest.raises(EmptyDataset):
        lhp_train(small_policy(), small_policy(), [], TrainConfig.lhp())


def test_lhp_deterministic(lhp_setup):
    base, pairs = lhp_setup
    cfg = TrainConfig.lhp(learning_rate=0.01, epochs=1, algo="kto", seed=4)
    a, _ = lhp_train(base, base, pairs, cfg)
    b, _ = lhp_train(base, base, pairs, cfg)
    assert a.to_bytes() == b.to_bytes()


@pytest.mark.parametrize("algo", ["dpo", "ipo", "kto"])
def test_parameter_gradient_check(lhp_setup, algo):
    base, pairs = lhp_setup
    reference = base.copy()
    rng = np.random.default_rng(1)
    policy = base.copy()
    for k in ("eval", "action", "substate"):
        policy.params[k] = rng.normal(scale=0.5, size=policy.params[k].shape)
    refs = reference_logprobs(reference, pairs[:16])
    assert param_grad_check(policy, pairs[:16], refs, algo, 0.1, n_params=20, eps=1e-4) <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    p = random_policy(3)
    save_policy(p, tmp_path / "p.ckpt")
    q = load_policy(tmp_path / "p.ckpt")
    assert q.vocab == p.vocab and q.n_buckets == p.n_buckets and q.hash_salt == p.hash_salt
    for k in p.params:
        assert np.array_equal(p.params[k], q.params[k])
    assert q.to_bytes() == p.to_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        ToyTutorPolicy.from_bytes(b"not a checkpoint")
    data = random_policy().to_bytes()
    with pytest.raises(ValueError):
        ToyTutorPolicy.from_bytes(data[:-8])


def test_create_prepends_reserved_tokens():
    p = ToyTutorPolicy.create(["zeta", EOS, "alpha"])
    assert p.vocab[:3] == (BOS, EOS, UNK)
    assert p.params["tokens"].shape == (3, 5, 5)


def test_conv_helper_contexts_score(corpus):
    # every fixture example scores to a finite negative log-prob
    p = random_policy()
    for ctx, a in pg.supervised_examples(corpus[:3] + [conv([1, 3])]):
        assert -np.inf < p.annotation_logprob(ctx, a) < 0
