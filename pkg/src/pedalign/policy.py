"""A small trainable tutor policy with exact log-probabilities.

The policy factorizes a tutor annotation into three classification heads
(evaluation, action, subproblem state) indexed by a hashed context bucket,
and an action-group-conditioned bigram model over the utterance tokens.
Everything is plain numpy with hand-derived gradients.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import losses
from .artifacts import atomic_write_bytes
from .optim import OptimizerState, TrainConfig, optimizer_step
from .prefgen import Context, PreferencePair
from .schema import ACTION_CODES, EVAL_CODES, SUBSTATE_CODES, TutorAnnotation

log = logging.getLogger(__name__)

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
RESERVED = (BOS, EOS, UNK)
MAX_DECODE_TOKENS = 64
CHECKPOINT_MAGIC = b"PEDALIGN-POLICY\n"
CHECKPOINT_VERSION = 1

GUIDANCE, DIRECT, OTHER = 0, 1, 2
N_GROUPS = 3

HEADS = (("eval", EVAL_CODES), ("action", ACTION_CODES), ("substate", SUBSTATE_CODES))


class EmptyDataset(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def action_group(action: int) -> int:
    if action in (1, 4):
        return GUIDANCE
    if action in (2, 5):
        return DIRECT
    return OTHER


def build_vocab(texts: Iterable[str], min_freq: int = 1) -> tuple[str, ...]:
    counts = Counter(tok for text in texts for tok in tokenize(text))
    words = sorted(w for w, c in counts.items() if c >= min_freq and w not in RESERVED)
    return RESERVED + tuple(words)


def featurize_context(ctx: Context, n_buckets: int, salt: int = 0) -> int:
    """Hash of the last student utterance tokens and the last tutor action."""
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    last_action = ctx.tutor_annotations[-1].action if ctx.tutor_annotations else 0
    key = "\x1f".join(tokenize(ctx.student_utterances[-1])) + f"\x1e{last_action}"
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8, salt=salt.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % n_buckets


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


@dataclass
class ToyTutorPolicy:
    vocab: tuple[str, ...]
    n_buckets: int
    params: dict[str, np.ndarray]
    hash_salt: int = 0

    @classmethod
    def create(cls, vocab: Sequence[str], n_buckets: int = 64, hash_salt: int = 0) -> "ToyTutorPolicy":
        vocab = tuple(vocab)
        if vocab[: len(RESERVED)] != RESERVED:
            vocab = RESERVED + tuple(w for w in vocab if w not in RESERVED)
        v = len(vocab)
        params = {name: np.zeros((n_buckets, len(codes))) for name, codes in HEADS}
        params["tokens"] = np.zeros((N_GROUPS, v, v))
        return cls(vocab, n_buckets, params, hash_salt)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.vocab)}

    def copy(self) -> "ToyTutorPolicy":
        return ToyTutorPolicy(self.vocab, self.n_buckets, {k: p.copy() for k, p in self.params.items()}, self.hash_salt)

    # -- scoring ---------------------------------------------------------

    def bucket(self, ctx: Context) -> int:
        return featurize_context(ctx, self.n_buckets, self.hash_salt)

    def token_ids(self, utterance: str) -> list[int]:
        unk = self._index[UNK]
        return [self._index[BOS]] + [self._index.get(t, unk) for t in tokenize(utterance)] + [self._index[EOS]]

    def classification_logprob(self, ctx: Context, ann: TutorAnnotation) -> float:
        b = self.bucket(ctx)
        total = 0.0
        for name, codes in HEADS:
            total += log_softmax(self.params[name][b])[codes.index(getattr(ann, name))]
        return float(total)

    def token_logprobs(self, ann: TutorAnnotation) -> np.ndarray:
        """Per-token log-probs of the utterance, end-of-sequence included."""
        ids = self.token_ids(ann.utterance)
        rows = self.params["tokens"][action_group(ann.action)]
        prev, nxt = np.array(ids[:-1]), np.array(ids[1:])
        return log_softmax(rows[prev])[np.arange(len(nxt)), nxt]

    def annotation_logprob(self, ctx: Context, ann: TutorAnnotation) -> float:
        return self.classification_logprob(ctx, ann) + float(self.token_logprobs(ann).sum())

    def accumulate_grad(self, grads: dict[str, np.ndarray], ctx: Context, ann: TutorAnnotation, weight: float) -> None:
        """grads += weight * d annotation_logprob / d params."""
        if weight == 0.0:
            return
        b = self.bucket(ctx)
        for name, codes in HEADS:
            g = -softmax(self.params[name][b])
            g[codes.index(getattr(ann, name))] += 1.0
            grads[name][b] += weight * g
        ids = self.token_ids(ann.utterance)
        group = action_group(ann.action)
        rows = self.params["tokens"][group]
        prev, nxt = np.array(ids[:-1]), np.array(ids[1:])
        g = -softmax(rows[prev])
        g[np.arange(len(nxt)), nxt] += 1.0
        np.add.at(grads["tokens"][group], prev, weight * g)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    # -- decoding --------------------------------------------------------

    def annotate(self, ctx: Context) -> TutorAnnotation:
        """Argmax of each head (ties to the lowest code) plus a greedy utterance."""
        b = self.bucket(ctx)
        codes = {name: options[int(np.argmax(self.params[name][b]))] for name, options in HEADS}
        rows = self.params["tokens"][action_group(codes["action"])]
        bos, eos, unk = self._index[BOS], self._index[EOS], self._index[UNK]
        out: list[str] = []
        prev = bos
        for _ in range(MAX_DECODE_TOKENS):
            scores = rows[prev].copy()
            scores[bos] = scores[unk] = -np.inf
            if not out:
                scores[eos] = -np.inf
            nxt = int(np.argmax(scores))
            if nxt == eos or scores[nxt] == -np.inf:
                break
            out.append(self.vocab[nxt])
            prev = nxt
        subproblem = ctx.tutor_annotations[-1].subproblem if ctx.tutor_annotations else ""
        return TutorAnnotation(codes["eval"], codes["action"], codes["substate"], subproblem, " ".join(out))

    # -- persistence -----------------------------------------------------

    def to_bytes(self, meta: dict | None = None) -> bytes:
        """Serialize; ``meta`` is free-form JSON kept in the header (e.g. a training curve)."""
        names = sorted(self.params)
        header = {
            "meta": meta or {},
            "version": CHECKPOINT_VERSION,
            "vocab": list(self.vocab),
            "n_buckets": self.n_buckets,
            "hash_salt": self.hash_salt,
            "arrays": [[n, list(self.params[n].shape)] for n in names],
        }
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8") + b"\n")
        for n in names:
            buf.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())
        return buf.getvalue()

    @staticmethod
    def read_header(data: bytes) -> tuple[dict, bytes]:
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a policy checkpoint")
        header_line, _, payload = data[len(CHECKPOINT_MAGIC):].partition(b"\n")
        header = json.loads(header_line)
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        return header, payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "ToyTutorPolicy":
        header, payload = cls.read_header(data)
        params, offset = {}, 0
        for name, shape in header["arrays"]:
            size = int(np.prod(shape)) * 8
            params[name] = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(shape).astype(np.float64)
            offset += size
        if offset != len(payload):
            raise ValueError("checkpoint payload size does not match header")
        return cls(tuple(header["vocab"]), header["n_buckets"], params, header["hash_salt"])


def annotation_logprob(policy: ToyTutorPolicy, ctx: Context, ann: TutorAnnotation) -> float:
    return policy.annotation_logprob(ctx, ann)


def annotate(policy: ToyTutorPolicy, ctx: Context) -> TutorAnnotation:
    return policy.annotate(ctx)


# -- training -------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _n_steps(n: int, cfg: TrainConfig) -> int:
    return cfg.epochs * -(-n // cfg.batch_size)


def sft_train(
    policy: ToyTutorPolicy, data: Sequence[tuple[Context, TutorAnnotation]], cfg: TrainConfig
) -> tuple[ToyTutorPolicy, list[float]]:
    """Minimize mean negative log-likelihood of the gold annotations.

    Returns a trained copy and the per-epoch mean training loss.
    """
    if not data:
        raise EmptyDataset("SFT needs at least one example")
    policy = policy.copy()
    state = OptimizerState.for_params(policy.params)
    rng = np.random.default_rng(cfg.seed)
    total, step, curve = _n_steps(len(data), cfg), 0, []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for idx in _batches(len(data), cfg.batch_size, rng):
            grads = policy.zero_grads()
            for i in idx:
                ctx, ann = data[i]
                epoch_losses.append(-policy.annotation_logprob(ctx, ann))
                # descent direction on the NLL is the negative log-prob gradient
                policy.accumulate_grad(grads, ctx, ann, -1.0 / len(idx))
            optimizer_step(policy.params, grads, state, cfg, step / total)
            step += 1
        curve.append(float(np.mean(epoch_losses)))
        log.info("sft epoch %d: loss %.4f", epoch + 1, curve[-1])
    return policy, curve


@dataclass(frozen=True)
class RefLogProbs:
    chosen: float
    rejected: float


def reference_logprobs(reference: ToyTutorPolicy, pairs: Sequence[PreferencePair]) -> list[RefLogProbs]:
    return [
        RefLogProbs(reference.annotation_logprob(p.context, p.chosen), reference.annotation_logprob(p.context, p.rejected))
        for p in pairs
    ]


def lhp_objective(
    policy: ToyTutorPolicy,
    pairs: Sequence[PreferencePair],
    refs: Sequence[RefLogProbs],
    algo: str,
    beta: float,
    lambda_d: float = 1.0,
    lambda_u: float = 1.0,
    kto_ref_points: np.ndarray | None = None,
    with_grad: bool = True,
) -> tuple[losses.BatchResult, dict[str, np.ndarray] | None]:
    """Batch preference objective and its gradient w.r.t. every policy parameter."""
    quads = [
        losses.QuadLogProbs(
            policy.annotation_logprob(p.context, p.chosen), r.chosen,
            policy.annotation_logprob(p.context, p.rejected), r.rejected,
        )
        for p, r in zip(pairs, refs)
    ]
    if algo == "kto":
        singles = losses.split_pairs_for_kto(quads)
        result = losses.batch_objective(singles, "kto", beta, lambda_d, lambda_u, ref_points=kto_ref_points)
        # singles alternate chosen, rejected
        weights = result.grads[:, 0].reshape(-1, 2)
    else:
        result = losses.batch_objective(quads, algo, beta)
        weights = result.grads
    if not with_grad:
        return result, None
    grads = policy.zero_grads()
    for p, (wc, wr) in zip(pairs, weights):
        policy.accumulate_grad(grads, p.context, p.chosen, float(wc))
        policy.accumulate_grad(grads, p.context, p.rejected, float(wr))
    return result, grads


def param_grad_check(
    policy: ToyTutorPolicy,
    pairs: Sequence[PreferencePair],
    refs: Sequence[RefLogProbs],
    algo: str,
    beta: float,
    n_params: int = 20,
    eps: float = 1e-4,
    seed: int = 0,
) -> float:
    """Central-difference check of ``lhp_objective`` on sampled parameters.

    Parameters are drawn from those with a nonzero analytic gradient, since
    the rest are trivially correct. KTO reference points are pinned at their
    value for the unperturbed policy. Returns the max of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    pinned = None
    if algo == "kto":
        quads = [
            losses.QuadLogProbs(policy.annotation_logprob(p.context, p.chosen), r.chosen,
                                policy.annotation_logprob(p.context, p.rejected), r.rejected)
            for p, r in zip(pairs, refs)
        ]
        pinned = losses.kto_ref_points(losses.split_pairs_for_kto(quads))
    _, grads = lhp_objective(policy, pairs, refs, algo, beta, kto_ref_points=pinned)
    candidates = [(k, idx) for k in sorted(grads) for idx in zip(*np.nonzero(grads[k]))]
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_params, len(candidates)), replace=False)
    probe = policy.copy()
    worst = 0.0
    for i in sorted(picks):
        name, idx = candidates[i]
        x = probe.params[name][idx]
        values = []
        for delta in (eps, -eps):
            probe.params[name][idx] = x + delta
            res, _ = lhp_objective(probe, pairs, refs, algo, beta, kto_ref_points=pinned, with_grad=False)
            values.append(res.mean_loss)
        probe.params[name][idx] = x
        numeric = (values[0] - values[1]) / (2 * eps)
        a = grads[name][idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return float(worst)


def mean_margin(
    policy: ToyTutorPolicy, pairs: Sequence[PreferencePair], refs: Sequence[RefLogProbs], algo: str, beta: float
) -> float:
    result, _ = lhp_objective(policy, pairs, refs, algo, beta, with_grad=False)
    return result.margin_mean


def lhp_train(
    policy: ToyTutorPolicy,
    reference: ToyTutorPolicy,
    pairs: Sequence[PreferencePair],
    cfg: TrainConfig,
) -> tuple[ToyTutorPolicy, list[float]]:
    """Preference training against a frozen reference.

    Returns a trained copy and the mean margin over all pairs after each
    epoch (beta-scaled log-ratio gap for DPO, raw gap for IPO, log-ratio for
    KTO singletons).
    """
    if not pairs:
        raise EmptyDataset("preference training needs at least one pair")
    policy = policy.copy()
    refs = reference_logprobs(reference, pairs)
    state = OptimizerState.for_params(policy.params)
    rng = np.random.default_rng(cfg.seed)
    total, step, curve = _n_steps(len(pairs), cfg), 0, []
    for epoch in range(cfg.epochs):
        for idx in _batches(len(pairs), cfg.batch_size, rng):
            batch = [pairs[i] for i in idx]
            _, grads = lhp_objective(
                policy, batch, [refs[i] for i in idx], cfg.algo, cfg.beta, cfg.lambda_d, cfg.lambda_u
            )
            optimizer_step(policy.params, grads, state, cfg, step / total)
            step += 1
        curve.append(mean_margin(policy, pairs, refs, cfg.algo, cfg.beta))
        log.info("%s epoch %d: mean margin %.4f", cfg.algo, epoch + 1, curve[-1])
    return policy, curve


def save_policy(policy: ToyTutorPolicy, path, meta: dict | None = None) -> None:
    atomic_write_bytes(path, policy.to_bytes(meta))


def load_policy(path) -> ToyTutorPolicy:
    with open(path, "rb") as fh:
        return ToyTutorPolicy.from_bytes(fh.read())


def load_checkpoint_meta(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = ToyTutorPolicy.read_header(fh.read())
    return header.get("meta", {})
