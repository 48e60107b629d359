"""DPO, IPO and KTO objectives with analytic gradients.

All inputs are sequence log-probabilities. Gradients are taken only with
respect to the policy log-probs; the reference model is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Sequence, Union

import numpy as np

Algo = Literal["dpo", "ipo", "kto"]
ALGOS: tuple[str, ...] = ("dpo", "ipo", "kto")


class EmptyBatch(ValueError):
    pass


class InvalidBeta(ValueError):
    pass


@dataclass(frozen=True)
class QuadLogProbs:
    lp_policy_chosen: float
    lp_ref_chosen: float
    lp_policy_rejected: float
    lp_ref_rejected: float

    def __post_init__(self):
        for v in (self.lp_policy_chosen, self.lp_ref_chosen, self.lp_policy_rejected, self.lp_ref_rejected):
            if not math.isfinite(v):
                raise ValueError("log-probabilities must be finite")


@dataclass(frozen=True)
class KtoExample:
    lp_policy: float
    lp_ref: float
    desirable: bool

    def __post_init__(self):
        if not (math.isfinite(self.lp_policy) and math.isfinite(self.lp_ref)):
            raise ValueError("log-probabilities must be finite")

    @property
    def log_ratio(self) -> float:
        return self.lp_policy - self.lp_ref


@dataclass(frozen=True)
class LossResult:
    loss: float
    grad: np.ndarray


@dataclass(frozen=True)
class BatchResult:
    mean_loss: float
    grads: np.ndarray  # (n, 2) for dpo/ipo, (n, 1) for kto
    margin_mean: float
    margin_min: float
    margin_max: float


def check_beta(beta: float) -> float:
    if not (beta > 0 and math.isfinite(beta)):
        raise InvalidBeta(f"beta must be a positive finite number, got {beta!r}")
    return float(beta)


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def softplus(z: float) -> float:
    """log(1 + e^z) without overflow."""
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


def dpo_margin(q: QuadLogProbs, beta: float) -> float:
    return beta * ((q.lp_policy_chosen - q.lp_ref_chosen) - (q.lp_policy_rejected - q.lp_ref_rejected))


def ipo_margin(q: QuadLogProbs) -> float:
    return (q.lp_policy_chosen - q.lp_ref_chosen) - (q.lp_policy_rejected - q.lp_ref_rejected)


def dpo_loss(q: QuadLogProbs, beta: float) -> LossResult:
    """-log sigmoid(W - L), W and L being the beta-scaled log-ratios."""
    beta = check_beta(beta)
    w = beta * (q.lp_policy_chosen - q.lp_ref_chosen)
    l = beta * (q.lp_policy_rejected - q.lp_ref_rejected)
    g = beta * sigmoid(l - w)
    return LossResult(softplus(l - w), np.array([-g, g]))


def ipo_loss(q: QuadLogProbs, beta: float) -> LossResult:
    """Squared distance of the log-ratio margin from 1/(2 beta)."""
    beta = check_beta(beta)
    resid = ipo_margin(q) - 1.0 / (2.0 * beta)
    return LossResult(resid * resid, np.array([2.0 * resid, -2.0 * resid]))


def kto_loss(
    ex: KtoExample,
    beta: float,
    ref_point: float = 0.0,
    lambda_d: float = 1.0,
    lambda_u: float = 1.0,
) -> LossResult:
    beta = check_beta(beta)
    if not (lambda_d > 0 and lambda_u > 0):
        raise ValueError("lambda_d and lambda_u must be positive")
    r = ex.log_ratio
    if ex.desirable:
        s = sigmoid(beta * (r - ref_point))
        # 1 - s written as sigmoid(-z) to keep precision when s is near 1
        loss = lambda_d * sigmoid(-beta * (r - ref_point))
        grad = -lambda_d * beta * s * (1.0 - s)
    else:
        s = sigmoid(beta * (ref_point - r))
        loss = lambda_u * sigmoid(-beta * (ref_point - r))
        grad = lambda_u * beta * s * (1.0 - s)
    return LossResult(loss, np.array([grad]))


def kto_ref_points(examples: Sequence[KtoExample]) -> np.ndarray:
    """Leave-one-out batch mean of the log-ratio, clipped at zero."""
    n = len(examples)
    if n == 1:
        return np.zeros(1)
    r = np.array([e.log_ratio for e in examples])
    total = math.fsum(r)
    return np.maximum(0.0, (total - r) / (n - 1))


def split_pairs_for_kto(quads: Sequence[QuadLogProbs]) -> list[KtoExample]:
    """Chosen responses become desirable singletons, rejected ones undesirable."""
    out = []
    for q in quads:
        out.append(KtoExample(q.lp_policy_chosen, q.lp_ref_chosen, True))
        out.append(KtoExample(q.lp_policy_rejected, q.lp_ref_rejected, False))
    return out


Batch = Union[Sequence[QuadLogProbs], Sequence[KtoExample]]


def batch_objective(
    batch: Batch,
    algo: Algo,
    beta: float,
    lambda_d: float = 1.0,
    lambda_u: float = 1.0,
    ref_points: np.ndarray | None = None,
) -> BatchResult:
    """Mean loss over a batch with per-example gradients scaled by 1/n.

    For KTO the reference points are treated as constants; pass ``ref_points``
    to pin them (otherwise they are estimated from the batch).
    """
    if len(batch) == 0:
        raise EmptyBatch("batch must contain at least one example")
    beta = check_beta(beta)
    n = len(batch)
    if algo == "dpo":
        results = [dpo_loss(q, beta) for q in batch]
        margins = [dpo_margin(q, beta) for q in batch]
    elif algo == "ipo":
        results = [ipo_loss(q, beta) for q in batch]
        margins = [ipo_margin(q) for q in batch]
    elif algo == "kto":
        if ref_points is None:
            ref_points = kto_ref_points(batch)
        results = [
            kto_loss(ex, beta, float(z), lambda_d, lambda_u) for ex, z in zip(batch, ref_points)
        ]
        margins = [ex.log_ratio for ex in batch]
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    grads = np.stack([r.grad for r in results]) / n
    return BatchResult(
        mean_loss=math.fsum(r.loss for r in results) / n,
        grads=grads,
        margin_mean=math.fsum(margins) / n,
        margin_min=min(margins),
        margin_max=max(margins),
    )


def loss_report(algo: str, beta: float, result: BatchResult) -> dict:
    return {
        "algo": algo,
        "beta": beta,
        "mean_loss": result.mean_loss,
        "margin_mean": result.margin_mean,
        "margin_min": result.margin_min,
        "margin_max": result.margin_max,
    }


def grad_check(
    algo: Algo,
    point: QuadLogProbs | KtoExample,
    beta: float,
    eps: float = 1e-5,
    ref_point: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if algo == "kto":
        assert isinstance(point, KtoExample)
        f = lambda p: kto_loss(p, beta, ref_point).loss  # noqa: E731
        analytic = kto_loss(point, beta, ref_point).grad
        coords = ["lp_policy"]
    else:
        assert isinstance(point, QuadLogProbs)
        fn = dpo_loss if algo == "dpo" else ipo_loss
        f = lambda p: fn(p, beta).loss  # noqa: E731
        analytic = fn(point, beta).grad
        coords = ["lp_policy_chosen", "lp_policy_rejected"]
    worst = 0.0
    for a, name in zip(analytic, coords):
        x = getattr(point, name)
        numeric = (f(replace(point, **{name: x + eps})) - f(replace(point, **{name: x - eps}))) / (2 * eps)
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
