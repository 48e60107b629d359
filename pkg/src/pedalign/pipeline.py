"""End-to-end run: split, SFT, rejected stream, pairs, LHP, evaluation.

Each stage writes one artifact under the output directory. With ``resume``
an existing artifact is loaded instead of recomputed.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

from . import metrics as M
from . import prefgen as pg
from .artifacts import read_json, read_jsonl, write_json, write_jsonl
from .losses import ALGOS, check_beta
from .optim import TrainConfig
from .policy import (
    ToyTutorPolicy,
    build_vocab,
    lhp_train,
    load_checkpoint_meta,
    load_policy,
    save_policy,
    sft_train,
)
from .schema import Conversation, conversation_to_dict, dataset_stats, load_conversations

log = logging.getLogger(__name__)

CONFIG_ENV = "PEDALIGN_CONFIG"
PAIR_SOURCES = ("divergence", "probes", "both")

ARTIFACTS = {
    "split": "split.json",
    "sft": "policy_sft.ckpt",
    "rejected": "rejected_stream.jsonl",
    "pairs": "pairs.jsonl",
    "probes": "probes.jsonl",
    "lhp": "policy_lhp.ckpt",
    "report": "report.json",
}
STAGES = ("split", "sft", "rejected", "pairs", "probes", "lhp", "report")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _train_config(raw: dict[str, Any] | None, factory: Callable[..., TrainConfig]) -> TrainConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown training options: {sorted(unknown)}")
    try:
        return factory(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class RunConfig:
    corpus: Path | None = None
    solutions: Path | None = None
    rejected_stream: Path | None = None
    noise: float = 0.3
    split: pg.SplitSpec = field(default_factory=pg.SplitSpec)
    sft: TrainConfig = field(default_factory=TrainConfig.sft)
    lhp: TrainConfig = field(default_factory=TrainConfig.lhp)
    pair_source: str = "divergence"
    betas: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.6, 0.9])
    algos: list[str] = field(default_factory=lambda: list(ALGOS))
    n_buckets: int = 64
    hash_salt: int = 0
    init_from_sft: bool = True
    round_cap: int = M.DEFAULT_ROUND_CAP
    strict: bool = True
    out: Path = Path("runs/default")

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: Path | None = None) -> "RunConfig":
        base_dir = base_dir or Path.cwd()
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def path(key):
            v = raw.get(key)
            return None if v is None else (base_dir / v)

        split = raw.get("split", {})
        cfg = cls(
            corpus=path("corpus"),
            solutions=path("solutions"),
            rejected_stream=path("rejected_stream"),
            noise=float(raw.get("noise", 0.3)),
            split=pg.SplitSpec(seed=int(split.get("seed", 0)), sizes=tuple(split.get("sizes", (600, 600, 450)))),
            sft=_train_config(raw.get("sft"), TrainConfig.sft),
            lhp=_train_config(raw.get("lhp"), TrainConfig.lhp),
            pair_source=raw.get("pair_source", "divergence"),
            betas=[float(b) for b in raw.get("betas", [0.1, 0.3, 0.6, 0.9])],
            algos=list(raw.get("algos", ALGOS)),
            n_buckets=int(raw.get("n_buckets", 64)),
            hash_salt=int(raw.get("hash_salt", 0)),
            init_from_sft=bool(raw.get("init_from_sft", True)),
            round_cap=int(raw.get("round_cap", M.DEFAULT_ROUND_CAP)),
            strict=bool(raw.get("strict", True)),
            out=path("out") or Path("runs/default"),
        )
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = read_json(path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    def check(self) -> None:
        if len(self.split.sizes) != 3:
            raise ConfigError("split.sizes needs three entries")
        if self.pair_source not in PAIR_SOURCES:
            raise ConfigError(f"pair_source must be one of {PAIR_SOURCES}")
        for algo in self.algos + [self.lhp.algo]:
            if algo not in ALGOS:
                raise ConfigError(f"unknown algorithm {algo!r}")
        if not self.betas:
            raise ConfigError("beta list must be nonempty")
        for b in self.betas + [self.lhp.beta]:
            check_beta(b)
        if self.pair_source != "divergence" and self.solutions is None:
            raise ConfigError("probe-derived pairs need a solution bank")

    def require_inputs(self) -> None:
        for name in ("corpus", "solutions", "rejected_stream"):
            p = getattr(self, name)
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{name} file not found: {p}")
        if self.corpus is None:
            raise ConfigError("config has no corpus path")


# -- stage helpers ------------------------------------------------------------


def load_solution_bank(path) -> dict[str, str]:
    bank = read_json(path)
    if not isinstance(bank, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in bank.items()):
        raise ValueError("solution bank must map subproblem text to answer text")
    return bank


def probes_for(convs: list[Conversation], bank: dict[str, str]) -> list[pg.PerplexityProbe]:
    return [p for c in convs for p in pg.build_misaligned_probes(c, bank)]


def training_vocab(convs: list[Conversation], bank: dict[str, str] | None) -> tuple[str, ...]:
    texts = [t.tutor.utterance for c in convs for t in c.turns]
    if bank is not None:
        texts += [p.misaligned.utterance for p in probes_for(convs, bank)]
    return build_vocab(texts)


def new_policy(cfg: RunConfig, train_convs: list[Conversation], bank: dict[str, str] | None) -> ToyTutorPolicy:
    return ToyTutorPolicy.create(training_vocab(train_convs, bank), cfg.n_buckets, cfg.hash_salt)


def evaluate(policy: ToyTutorPolicy, test: list[Conversation], probes: list[pg.PerplexityProbe], round_cap: int) -> dict[str, Any]:
    preds = M.predict_conversations(policy, test)
    out: dict[str, Any] = {
        "metrics": M.metrics_report(preds).to_dict(),
        "rounds": [{"round": t, "accuracy": a, "n": n} for t, a, n in M.multi_round_curve(preds, round_cap)],
    }
    if probes:
        out["ppl"] = M.ppl_gap_report(probes, policy).to_dict()
    return out


def rejected_stream_for(cfg: RunConfig, lhp_convs: list[Conversation]) -> list[Conversation]:
    if cfg.rejected_stream is None:
        return pg.noisy_stream(lhp_convs, cfg.noise, seed=cfg.split.seed)
    others, _ = load_conversations(cfg.rejected_stream, strict=cfg.strict)
    wanted = {c.id for c in lhp_convs}
    order = {c.id: i for i, c in enumerate(lhp_convs)}
    return sorted((c for c in others if c.id in wanted), key=lambda c: order[c.id])


def lhp_pairs(cfg: RunConfig, lhp_convs, rejected, bank) -> list[pg.PreferencePair]:
    pairs: list[pg.PreferencePair] = []
    if cfg.pair_source in ("divergence", "both"):
        pairs += pg.build_preference_pairs(lhp_convs, rejected)
    if cfg.pair_source in ("probes", "both"):
        pairs += pg.probes_to_pairs(probes_for(lhp_convs, bank))
    return pairs


# -- the run ----------------------------------------------------------------


@dataclass
class PipelineResult:
    out: Path
    written: list[Path]
    stopped_after: str | None = None


def run_pipeline(cfg: RunConfig, resume: bool = False, stop_after: str | None = None) -> PipelineResult:
    cfg.require_inputs()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    art = {k: out / v for k, v in ARTIFACTS.items()}

    def stage(name: str, fn: Callable[[], Any]) -> Any:
        try:
            return fn()
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage attached
            raise StageError(name, exc) from exc

    def done(name: str) -> bool:
        return resume and art[name].exists()

    convs, stats = stage("load", lambda: load_conversations(cfg.corpus, strict=cfg.strict))
    log.info("loaded %d conversations (%d skipped)", stats.parsed, stats.skipped)
    bank = stage("load", lambda: load_solution_bank(cfg.solutions)) if cfg.solutions else None

    # split
    def do_split():
        sft_c, lhp_c, test_c = pg.split_dataset(convs, cfg.split)
        write_json(art["split"], {
            "seed": cfg.split.seed,
            "sizes": list(cfg.split.sizes),
            "sft": [c.id for c in sft_c],
            "lhp": [c.id for c in lhp_c],
            "test": [c.id for c in test_c],
            "discarded": len(convs) - sum(cfg.split.sizes),
        })
        written.append(art["split"])
        return sft_c, lhp_c, test_c

    if done("split"):
        by_id = {c.id: c for c in convs}
        manifest = read_json(art["split"])
        sft_c, lhp_c, test_c = ([by_id[i] for i in manifest[k]] for k in ("sft", "lhp", "test"))
    else:
        sft_c, lhp_c, test_c = stage("split", do_split)
    if stop_after == "split":
        return PipelineResult(out, written, "split")

    # sft
    sft_curve: list[float] = []

    def do_sft():
        base = new_policy(cfg, sft_c + lhp_c, bank)
        pol, curve = sft_train(base, pg.supervised_examples(sft_c), cfg.sft)
        sft_curve.extend(curve)
        save_policy(pol, art["sft"], {"loss_curve": curve})
        written.append(art["sft"])
        return pol

    if done("sft"):
        sft_policy = load_policy(art["sft"])
        sft_curve.extend(load_checkpoint_meta(art["sft"]).get("loss_curve", []))
    else:
        sft_policy = stage("sft", do_sft)
    if stop_after == "sft":
        return PipelineResult(out, written, "sft")
    if cfg.split.sizes[1] == 0:
        log.warning("no LHP conversations configured (n_lhp=0); stopping after SFT")
        return PipelineResult(out, written, "sft")

    # rejected stream
    def do_rejected():
        rejected = rejected_stream_for(cfg, lhp_c)
        write_jsonl(art["rejected"], (conversation_to_dict(c) for c in rejected))
        written.append(art["rejected"])
        return rejected

    if done("rejected"):
        rejected, _ = load_conversations(art["rejected"])
    else:
        rejected = stage("rejected", do_rejected)

    # pairs
    def do_pairs():
        pairs = lhp_pairs(cfg, lhp_c, rejected, bank)
        write_jsonl(art["pairs"], (pg.pair_to_dict(p) for p in pairs))
        written.append(art["pairs"])
        return pairs

    if done("pairs"):
        pairs = [pg.pair_from_dict(d) for d in read_jsonl(art["pairs"])]
    else:
        pairs = stage("pairs", do_pairs)
    log.info("%d preference pairs", len(pairs))

    # evaluation probes
    def do_probes():
        probes = probes_for(test_c, bank) if bank is not None else []
        write_jsonl(art["probes"], (pg.probe_to_dict(p) for p in probes))
        written.append(art["probes"])
        return probes

    if done("probes"):
        probes = [pg.probe_from_dict(d) for d in read_jsonl(art["probes"])]
    else:
        probes = stage("probes", do_probes)

    # lhp
    margin_curve: list[float] = []

    def do_lhp():
        start = sft_policy if cfg.init_from_sft else new_policy(cfg, sft_c + lhp_c, bank)
        pol, curve = lhp_train(start, sft_policy, pairs, cfg.lhp)
        margin_curve.extend(curve)
        save_policy(pol, art["lhp"], {"margin_curve": curve})
        written.append(art["lhp"])
        return pol

    if done("lhp"):
        lhp_policy = load_policy(art["lhp"])
        margin_curve.extend(load_checkpoint_meta(art["lhp"]).get("margin_curve", []))
    else:
        lhp_policy = stage("lhp", do_lhp)
    if stop_after == "lhp":
        return PipelineResult(out, written, "lhp")

    # report
    def do_report():
        report = {
            "dataset": asdict(dataset_stats(convs)),
            "split": {"sft": len(sft_c), "lhp": len(lhp_c), "test": len(test_c)},
            "n_pairs": len(pairs),
            "n_probes": len(probes),
            "pair_source": cfg.pair_source,
            "algo": cfg.lhp.algo,
            "beta": cfg.lhp.beta,
            "sft_loss_curve": sft_curve,
            "lhp_margin_curve": margin_curve,
            "sft": evaluate(sft_policy, test_c, probes, cfg.round_cap),
            "lhp": evaluate(lhp_policy, test_c, probes, cfg.round_cap),
        }
        write_json(art["report"], report)
        written.append(art["report"])
        return report

    stage("report", do_report)
    return PipelineResult(out, written)


@dataclass(frozen=True)
class SweepRow:
    algo: str
    beta: float
    accuracy: float
    f1: float


def sweep_beta(cfg: RunConfig, betas: list[float], algos: list[str]) -> list[SweepRow]:
    """Train each (algo, beta) from one shared SFT checkpoint; score on the test split."""
    if not betas:
        raise ConfigError("beta list must be nonempty")
    for b in betas:
        check_beta(b)
    for a in algos:
        if a not in ALGOS:
            raise ConfigError(f"unknown algorithm {a!r}")
    cfg.require_inputs()
    convs, _ = load_conversations(cfg.corpus, strict=cfg.strict)
    bank = load_solution_bank(cfg.solutions) if cfg.solutions else None
    sft_c, lhp_c, test_c = pg.split_dataset(convs, cfg.split)
    base = new_policy(cfg, sft_c + lhp_c, bank)
    sft_policy, _ = sft_train(base, pg.supervised_examples(sft_c), cfg.sft)
    pairs = lhp_pairs(cfg, lhp_c, rejected_stream_for(cfg, lhp_c), bank)
    rows = []
    for algo in sorted(set(algos)):
        for beta in sorted(set(betas)):
            lcfg = TrainConfig(**{**asdict(cfg.lhp), "algo": algo, "beta": beta})
            start = sft_policy if cfg.init_from_sft else base
            pol, _ = lhp_train(start, sft_policy, pairs, lcfg)
            report = M.metrics_report(M.predict_conversations(pol, test_c))
            log.info("sweep %s beta=%g: acc %.4f f1 %.4f", algo, beta, report.accuracy_mean, report.f1_mean)
            rows.append(SweepRow(algo, beta, report.accuracy_mean, report.f1_mean))
    return rows


def default_config_path() -> str | None:
    return os.environ.get(CONFIG_ENV)
