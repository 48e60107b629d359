"""Command-line entry point.

Exit codes: 0 success, 1 domain violation (invalid data), 2 I/O or
configuration error. Logs go to stderr; artifacts go to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import metrics as M
from . import prefgen as pg
from .artifacts import read_jsonl, write_json, write_jsonl
from .losses import ALGOS, InvalidBeta
from .optim import TrainConfig
from .pipeline import (
    STAGES,
    ConfigError,
    RunConfig,
    StageError,
    default_config_path,
    load_solution_bank,
    probes_for,
    run_pipeline,
    sweep_beta,
    training_vocab,
)
from .policy import ToyTutorPolicy, lhp_train, load_policy, save_policy, sft_train
from .schema import SchemaError, conversation_to_dict, load_conversations, validate_action_ordering

log = logging.getLogger("pedalign")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2


# -- helpers -----------------------------------------------------------------


def _config(args) -> RunConfig:
    path = args.config or default_config_path()
    cfg = RunConfig.load(path) if path else RunConfig()
    if args.strict is not None:
        cfg.strict = args.strict
    if args.seed is not None:
        cfg.split = replace(cfg.split, seed=args.seed)
        cfg.sft = replace(cfg.sft, seed=args.seed)
        cfg.lhp = replace(cfg.lhp, seed=args.seed)
    if getattr(args, "algo", None):
        cfg.lhp = replace(cfg.lhp, algo=args.algo)
    if getattr(args, "beta", None) is not None:
        cfg.lhp = replace(cfg.lhp, beta=args.beta)
    cfg.check()
    return cfg


def _train_overrides(base: TrainConfig, args) -> TrainConfig:
    changes = {}
    for name in ("learning_rate", "epochs", "batch_size", "weight_decay", "warmup_ratio"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    return replace(base, **changes)


def _load(path, cfg: RunConfig):
    convs, stats = load_conversations(path, strict=cfg.strict)
    for line_no, err in stats.errors:
        log.warning("%s:%d skipped: %s", path, line_no, err)
    return convs


def _emit(record, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(json.dumps(record, sort_keys=True, indent=2, ensure_ascii=False) + "\n")
    else:
        write_json(out, record)
        log.info("wrote %s", out)


# -- commands ------------------------------------------------------------------


def cmd_validate(args) -> int:
    cfg = _config(args)
    try:
        convs, stats = load_conversations(args.corpus, strict=cfg.strict)
    except SchemaError as exc:
        print(f"parse error: {exc}")
        return EXIT_DOMAIN
    for line_no, err in stats.errors:
        print(f"line {line_no}: skipped malformed record: {err}")
    n_violations = 0
    for conv in convs:
        report = validate_action_ordering(conv)
        for v in report.violations:
            print(f"{conv.id} turn {v.turn}: {v.rule}: {v.message}")
        n_violations += len(report.violations)
    print(f"{len(convs)} conversations, {stats.skipped} skipped, {n_violations} violations")
    return EXIT_OK if n_violations == 0 else EXIT_DOMAIN


def cmd_split(args) -> int:
    cfg = _config(args)
    spec = cfg.split if args.sizes is None else replace(cfg.split, sizes=tuple(args.sizes))
    convs = _load(args.corpus, cfg)
    parts = pg.split_dataset(convs, spec)
    out = Path(args.out or "splits")
    for name, part in zip(("sft", "lhp", "test"), parts):
        write_jsonl(out / f"{name}.jsonl", (conversation_to_dict(c) for c in part))
    write_json(out / "split.json", {
        "seed": spec.seed,
        "sizes": list(spec.sizes),
        **{name: [c.id for c in part] for name, part in zip(("sft", "lhp", "test"), parts)},
        "discarded": len(convs) - sum(spec.sizes),
    })
    log.info("split %d conversations into %s (%d discarded)", len(convs), list(spec.sizes), len(convs) - sum(spec.sizes))
    return EXIT_OK


def cmd_build_pairs(args) -> int:
    cfg = _config(args)
    tutor = _load(args.tutor, cfg)
    pairs: list[pg.PreferencePair] = []
    if args.source in ("divergence", "both"):
        if args.rejected:
            rejected = _load(args.rejected, cfg)
        else:
            rejected = pg.noisy_stream(tutor, args.noise, seed=cfg.split.seed)
        pairs += pg.build_preference_pairs(tutor, rejected)
    if args.source in ("probes", "both"):
        if not args.solutions:
            raise ConfigError("--solutions is required for probe-derived pairs")
        pairs += pg.probes_to_pairs(probes_for(tutor, load_solution_bank(args.solutions)))
    n = write_jsonl(args.out or "pairs.jsonl", (pg.pair_to_dict(p) for p in pairs))
    log.info("wrote %d pairs", n)
    return EXIT_OK


def cmd_build_probes(args) -> int:
    cfg = _config(args)
    corpus = Path(args.corpus)
    if args.split:
        corpus = corpus / f"{args.split}.jsonl"
    convs = _load(corpus, cfg)
    probes = probes_for(convs, load_solution_bank(args.solutions))
    n = write_jsonl(args.out or "probes.jsonl", (pg.probe_to_dict(p) for p in probes))
    log.info("wrote %d probes", n)
    return EXIT_OK


def cmd_sft_train(args) -> int:
    cfg = _config(args)
    convs = _load(args.corpus, cfg)
    vocab_convs = convs + (_load(args.vocab_corpus, cfg) if args.vocab_corpus else [])
    bank = load_solution_bank(args.solutions) if args.solutions else None
    policy = ToyTutorPolicy.create(training_vocab(vocab_convs, bank), cfg.n_buckets, cfg.hash_salt)
    policy, curve = sft_train(policy, pg.supervised_examples(convs), _train_overrides(cfg.sft, args))
    out = Path(args.out or "policy_sft.ckpt")
    save_policy(policy, out)
    write_json(out.with_suffix(".curve.json"), {"loss": curve})
    log.info("saved %s", out)
    return EXIT_OK


def cmd_lhp_train(args) -> int:
    cfg = _config(args)
    pairs = [pg.pair_from_dict(d) for d in read_jsonl(args.pairs)]
    start = load_policy(args.init)
    reference = load_policy(args.reference) if args.reference else start
    lcfg = _train_overrides(cfg.lhp, args)
    policy, curve = lhp_train(start, reference, pairs, lcfg)
    out = Path(args.out or "policy_lhp.ckpt")
    save_policy(policy, out)
    write_json(out.with_suffix(".curve.json"), {"algo": lcfg.algo, "beta": lcfg.beta, "margin": curve})
    log.info("saved %s", out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.predictions:
        preds = [M.prediction_from_dict(d) for d in read_jsonl(args.predictions)]
    else:
        if not (args.checkpoint and args.corpus):
            raise ConfigError("eval needs --predictions, or --checkpoint with a corpus")
        preds = M.predict_conversations(load_policy(args.checkpoint), _load(args.corpus, cfg))
        if args.write_predictions:
            write_jsonl(args.write_predictions, (M.prediction_to_dict(p) for p in preds))
    report = M.metrics_report(preds)
    curve = M.multi_round_curve(preds, cfg.round_cap)
    print(M.render_report(report, curve), file=sys.stderr)
    record = report.to_dict()
    record["rounds"] = [{"round": t, "accuracy": a, "n": n} for t, a, n in curve]
    _emit(record, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_ppl(args) -> int:
    probes = [pg.probe_from_dict(d) for d in read_jsonl(args.probes)]
    table = M.ppl_gap_report(probes, load_policy(args.checkpoint))
    print(M.render_ppl_table(table), file=sys.stderr)
    _emit(table.to_dict(), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_sweep_beta(args) -> int:
    cfg = _config(args)
    betas = args.betas if args.betas else cfg.betas
    algos = args.algos if args.algos else cfg.algos
    rows = sweep_beta(cfg, betas, algos)
    print(f"{'algo':<5} {'beta':>5} {'acc':>7} {'f1':>7}", file=sys.stderr)
    for r in rows:
        print(f"{r.algo:<5} {r.beta:>5g} {r.accuracy:7.4f} {r.f1:7.4f}", file=sys.stderr)
    _emit({"rows": [asdict(r) for r in rows]}, Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg.out = Path(args.out)
    result = run_pipeline(cfg, resume=args.resume, stop_after=args.stop_after)
    for p in result.written:
        log.info("wrote %s", p)
    if result.stopped_after:
        log.warning("pipeline stopped after stage %r", result.stopped_after)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, algo: bool = False) -> None:
    p.add_argument("--config", help="JSON run config (default: $PEDALIGN_CONFIG)")
    p.add_argument("--seed", type=int)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--strict", dest="strict", action="store_true", default=None)
    g.add_argument("--lenient", dest="strict", action="store_false")
    p.add_argument("--out")
    if algo:
        p.add_argument("--algo", choices=ALGOS)
        p.add_argument("--beta", type=float)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-ratio", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedalign", description="Pedagogical preference alignment toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse a corpus and check action ordering")
    p.add_argument("corpus")
    _common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="seeded sft/lhp/test partition")
    p.add_argument("corpus")
    p.add_argument("--sizes", type=int, nargs=3, metavar=("N_SFT", "N_LHP", "N_TEST"))
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("build-pairs", help="preference pairs from divergent tutor turns")
    p.add_argument("--tutor", required=True, help="reference tutor stream (chosen side)")
    p.add_argument("--rejected", help="second tutor stream; default: noisy copy of --tutor")
    p.add_argument("--noise", type=float, default=0.3, help="per-field flip probability of the noisy copy")
    p.add_argument("--source", choices=("divergence", "probes", "both"), default="divergence")
    p.add_argument("--solutions", help="subproblem -> answer JSON (for probe-derived pairs)")
    _common(p)
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("build-probes", help="aligned vs misaligned perplexity probes")
    p.add_argument("corpus", help="corpus file, or split directory with --split")
    p.add_argument("--solutions", required=True)
    p.add_argument("--split", choices=("sft", "lhp", "test"))
    _common(p)
    p.set_defaults(func=cmd_build_probes)

    p = sub.add_parser("sft-train", help="supervised training of the toy policy")
    p.add_argument("corpus")
    p.add_argument("--vocab-corpus", help="extra conversations whose utterances join the vocabulary")
    p.add_argument("--solutions", help="add misaligned probe utterances to the vocabulary")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_sft_train)

    p = sub.add_parser("lhp-train", help="DPO/IPO/KTO training on preference pairs")
    p.add_argument("pairs")
    p.add_argument("--init", required=True, help="starting checkpoint")
    p.add_argument("--reference", help="frozen reference checkpoint (default: --init)")
    _common(p, algo=True)
    _train_flags(p)
    p.set_defaults(func=cmd_lhp_train)

    p = sub.add_parser("eval", help="accuracy / macro-F1 / per-round curve")
    p.add_argument("corpus", nargs="?")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="external prediction file instead of a checkpoint")
    p.add_argument("--write-predictions")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ppl", help="perplexity table over probes")
    p.add_argument("probes")
    p.add_argument("--checkpoint", required=True)
    _common(p)
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("sweep-beta", help="train and score each (algo, beta)")
    p.add_argument("--betas", type=float, nargs="+")
    p.add_argument("--algos", choices=ALGOS, nargs="+")
    _common(p)
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("pipeline", help="split -> sft -> pairs -> lhp -> report")
    p.add_argument("--resume", action="store_true", help="reuse artifacts already on disk")
    p.add_argument("--stop-after", choices=STAGES)
    _common(p, algo=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.verbose:
        log.setLevel(logging.INFO)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        return EXIT_IO if isinstance(cause, (OSError, ConfigError, InvalidBeta)) else EXIT_DOMAIN
    except (OSError, ConfigError, InvalidBeta) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
