"""Command-line entry point: ``r3tx <command> [options] [section.key=value ...]``.

Commands
    gen-data       synthesize episodes into a feature file plus split manifest
    train          train (or resume) a model, writing checkpoints and a loss log
    generate       greedy captions with role traces for one data split
    evaluate       corpus and predicate-stratified metric reports
    analyze-roles  word -> role and word-frequency tables
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import analysis, config as cfgio
from .analysis import GenerationTrace
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, FormatError, R3Error
from .model import R3Transformer, generate_greedy, make_batch
from .optim import Adam
from .synth import (EpisodeRecord, Vocabulary, generate_dataset, load_feature_file, make_splits,
                    save_feature_file)
from .training import StepRecord, train

log = logging.getLogger("r3tx")

DATA_NAME = "episodes.r3f"
LOSS_LOG = "loss.log"
LAST = "last.r3c"
GEN_BATCH = 64


# ---------------------------------------------------------------- helpers

def _resolve(args) -> cfgio.RunConfig:
    cfg = cfgio.load(args.config) if args.config else cfgio.RunConfig()
    cfg = cfgio.override(cfg, tuple(args.overrides))
    if getattr(args, "variant", None):
        cfg.variant = args.variant
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg.validate()


def manifest_path(data_path) -> Path:
    return Path(str(data_path) + ".splits")


def write_manifest(path, splits: Dict[str, List[int]]) -> None:
    with open(path, "w") as fh:
        for name, ids in splits.items():
            fh.write(f"{name} = {','.join(str(i) for i in ids)}\n")


def read_manifest(path) -> Dict[str, List[int]]:
    try:
        values = cfgio.parse_lines(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read split manifest {path}: {exc}") from None
    try:
        return {k: [int(x) for x in v.split(",") if x] for k, v in values.items()}
    except ValueError:
        raise FormatError(f"{path}: malformed split manifest") from None


def load_split(data_path, split: str, T: Optional[int] = None) -> List[EpisodeRecord]:
    """Records of one split (by episode seed), or the whole file for ``split='all'``."""
    records = load_feature_file(data_path, T=T)
    if split == "all":
        return records
    manifest = read_manifest(manifest_path(data_path))
    if split not in manifest:
        raise ConfigError(f"split {split!r} not in manifest (have {sorted(manifest)})")
    by_seed = {r.seed: r for r in records}
    missing = [i for i in manifest[split] if i not in by_seed]
    if missing:
        raise ContractError(f"manifest lists episodes absent from {data_path}: {missing[:5]}")
    return [by_seed[i] for i in manifest[split]]


def stratum_counts(records: Sequence[EpisodeRecord]) -> Dict[str, int]:
    counts = {"all": len(records)}
    for m in analysis.STRATA:
        counts[f"min{m}"] = sum(r.verb_count >= m for r in records)
    return counts


def read_loss_log(path) -> List[StepRecord]:
    """Parse a loss log; when a step was logged twice (resume), the last line wins."""
    by_step: Dict[int, StepRecord] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        kv = dict(item.split("=", 1) for item in line.split())
        step = int(kv["step"])
        by_step[step] = StepRecord(step, float(kv["total"]), float(kv["ce"]), float(kv["l_q"]),
                                   float(kv["perplexity"]))
    return [by_step[s] for s in sorted(by_step)]


def generate_traces(model: R3Transformer, records: Sequence[EpisodeRecord],
                    vocab: Vocabulary) -> List[GenerationTrace]:
    traces = []
    for start in range(0, len(records), GEN_BATCH):
        chunk = records[start:start + GEN_BATCH]
        gen = generate_greedy(model, make_batch(chunk, with_captions=False))
        for rec, toks, roles in zip(chunk, gen.tokens, gen.roles):
            traces.append(GenerationTrace(
                id=rec.seed, generated=vocab.words(toks),
                reference=vocab.words(rec.caption or []), roles=roles,
                generated_tags=vocab.tag_ids(toks), reference_tags=list(rec.pos_tags or [])))
    return traces


def decoder_sites(model: R3Transformer) -> List[str]:
    if model.cfg.sr_mode == "ones":
        return []
    return [s for s in model.quantize_sites() if s.startswith("dec")]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    if args.seed is not None:
        cfg.world.seed = args.seed
    out = Path(args.out) if args.out else Path(cfg.data_dir) / DATA_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    records = generate_dataset(cfg.world, cfg.episodes, vocab)
    save_feature_file(out, records)
    if records:
        fractions = (cfg.train_fraction, 1.0 - cfg.train_fraction)
        splits = make_splits([r.seed for r in records], fractions, seed=cfg.world.seed)
    else:
        splits = {"train": [], "eval": []}
    write_manifest(manifest_path(out), splits)
    cfgio.save(cfg, Path(str(out) + ".cfg"))
    by_split = {"all": records}
    seeds = {r.seed: r for r in records}
    by_split.update({k: [seeds[i] for i in v] for k, v in splits.items()})
    for name, recs in by_split.items():
        counts = stratum_counts(recs)
        print(f"{name}: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"wrote {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    mcfg = cfg.model_config()
    mcfg.seed = cfg.seed
    vocab = Vocabulary()
    if mcfg.vocab_size < len(vocab):
        raise ConfigError(f"model.vocab_size {mcfg.vocab_size} < vocabulary size {len(vocab)}")
    data = Path(args.data) if args.data else Path(cfg.data_dir) / DATA_NAME
    records = load_split(data, args.split, T=mcfg.T)
    if not records:
        raise ContractError(f"no training records in split {args.split!r} of {data}")

    ckdir = Path(cfg.checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    cfgio.save(cfg, ckdir / "config.txt")
    last = ckdir / LAST
    start = 0
    if args.resume and last.exists():
        model, opt, meta = load_checkpoint(last)
        if int(meta["seed"]) != cfg.seed:
            raise ConfigError(f"{last} was written with seed {meta['seed']}, not {cfg.seed}")
        if model.cfg != mcfg:
            raise ConfigError(f"{last} was written with a different model config")
        start = int(meta["step"])
        log.info("resuming from step %d", start)
    else:
        model = R3Transformer(mcfg)
        opt = Adam(model.named_parameters(), mcfg.learning_rate)

    with open(ckdir / LOSS_LOG, "a") as logfh:
        if start:
            logfh.write(f"# resumed at step {start}\n")

        def on_step(rec: StepRecord) -> None:
            if rec.step % cfg.log_every == 0 or rec.step == cfg.steps - 1:
                logfh.write(rec.line() + "\n")
                logfh.flush()
                log.info(rec.line())
            done = rec.step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                save_checkpoint(ckdir / f"ckpt-{done:06d}.r3c", model, opt, done, cfg.seed)
                save_checkpoint(last, model, opt, done, cfg.seed)

        if start == 0 and not (args.resume and last.exists()):
            save_checkpoint(ckdir / f"ckpt-{0:06d}.r3c", model, opt, 0, cfg.seed)
            if cfg.steps == 0:
                save_checkpoint(last, model, opt, 0, cfg.seed)
        train(model, opt, records, cfg.steps, cfg.seed, start_step=start, on_step=on_step)
    print(f"trained to step {max(cfg.steps, start)}; checkpoints in {ckdir}")
    return 0


def cmd_generate(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint, with_optimizer=False)
    records = load_split(args.data, args.split, T=model.cfg.T)
    vocab = Vocabulary()
    if model.cfg.vocab_size < len(vocab):
        raise FormatError(f"{args.checkpoint}: vocabulary of {model.cfg.vocab_size} ids is too small")
    if not records:
        log.warning("split %r of %s is empty; writing an empty dump", args.split, args.data)
    traces = generate_traces(model, records, vocab)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_traces(out, traces, decoder_sites(model), model.cfg.heads)
    print(f"wrote {len(traces)} traces to {out}")
    return 0


def _check_refs(traces: Sequence[GenerationTrace], data_path) -> None:
    vocab = Vocabulary()
    by_seed = {r.seed: r for r in load_feature_file(data_path)}
    for tr in traces:
        rec = by_seed.get(tr.id)
        if rec is None:
            raise ContractError(f"trace id {tr.id} has no episode in {data_path}")
        if vocab.words(rec.caption or []) != tr.reference:
            raise ContractError(f"trace id {tr.id}: reference differs from {data_path}")


def cmd_evaluate(args) -> int:
    _, traces = analysis.read_traces(args.traces)
    if args.refs:
        _check_refs(traces, args.refs)
    strata = [args.min_predicates] if args.min_predicates else list(analysis.STRATA)
    reports = analysis.evaluate_traces(traces, strata)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_report(out_dir / "report.txt", reports)
    analysis.write_report_csv(out_dir / "report.csv", reports)
    for line in (out_dir / "report.txt").read_text().splitlines():
        print(line)
    if args.compare:
        _, base_traces = analysis.read_traces(args.compare)
        if sorted(t.id for t in base_traces) != sorted(t.id for t in traces):
            raise ContractError(f"{args.compare} covers different example ids than {args.traces}")
        base = analysis.evaluate_traces(base_traces, strata)
        imp = analysis.improvement_report(reports, base)
        analysis.write_report(out_dir / "improvement.txt", imp)
        analysis.write_report_csv(out_dir / "improvement.csv", imp)
        for line in (out_dir / "improvement.txt").read_text().splitlines():
            print(f"improvement.{line}")
    return 0


def cmd_analyze_roles(args) -> int:
    header, traces = analysis.read_traces(args.traces)
    if not traces:
        raise FormatError(f"{args.traces}: dump holds no examples")
    if not header.get("sites") or not any(tr.roles for tr in traces):
        raise FormatError(f"{args.traces}: dump holds no role traces")
    sites = header["sites"]
    site = args.site or ("dec0.cross" if "dec0.cross" in sites else sites[0])
    p1, p2 = analysis.write_role_tables(args.out_dir, traces, site, args.head)
    print(f"wrote {p1} and {p2}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="overrides run.seed (world.seed for gen-data)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="section.key=value")

    p = argparse.ArgumentParser(prog="r3tx", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="synthesize a feature file")
    g.add_argument("--out", help=f"feature file (default <data_dir>/{DATA_NAME})")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train or resume")
    t.add_argument("--variant", choices=cfgio.VARIANTS)
    t.add_argument("--data", help=f"feature file (default <data_dir>/{DATA_NAME})")
    t.add_argument("--split", default="train")
    t.add_argument("--resume", action="store_true", help=f"continue from <checkpoint_dir>/{LAST}")
    t.set_defaults(func=cmd_train)

    gen = sub.add_parser("generate", parents=[common], help="greedy captions + role traces")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--data", required=True)
    gen.add_argument("--split", default="eval")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", parents=[common], help="metric reports from a trace dump")
    e.add_argument("traces")
    e.add_argument("--refs", help="feature file to check references against")
    e.add_argument("--min-predicates", type=int, choices=analysis.STRATA)
    e.add_argument("--compare", help="baseline trace dump; writes improvement reports")
    e.add_argument("--out-dir", default="reports")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze-roles", parents=[common], help="role / frequency tables")
    a.add_argument("traces")
    a.add_argument("--site", help="quantize site (default dec0.cross)")
    a.add_argument("--head", type=int, default=0)
    a.add_argument("--out-dir", default="reports")
    a.set_defaults(func=cmd_analyze_roles)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    # overrides may follow any flag, so collect stray key=value words as well
    args, extra = parser.parse_known_args(argv)
    stray = [a for a in extra if a.startswith("-") or "=" not in a]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    args.overrides = list(args.overrides) + extra
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except R3Error as exc:
        print(f"r3tx {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"r3tx {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
