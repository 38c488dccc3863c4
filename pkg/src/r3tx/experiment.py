"""Scripted experiments: the 32-pair overfit run and the R3-vs-baseline seed sweep.

    python -m r3tx.experiment overfit
    python -m r3tx.experiment directional --out runs/directional
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import analysis
from .attention import codebook_stats
from .cli import generate_traces
from .model import R3Config, R3Transformer, generate_greedy, make_batch, token_accuracy
from .optim import Adam
from .synth import Vocabulary, WorldSpec, generate_dataset, make_splits
from .training import StepRecord, train


def overfit_config(**overrides) -> R3Config:
    base = dict(vocab_size=len(Vocabulary()), dropout=0.0, learning_rate=1e-3)
    base.update(overrides)
    return R3Config(**base).validate()


@dataclasses.dataclass
class OverfitResult:
    steps: int
    accuracy: float
    exact: int
    count: int
    perplexity: float
    indices_in_range: bool
    seconds: float
    history: List[StepRecord]


def decoder_role_perplexity(model: R3Transformer, roles: Sequence[Dict[str, np.ndarray]]) -> float:
    """Mean over decoder sites of the role-usage perplexity along generated tokens."""
    vals = []
    for site in model.quantize_sites():
        if not site.startswith("dec"):
            continue
        idx = np.concatenate([r[site].ravel() for r in roles if site in r] or [np.zeros(0, int)])
        if idx.size:
            vals.append(codebook_stats(idx, model.cfg.K)["perplexity"])
    return float(np.mean(vals)) if vals else 1.0


def overfit(n: int = 32, max_steps: int = 2000, check_every: int = 100, seed: int = 0,
            cfg: Optional[R3Config] = None, log=None) -> OverfitResult:
    """Train on ``n`` episodes until teacher-forced accuracy >= 0.99 and greedy decoding
    reproduces every caption, checking every ``check_every`` steps."""
    vocab = Vocabulary()
    records = generate_dataset(WorldSpec(), n, vocab)
    cfg = cfg or overfit_config(seed=seed, batch_size=min(n, 16))
    model = R3Transformer(cfg)
    opt = Adam(model.named_parameters(), cfg.learning_rate)
    full = make_batch(records)
    t0 = time.time()
    state = {"acc": 0.0, "exact": 0, "gen": None}

    def check(done: int) -> bool:
        if done % check_every and done != max_steps:
            return False
        state["acc"] = token_accuracy(model, full)
        if state["acc"] < 0.99:
            return False
        gen = generate_greedy(model, make_batch(records, with_captions=False))
        state["gen"] = gen
        state["exact"] = sum(g == r.caption for g, r in zip(gen.tokens, records))
        if log:
            log(f"step {done}: accuracy {state['acc']:.4f}, exact {state['exact']}/{n}")
        return state["exact"] == n

    history = train(model, opt, records, max_steps, seed, stop=check)
    gen = state["gen"] or generate_greedy(model, make_batch(records, with_captions=False))
    exact = sum(g == r.caption for g, r in zip(gen.tokens, records))
    in_range = all(((a >= 0) & (a < cfg.K)).all() for r in gen.roles for a in r.values())
    return OverfitResult(len(history), token_accuracy(model, full), exact, n,
                         decoder_role_perplexity(model, gen.roles), bool(in_range),
                         time.time() - t0, history)


# ---------------------------------------------------------------- directional sweep

def directional_config(**overrides) -> R3Config:
    base = dict(vocab_size=len(Vocabulary()), d_model=64, d_k=16, heads=4, d_ff=128, K=32,
                learning_rate=1e-3)
    base.update(overrides)
    return R3Config(**base).validate()


def _relative(reports_m: dict, reports_b: dict, stratum: str, metric: str = "B@4") -> Optional[float]:
    base = reports_b[stratum][metric]
    if base is None or base == 0:
        return None
    return 100.0 * (reports_m[stratum][metric] - base) / base


def directional(out_dir, episodes: int = 2000, seeds: Sequence[int] = (0, 1, 2), steps: int = 1500,
                cfg: Optional[R3Config] = None, log=print) -> dict:
    """Train R3 and the general-attention baseline per seed; compare B@4 overall and by stratum.

    Writes per-run trace dumps, metric reports and a ``summary.json`` into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    records = generate_dataset(WorldSpec(), episodes, vocab)
    splits = make_splits(records, (0.8, 0.2), seed=0)
    base_cfg = cfg or directional_config()
    runs: Dict[str, dict] = {}
    t0 = time.time()
    for seed in seeds:
        for variant in ("r3", "baseline"):
            mcfg = dataclasses.replace(base_cfg, seed=seed,
                                       sr_mode="ones" if variant == "baseline" else base_cfg.sr_mode)
            model = R3Transformer(mcfg)
            opt = Adam(model.named_parameters(), mcfg.learning_rate)
            tag = f"{variant}-seed{seed}"
            with open(out / f"{tag}.loss.log", "w") as fh:
                train(model, opt, splits["train"], steps, seed,
                      on_step=lambda r: fh.write(r.line() + "\n") if r.step % 50 == 0 else None)
            traces = generate_traces(model, splits["eval"], vocab)
            analysis.write_traces(out / f"{tag}.jsonl", traces,
                                  [s for s in model.quantize_sites() if s.startswith("dec")]
                                  if variant == "r3" else [], mcfg.heads)
            reports = analysis.evaluate_traces(traces)
            analysis.write_report(out / f"{tag}.report.txt", reports)
            runs[tag] = {"reports": reports,
                         "perplexity": decoder_role_perplexity(model, [t.roles for t in traces])
                         if variant == "r3" else None}
            log(f"{tag}: B@4={reports['all']['B@4']:.4f} min3.B@4={reports.get('min3', {}).get('B@4')} "
                f"({time.time() - t0:.0f}s)")
    per_seed = []
    for seed in seeds:
        m, b = runs[f"r3-seed{seed}"]["reports"], runs[f"baseline-seed{seed}"]["reports"]
        imp1, imp3 = _relative(m, b, "min1"), _relative(m, b, "min3")
        per_seed.append({"seed": seed, "r3_b4": m["all"]["B@4"], "baseline_b4": b["all"]["B@4"],
                         "improvement_min1": imp1, "improvement_min3": imp3,
                         "stratum_ordered": imp1 is not None and imp3 is not None and imp3 >= imp1,
                         "r3_perplexity": runs[f"r3-seed{seed}"]["perplexity"]})
    r3_mean = float(np.mean([p["r3_b4"] for p in per_seed]))
    base_mean = float(np.mean([p["baseline_b4"] for p in per_seed]))
    summary = {"episodes": episodes, "steps": steps, "seeds": list(seeds),
               "config": dataclasses.asdict(base_cfg),
               "r3_mean_b4": r3_mean, "baseline_mean_b4": base_mean,
               "mean_claim": r3_mean >= base_mean,
               "stratum_claim": sum(p["stratum_ordered"] for p in per_seed) >= 2,
               "per_seed": per_seed, "seconds": time.time() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m r3tx.experiment")
    sub = p.add_subparsers(dest="which", required=True)
    o = sub.add_parser("overfit")
    o.add_argument("--max-steps", type=int, default=2000)
    o.add_argument("--seed", type=int, default=0)
    d = sub.add_parser("directional")
    d.add_argument("--out", default="runs/directional")
    d.add_argument("--episodes", type=int, default=2000)
    d.add_argument("--steps", type=int, default=1500)
    d.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args(argv)
    if args.which == "overfit":
        res = overfit(max_steps=args.max_steps, seed=args.seed, log=print)
        print(f"steps={res.steps} accuracy={res.accuracy:.4f} exact={res.exact}/{res.count} "
              f"perplexity={res.perplexity:.3f} seconds={res.seconds:.0f}")
        return 0 if res.accuracy >= 0.99 and res.exact == res.count else 1
    summary = directional(args.out, args.episodes, args.seeds, args.steps)
    print(json.dumps({k: summary[k] for k in ("r3_mean_b4", "baseline_mean_b4", "mean_claim",
                                              "stratum_claim", "seconds")}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
