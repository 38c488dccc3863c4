"""Acceptance criteria 1-10, one PASS/FAIL line each.

Run alone with ``pytest -s tests/test_acceptance.py``; the verdict lines are
also repeated in the terminal summary. Criterion 6 reads the sweep results in
``runs/directional/summary.json`` (or recomputes them with R3TX_DIRECTIONAL=1).
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from r3tx import autodiff as ad
from r3tx.analysis import GenerationTrace, role_word_probability
from r3tx.attention import (R3Attention, RoleCodebook, general_relativity, project_qkv, quantize)
from r3tx.autodiff import Tensor
from r3tx.checkpoint import load_checkpoint, save_checkpoint
from r3tx.cli import main as cli_main, read_loss_log
from r3tx.experiment import directional, overfit
from r3tx.metrics import bleu_n, cider, rouge_l
from r3tx.model import Batch, R3Config, R3Transformer, generate_greedy, make_batch, training_loss
from r3tx.positional import (BiasTable, SpatioTemporalTables, bias_matrix, encode_video_positions,
                             spatiotemporal_index, spatiotemporal_indices)
from r3tx.synth import WorldSpec, generate_dataset, load_feature_file, save_feature_file

from conftest import VERDICTS
from test_metrics import brute_bleu, brute_cider, brute_rouge, random_corpus

ROOT = Path(__file__).resolve().parents[1]
SUMMARY = ROOT / "runs" / "directional" / "summary.json"


def verdict(n, ok, detail, status=None):
    line = f"criterion {n}: {status or ('PASS' if ok else 'FAIL')}  {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- 1

def test_1_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(0)
    errs = {}
    x = leaf(rng.normal(size=(3, 4)) * 0.5)
    w = Tensor(rng.normal(size=(4, 5)))
    errs["linear"] = ad.finite_diff_check(lambda t: ad.tsum(ad.square(t @ w)), x)
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    c = Tensor(rng.normal(size=(3, 4)))
    errs["layer_norm"] = ad.finite_diff_check(lambda t: ad.tsum(ad.layer_norm(t, g, b) * c), x)
    errs["softmax"] = ad.finite_diff_check(lambda t: ad.tsum(ad.softmax(t) * c), x)
    errs["feedforward"] = ad.finite_diff_check(
        lambda t: ad.tsum(ad.relu(t @ w) @ Tensor(np.ones((5, 2)))), x)
    ids = np.array([[0, 2, 1]])
    errs["cross_entropy"] = ad.finite_diff_check(lambda t: ad.cross_entropy(t.reshape(1, 3, 4), ids), x)

    tabs = SpatioTemporalTables.init(4, 4, 5, 6, rng, 1.0)
    pos = np.array([[1, 0, 0, 0.5, 0.5], [3, 0.2, 0.1, 0.9, 0.8]])
    errs["video_positions"] = ad.finite_diff_check(
        lambda t: ad.tsum(ad.square(encode_video_positions(pos, tabs))), tabs.temporal)
    tab = BiasTable(leaf(rng.normal(size=(32, 2))), True)
    errs["bias_matrix"] = ad.finite_diff_check(
        lambda t: ad.tsum(ad.square(bias_matrix(3, 4, tab))), tab.buckets)

    cb = RoleCodebook(leaf(rng.normal(size=(6, 4))), 0.0)
    xq = leaf(rng.normal(size=(2, 3, 4)))
    cq = Tensor(rng.normal(size=(2, 3, 4)))

    def fq(_):
        r = quantize(xq, cb, beta=0.25)
        return ad.tsum(r.z_q * cq) + r.loss_q
    errs["quantize.x"] = ad.finite_diff_check(fq, xq)
    errs["quantize.codebook"] = ad.finite_diff_check(fq, cb.weight)

    for mode in ("quantized", "continuous", "ones"):
        blk = R3Attention(8, 2, 4, 5, np.random.default_rng(1), 0.0, 0.25, mode, 0.3)
        q = leaf(rng.normal(size=(3, 8)) * 0.5)
        bias = Tensor(rng.normal(size=(2, 3, 3)) * 0.5)
        pq = Tensor(rng.normal(size=(3, 8)) * 0.1)
        cc = Tensor(rng.normal(size=(3, 8)))

        def fb(_):
            a = blk(q, q, q_pos=pq, k_pos=pq, bias=bias, causal=True)
            loss = ad.tsum(a.out * cc)
            return loss if a.loss_q is None else loss + a.loss_q
        errs[f"r3_block.{mode}"] = max([ad.finite_diff_check(fb, q)]
                                       + [ad.finite_diff_check(fb, p) for p in blk.parameters().values()])

    cfg = R3Config(d_model=8, d_k=4, heads=2, K=4, encoder_layers=1, decoder_layers=1, d_ff=8,
                   d_feat=6, vocab_size=9, T=6, L_text=8, dropout=0.0, similarity_dropout=0.0,
                   init_std=0.3)
    model = R3Transformer(cfg)
    vrng = np.random.default_rng(6)
    video = vrng.normal(size=(1, 2, 6))
    boxes = np.array([[[0, 0.1, 0.2, 0.6, 0.9], [1, 0.1, 0.2, 0.6, 0.9]]])
    caps = np.array([[3, 4, 5]])
    batch = Batch(video, boxes, np.ones((1, 2), bool), caps, np.ones_like(caps, bool))
    errs["full_model"] = max(
        ad.finite_diff_check(lambda _: training_loss(model, batch, training=False)["total"], p)
        for p in model.named_parameters().values())
    seconds = time.time() - t0
    worst = max(errs, key=errs.get)
    verdict(1, all(v <= 1e-4 for v in errs.values()) and seconds < 60,
            f"max rel err {errs[worst]:.2e} ({worst}) over {len(errs)} checks <= 1e-4; {seconds:.1f}s < 60s")


# ---------------------------------------------------------------- 2

def test_2_quantization_contract():
    rng = np.random.default_rng(2)
    cb = RoleCodebook(Tensor(rng.normal(size=(7, 4))), 0.0)
    x = rng.normal(size=(50, 4))
    idx = quantize(Tensor(x), cb).indices
    scale_ok = all(np.array_equal(quantize(Tensor(x * s), cb).indices, idx) for s in (1e-3, 0.5, 3.0, 1e4))

    E = cb.weight.data / np.linalg.norm(cb.weight.data, axis=1, keepdims=True)
    # random rows: zero up to rounding; axis-aligned rows normalise exactly, so exactly zero
    zero_ok = quantize(Tensor(E[[3, 0, 6]] * 2.0), cb).loss_q.item() <= 1e-30
    axes = RoleCodebook(Tensor(np.diag([2.0, 3.0, 0.5, 1.0])), 0.0)
    zero_ok &= quantize(Tensor(np.diag([1.0, 7.0, 2.0, 4.0])), axes).loss_q.item() == 0.0
    off = E[[3, 0, 6]].copy()
    off[1] += 0.05
    nonzero_ok = quantize(Tensor(off), cb).loss_q.item() > 0.0

    W = rng.normal(size=(5, 3))
    plain = RoleCodebook(Tensor(W), 0.0)
    xs = leaf(rng.normal(size=(4, 3)))
    c = rng.normal(size=(4, 3))
    beta = 0.25

    def f(t):
        r = quantize(t, plain, beta=beta, normalize=False)
        return ad.tsum(ad.square(r.z_q) * Tensor(c)) + r.loss_q
    fd = ad.finite_diff_check(f, xs)
    e = W[quantize(Tensor(xs.data), plain, normalize=False).indices]
    st_ok = fd <= 1e-4 and np.allclose(xs.grad, 2 * e * c + 2 * beta * (xs.data - e) / 4, atol=1e-12)

    tie = RoleCodebook(Tensor(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])), 0.0)
    tie_ok = quantize(Tensor(np.array([[1.0, 1.0], [2.0, 0.0], [0.0, 5.0]])), tie).indices.tolist() == [0, 0, 1]
    verdict(2, scale_ok and zero_ok and nonzero_ok and st_ok and tie_ok,
            f"scale invariance {scale_ok}; L_Q=0 iff rows match {zero_ok and nonzero_ok}; "
            f"straight-through FD err {fd:.1e}; lowest-index ties {tie_ok}")


# ---------------------------------------------------------------- 3

def test_3_baseline_equivalence():
    rng = np.random.default_rng(3)
    blk = R3Attention(8, 2, 4, 5, np.random.default_rng(0), 0.1, 0.25, "ones", 0.3)
    blk.w_o.data = np.eye(8)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    bias = rng.normal(size=(2, 5, 5))
    out = blk(x, x, q_pos=Tensor(rng.normal(size=(5, 8))), k_pos=Tensor(rng.normal(size=(5, 8))),
              bias=bias, training=True, rng=1).out.data
    Q, K, V = project_qkv(x, x, x, blk.general)
    ref = ad.swapaxes(general_relativity(Q, K, V, bias), -2, -3).data.reshape(2, 5, 8)
    diff = float(np.abs(out - ref).max())
    verdict(3, diff == 0.0, f"max abs diff {diff}")


# ---------------------------------------------------------------- 4

def test_4_metric_oracles():
    worst_c = 0.0
    exact = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cands, refs = random_corpus(rng, int(rng.integers(2, 8)))
        cands[0] = list(refs[0])
        exact &= all(bleu_n(cands, refs, n) == brute_bleu(cands, refs, n) for n in range(1, 5))
        exact &= abs(rouge_l(cands, refs) - brute_rouge(cands, refs)) <= 1e-15 * max(1, brute_rouge(cands, refs))
        worst_c = max(worst_c, abs(cider(cands, refs) - brute_cider(cands, refs)))
    b1 = bleu_n([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]], 1)
    verdict(4, exact and worst_c <= 1e-9 and round(b1, 4) == 0.7165,
            f"BLEU/ROUGE-L exact on 20 corpora {exact}; CIDEr max diff {worst_c:.1e}; B@1 {b1:.4f}")


# ---------------------------------------------------------------- 5, 7

@pytest.fixture(scope="module")
def overfit_run():
    return overfit(n=32, max_steps=2000)


def test_5_overfit(overfit_run):
    r = overfit_run
    verdict(5, r.accuracy >= 0.99 and r.exact == r.count and r.steps <= 2000 and r.seconds < 600,
            f"accuracy {r.accuracy:.4f} >= 0.99, exact {r.exact}/{r.count}, {r.steps} steps <= 2000, "
            f"{r.seconds:.0f}s < 600s")


def test_7_codebook_health(overfit_run):
    r = overfit_run
    verdict(7, r.perplexity > 1.5 and r.indices_in_range,
            f"decoder role perplexity {r.perplexity:.3f} > 1.5; indices in [0, K) {r.indices_in_range}")


# ---------------------------------------------------------------- 6

def _check_directional(summary):
    per = summary["per_seed"]
    health = all(p["r3_perplexity"] is not None and p["r3_perplexity"] > 1.5 for p in per)
    detail = (f"mean B@4 r3 {summary['r3_mean_b4']:.4f} vs baseline {summary['baseline_mean_b4']:.4f} "
              f"({'holds' if summary['mean_claim'] else 'fails'}); min3-vs-min1 improvement ordered in "
              f"{sum(p['stratum_ordered'] for p in per)}/3 seeds "
              f"({'holds' if summary['stratum_claim'] else 'fails'}); "
              f"r3 role perplexity {min(p['r3_perplexity'] or 0 for p in per):.2f}+; "
              f"{summary['seconds'] / 60:.0f} min")
    claim = summary["mean_claim"] and summary["stratum_claim"]
    ok = (claim or health) and summary["seconds"] < 7200
    # soft criterion: a missed claim without codebook collapse is reported, not failed
    status = "SOFT-PASS (claim not met, codebook healthy)" if ok and not claim else None
    verdict(6, ok, detail, status)


@pytest.mark.directional
@pytest.mark.slow
def test_6_directional_rerun(tmp_path):
    _check_directional(directional(tmp_path, log=print))


def test_6_directional_recorded():
    if not SUMMARY.exists():
        pytest.skip(f"{SUMMARY} not present; run python -m r3tx.experiment directional")
    _check_directional(json.loads(SUMMARY.read_text()))


# ---------------------------------------------------------------- 8

def test_8_role_analysis():
    roles = {"dec0.cross": np.array([[2], [0], [1], [2], [0]])}
    tr = GenerationTrace(0, ["red", "ball", "hits", "red", "ball"], [], roles)
    hand = {"red": (2, 1.0), "ball": (0, 1.0), "hits": (1, 1.0)}
    hand_ok = role_word_probability([tr], "dec0.cross") == hand
    mixed = [GenerationTrace(0, ["w", "w"], [], {"s": np.array([[1], [1]])}),
             GenerationTrace(1, ["w", "w"], [], {"s": np.array([[1], [2]])})]
    mixed_ok = role_word_probability(mixed, "s") == {"w": (1, 0.75)}

    cfg = R3Config(d_model=8, d_k=4, heads=2, K=1, encoder_layers=1, decoder_layers=1, d_ff=8,
                   d_feat=32, vocab_size=34, init_std=0.5)
    model = R3Transformer(cfg)
    recs = generate_dataset(WorldSpec(), 4)
    gen = generate_greedy(model, make_batch(recs, with_captions=False), max_len=10)
    traces = [GenerationTrace(i, [str(t) for t in toks], [], r)
              for i, (toks, r) in enumerate(zip(gen.tokens, gen.roles))]
    probs = role_word_probability(traces, "dec0.cross")
    k1_ok = bool(probs) and all(p == 1.0 for _, p in probs.values())
    verdict(8, hand_ok and mixed_ok and k1_ok,
            f"5-step hand counts {hand_ok}; 3:1 split -> 0.75 {mixed_ok}; K=1 all 1.0 over "
            f"{len(probs)} words {k1_ok}")


# ---------------------------------------------------------------- 9

def test_9_positional_fuzz():
    rng = np.random.default_rng(9)
    n, N, T = 100_000, 4, 50
    xs = np.sort(rng.random((n, 2)), axis=1)
    ys = np.sort(rng.random((n, 2)), axis=1)
    xs[:1000, 1] = 1.0
    ys[1000:2000] = 0.0
    pos = np.column_stack([rng.integers(0, T, n), xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]])
    idx = spatiotemporal_indices(pos, N, T)
    in_range = bool((idx[:, 0] >= 0).all() and (idx[:, 0] < T).all()
                    and (idx[:, 1:] >= 0).all() and (idx[:, 1:] < N * N).all())
    ex1 = spatiotemporal_index(0, (0, 0, 1, 1), N=4, T=50)
    ex2 = spatiotemporal_index(3, (0, 0, 0.5, 0.5), N=4, T=50)
    verdict(9, in_range and ex1 == (0, 10, 15) and ex2 == (3, 5, 10),
            f"1e5 boxes in range {in_range}; worked examples {ex1}, {ex2}")


# ---------------------------------------------------------------- 10

SMALL = """\
model.d_model = 16
model.d_k = 8
model.heads = 2
model.K = 8
model.d_ff = 32
model.encoder_layers = 1
model.decoder_layers = 1
model.vocab_size = 34
model.batch_size = 4
run.episodes = 24
run.steps = 100
run.eval_every = 25
run.log_every = 1
"""


def test_10_persistence(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    Path("small.cfg").write_text(SMALL)
    assert cli_main(["gen-data", "--config", "small.cfg"]) == 0
    assert cli_main(["train", "--config", "small.cfg", "run.checkpoint_dir=full"]) == 0
    assert cli_main(["train", "--config", "small.cfg", "run.checkpoint_dir=part", "run.steps=50"]) == 0
    assert cli_main(["train", "--config", "small.cfg", "run.checkpoint_dir=part", "--resume"]) == 0
    full, part = read_loss_log("full/loss.log"), read_loss_log("part/loss.log")
    steps_ok = [r.step for r in full] == list(range(100))
    log_ok = steps_ok and [r.line() for r in full] == [r.line() for r in part]

    ck = Path("full/last.r3c")
    model, opt, meta = load_checkpoint(ck)
    save_checkpoint("again.r3c", model, opt, int(meta["step"]), int(meta["seed"]))
    ck_ok = ck.read_bytes() == Path("again.r3c").read_bytes() == Path("part/last.r3c").read_bytes()

    recs = load_feature_file("data/episodes.r3f")
    save_feature_file("again.r3f", recs)
    ff_ok = Path("again.r3f").read_bytes() == Path("data/episodes.r3f").read_bytes()
    verdict(10, log_ok and ck_ok and ff_ok,
            f"resumed == uninterrupted over 100 logged steps {log_ok}; checkpoint bitwise {ck_ok}; "
            f"feature file bitwise {ff_ok}")
