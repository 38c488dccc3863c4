"""Deterministic training loop: every step's randomness derives from (seed, step)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import codebook_stats
from .errors import NumericError
from .model import Batch, R3Transformer, make_batch, training_loss
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    total: float
    ce: float
    l_q: float
    perplexity: float

    def line(self) -> str:
        return (f"step={self.step} total={self.total!r} ce={self.ce!r} l_q={self.l_q!r} "
                f"perplexity={self.perplexity!r}")


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices of the examples used at ``step``: epoch-wise seeded permutations, last partial batch dropped."""
    per_epoch = max(n // batch_size, 1)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
    return perm[k * batch_size:(k + 1) * batch_size]


def role_perplexity(model: R3Transformer, roles: dict, masks: dict) -> float:
    """Mean codebook perplexity over quantize sites, counting only real tokens."""
    vals = []
    for site, idx in roles.items():
        m = masks[site.split(".")[0][:3]]
        chosen = idx[np.broadcast_to(m[..., None], idx.shape)]
        if chosen.size:
            vals.append(codebook_stats(chosen, model.cfg.K)["perplexity"])
    return float(np.mean(vals)) if vals else 1.0


def train_step(model: R3Transformer, optimizer: Adam, batch: Batch, seed: int, step: int) -> StepRecord:
    optimizer.zero_grad()
    out = training_loss(model, batch, training=True, seed=[seed, 2, step])
    total = out["total"].item()
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss at step {step}: ce={out['ce'].item()} l_q={out['l_q'].item()}")
    ad.backward(out["total"])
    optimizer.step()
    ppl = role_perplexity(model, out["roles"], {"enc": batch.video_mask, "dec": batch.caption_mask})
    return StepRecord(step, total, out["ce"].item(), out["l_q"].item(), ppl)


def train(model: R3Transformer, optimizer: Adam, records: Sequence, steps: int, seed: int,
          start_step: int = 0, on_step: Optional[Callable[[StepRecord], None]] = None,
          stop: Optional[Callable[[int], bool]] = None) -> List[StepRecord]:
    """Run steps ``start_step .. steps-1``; ``stop(step)`` may end the loop early."""
    history = []
    bs = model.cfg.batch_size
    for step in range(start_step, steps):
        idx = batch_indices(len(records), bs, seed, step)
        rec = train_step(model, optimizer, make_batch([records[i] for i in idx]), seed, step)
        history.append(rec)
        if on_step:
            on_step(rec)
        if stop and stop(step + 1):
            break
    return history
