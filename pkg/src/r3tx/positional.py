"""Bucketed spatio-temporal embeddings and relative-position attention bias."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, add, embedding
from .errors import ConfigError, RangeError


def spatiotemporal_index(t: int, box: Sequence[float], N: int, T: int) -> tuple[int, int, int]:
    """Map a timestamp bucket and a unit-square box to (temporal, center, size) rows.

    Centers and extents are floored onto an N x N grid; a value of exactly 1
    clamps into the last cell.
    """
    x0, y0, x1, y1 = box
    if not 0 <= t < T:
        raise RangeError(f"temporal bucket {t} outside [0, {T})")
    if not (0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0):
        raise RangeError(f"box {tuple(box)} is not an ordered box inside the unit square")
    cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
    ly, lx = abs(y1 - y0), abs(x1 - x0)

    def cell(v: float) -> int:
        return min(int(math.floor(v * N)), N - 1)

    return int(t), cell(cy) * N + cell(cx), cell(ly) * N + cell(lx)


def spatiotemporal_indices(positions: np.ndarray, N: int, T: int) -> np.ndarray:
    """Vectorised ``spatiotemporal_index`` over an (n, 5) array of (t, x0, y0, x1, y1)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 5)
    t = pos[:, 0]
    x0, y0, x1, y1 = pos[:, 1], pos[:, 2], pos[:, 3], pos[:, 4]
    if np.any((t < 0) | (t >= T)) or np.any(t != np.floor(t)):
        raise RangeError(f"temporal bucket outside [0, {T})")
    if np.any(~((0 <= x0) & (x0 <= x1) & (x1 <= 1) & (0 <= y0) & (y0 <= y1) & (y1 <= 1))):
        raise RangeError("box is not an ordered box inside the unit square")

    def cell(v):
        return np.minimum(np.floor(v * N).astype(np.int64), N - 1)

    rc = cell((y0 + y1) / 2.0) * N + cell((x0 + x1) / 2.0)
    rs = cell(np.abs(y1 - y0)) * N + cell(np.abs(x1 - x0))
    return np.stack([t.astype(np.int64), rc, rs], axis=-1)


@dataclass
class SpatioTemporalTables:
    temporal: Tensor        # T x d_model, video
    region_center: Tensor   # N^2 x d_model
    region_size: Tensor     # N^2 x d_model
    text_temporal: Tensor   # L_text x d_model
    N: int
    T: int

    @classmethod
    def init(cls, d_model: int, N: int, T: int, L_text: int, rng: np.random.Generator,
             std: float = 0.02) -> "SpatioTemporalTables":
        def table(rows):
            return Tensor(rng.normal(0.0, std, (rows, d_model)), requires_grad=True)
        return cls(table(T), table(N * N), table(N * N), table(L_text), N, T)

    def parameters(self) -> dict:
        return {"temporal": self.temporal, "region_center": self.region_center,
                "region_size": self.region_size, "text_temporal": self.text_temporal}


def encode_video_positions(positions: np.ndarray, tables: SpatioTemporalTables) -> Tensor:
    """Sum of temporal, region-center and region-size rows for each token.

    ``positions`` has trailing axis 5 = (t, x0, y0, x1, y1); leading axes are kept.
    """
    positions = np.asarray(positions, dtype=np.float64)
    lead = positions.shape[:-1]
    idx = spatiotemporal_indices(positions, tables.N, tables.T).reshape(*lead, 3)
    out = add(embedding(tables.temporal, idx[..., 0]), embedding(tables.region_center, idx[..., 1]))
    return add(out, embedding(tables.region_size, idx[..., 2]))


def encode_text_positions(length: int, tables: SpatioTemporalTables) -> Tensor:
    limit = tables.text_temporal.shape[0]
    if length > limit:
        raise RangeError(f"text length {length} exceeds table size {limit}")
    return embedding(tables.text_temporal, np.arange(length))


def relative_bucket(offset, num_buckets: int = 32, max_distance: int = 128,
                    bidirectional: bool = True):
    """Bucket a key-minus-query offset.

    Small distances get their own bucket, larger ones share logarithmically
    wider buckets up to ``max_distance`` and saturate beyond it. Bidirectional
    mode reserves the upper half of the buckets for positive offsets; causal
    mode folds every positive (future) offset onto bucket 0. Works on ints or
    integer arrays.
    """
    if bidirectional and num_buckets % 2:
        raise ConfigError("bidirectional bucketing needs an even bucket count")
    rel = np.asarray(offset, dtype=np.int64)
    n = -rel
    ret = np.zeros_like(n)
    if bidirectional:
        num_buckets //= 2
        ret += (n < 0).astype(np.int64) * num_buckets
        n = np.abs(n)
    else:
        n = np.maximum(n, 0)
    max_exact = num_buckets // 2
    is_small = n < max_exact
    with np.errstate(divide="ignore"):
        large = max_exact + (
            np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact)
            * (num_buckets - max_exact)
        ).astype(np.int64)
    large = np.minimum(large, num_buckets - 1)
    ret = ret + np.where(is_small, n, large)
    return int(ret) if ret.ndim == 0 else ret


@dataclass
class BiasTable:
    buckets: Tensor          # B x H learnable scalars
    bidirectional: bool
    max_distance: int = 128

    @classmethod
    def init(cls, num_buckets: int, heads: int, bidirectional: bool, rng: np.random.Generator,
             std: float = 0.02, max_distance: int = 128) -> "BiasTable":
        return cls(Tensor(rng.normal(0.0, std, (num_buckets, heads)), requires_grad=True),
                   bidirectional, max_distance)


def bias_matrix(len_q: int, len_k: int, table: BiasTable,
                q_pos: Optional[np.ndarray] = None, k_pos: Optional[np.ndarray] = None) -> Tensor:
    """Per-head additive attention bias of shape (H, len_q, len_k).

    Entry (h, i, j) looks up the bucket of ``k_pos[j] - q_pos[i]``; positions
    default to sequence indices. Positions may carry a leading batch axis, in
    which case the result is (B, H, len_q, len_k).
    """
    if len_q <= 0 or len_k <= 0:
        raise RangeError("bias_matrix needs positive lengths")
    q = np.arange(len_q) if q_pos is None else np.asarray(q_pos, dtype=np.int64)
    k = np.arange(len_k) if k_pos is None else np.asarray(k_pos, dtype=np.int64)
    offsets = k[..., None, :] - q[..., :, None]
    buckets = relative_bucket(offsets, table.buckets.shape[0], table.max_distance, table.bidirectional)
    vals = embedding(table.buckets, buckets)  # (..., len_q, len_k, H)
    nd = vals.ndim
    axes = tuple(range(nd - 3)) + (nd - 1, nd - 3, nd - 2)
    return vals.transpose(axes)
