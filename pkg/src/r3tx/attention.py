"""Role-quantized attention bound to relative-bias attention (R3 multi-head attention).

Two attention branches see the same inputs with independent weights. The
special branch adds absolute position embeddings, runs scaled dot-product
attention and snaps every per-head output onto the nearest row of a shared
role codebook. The general branch is unscaled attention with a learned
relative-position bias. Their per-head outputs are multiplied elementwise,
merged across heads and linearly projected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, RangeError

SR_MODES = ("quantized", "continuous", "ones")


@dataclass
class RoleCodebook:
    """K x d_k role embeddings shared by every head of one layer.

    Rows are stored raw and L2-normalised at lookup time.
    """

    weight: Tensor
    similarity_dropout_rate: float = 0.1

    @classmethod
    def init(cls, K: int, d_k: int, rng: np.random.Generator,
             similarity_dropout_rate: float = 0.1) -> "RoleCodebook":
        return cls(Tensor(rng.normal(0.0, 1.0, (K, d_k)), requires_grad=True), similarity_dropout_rate)

    @property
    def K(self) -> int:
        return self.weight.shape[0]


@dataclass
class QuantizationResult:
    z_q: Tensor
    indices: np.ndarray
    loss_q: Tensor


def quantize(x: Tensor, codebook: RoleCodebook, training: bool = False, seed=None,
             beta: float = 0.25, valid: Optional[np.ndarray] = None,
             normalize: bool = True) -> QuantizationResult:
    """Snap each trailing-axis vector of ``x`` to its most similar codebook row.

    The forward value of ``z_q`` is exactly the selected (normalised) row; its
    adjoint is passed straight to ``x``. ``loss_q`` is the dictionary term plus
    ``beta`` times the commitment term, averaged over the positions flagged in
    ``valid`` (all positions by default). During training a fraction of the
    similarities is dropped before the argmax. Ties go to the lowest index.
    """
    E = codebook.weight
    if x.shape[-1] != E.shape[1]:
        raise DimensionError(f"quantize: vector width {x.shape[-1]} vs codebook width {E.shape[1]}")
    xn = ad.l2_normalize(x) if normalize else x
    en = ad.l2_normalize(E) if normalize else E
    rate = codebook.similarity_dropout_rate

    def select():
        sims = xn.data @ en.data.T
        if training and rate > 0.0:
            rng = np.random.default_rng(seed)
            keep = rng.random(sims.shape) >= rate
            keep[~keep.any(axis=-1)] = True
            sims = np.where(keep, sims, -np.inf)
        return sims.argmax(axis=-1)
    idx = ad.frozen(select)
    e_sel = ad.embedding(en, idx)
    z_q = ad.straight_through(xn, e_sel)

    w = np.ones(idx.shape) if valid is None else np.broadcast_to(valid, idx.shape).astype(np.float64)
    count = w.sum()
    dictionary = ad.tsum(ad.square(ad.stop_gradient(xn) - e_sel), axis=-1)
    commitment = ad.tsum(ad.square(xn - ad.stop_gradient(e_sel)), axis=-1)
    per_position = dictionary + beta * commitment
    if count == 0:
        loss = ad.mul(ad.tsum(per_position), 0.0)
    else:
        loss = ad.mul(ad.tsum(per_position * w), 1.0 / count)
    return QuantizationResult(z_q, idx, loss)


def codebook_stats(indices, K: int) -> dict:
    """Usage histogram and perplexity exp(H) of the empirical role distribution."""
    flat = np.asarray(indices, dtype=np.int64).reshape(-1)
    if flat.size == 0:
        raise ContractError("codebook_stats: no indices given")
    if flat.min() < 0 or flat.max() >= K:
        raise RangeError(f"codebook_stats: index outside [0, {K})")
    hist = np.bincount(flat, minlength=K)
    p = hist[hist > 0] / flat.size
    return {"histogram": hist, "perplexity": float(np.exp(-(p * np.log(p)).sum()))}


@dataclass
class BranchWeights:
    """Per-head projections stored side by side: column block h is head h."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    heads: int

    @classmethod
    def init(cls, d_model: int, heads: int, d_k: int, rng: np.random.Generator,
             std: float = 0.02) -> "BranchWeights":
        def w():
            return Tensor(rng.normal(0.0, std, (d_model, heads * d_k)), requires_grad=True)
        return cls(w(), w(), w(), heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, width = x.shape
    return ad.swapaxes(x.reshape(*lead, L, heads, width // heads), -2, -3)


def project_qkv(q_in: Tensor, k_in: Tensor, v_in: Tensor, w: BranchWeights):
    """Per-head linear maps without bias; returns tensors shaped (..., H, len, d_k)."""
    d_model = w.wq.shape[0]
    for name, t in (("Q_in", q_in), ("K_in", k_in), ("V_in", v_in)):
        if t.shape[-1] != d_model:
            raise DimensionError(f"project_qkv: {name} width {t.shape[-1]} vs weights {w.wq.shape}")
    return (_split_heads(q_in @ w.wq, w.heads), _split_heads(k_in @ w.wk, w.heads),
            _split_heads(v_in @ w.wv, w.heads))


def _attention_mask(len_q: int, len_k: int, key_mask: Optional[np.ndarray], causal: bool):
    mask = None
    if causal:
        mask = np.tril(np.ones((len_q, len_k), dtype=bool))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        mask = km if mask is None else (km & mask)
    return mask


def special_relativity(Q: Tensor, K: Tensor, V: Tensor, key_mask: Optional[np.ndarray] = None,
                       causal: bool = False) -> Tensor:
    """Scaled dot-product attention per head."""
    if K.shape[-2] == 0:
        raise ContractError("special_relativity: empty context")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"special_relativity: {K.shape[-2]} keys vs {V.shape[-2]} values")
    d_k = Q.shape[-1]
    scores = ad.mul(Q @ ad.swapaxes(K, -1, -2), 1.0 / math.sqrt(d_k))
    mask = _attention_mask(Q.shape[-2], K.shape[-2], key_mask, causal)
    return ad.softmax(scores, -1, mask) @ V


def general_relativity(Q: Tensor, K: Tensor, V: Tensor, bias, causal: bool = False,
                       key_mask: Optional[np.ndarray] = None) -> Tensor:
    """Unscaled dot-product attention with an additive per-head bias before the softmax."""
    if K.shape[-2] == 0:
        raise ContractError("general_relativity: empty context")
    scores = Q @ ad.swapaxes(K, -1, -2)
    bias = ad.as_tensor(bias)
    try:
        np.broadcast_shapes(scores.shape, bias.shape)
    except ValueError:
        raise DimensionError(f"general_relativity: bias {bias.shape} vs scores {scores.shape}") from None
    mask = _attention_mask(Q.shape[-2], K.shape[-2], key_mask, causal)
    return ad.softmax(scores + bias, -1, mask) @ V


def r3_bind(z_q: Tensor, x_g: Tensor, w_o: Tensor) -> Tensor:
    """Hadamard-bind (..., len, H, d_k) role and context outputs, concat heads, project."""
    if z_q.shape != x_g.shape:
        raise DimensionError(f"r3_bind: {z_q.shape} vs {x_g.shape}")
    *lead, L, H, dk = x_g.shape
    if w_o.shape[0] != H * dk:
        raise DimensionError(f"r3_bind: merged width {H * dk} vs W_o {w_o.shape}")
    return (z_q * x_g).reshape(*lead, L, H * dk) @ w_o


@dataclass
class AttentionOutput:
    out: Tensor
    indices: Optional[np.ndarray]   # (..., len_q, H) role ids, None without quantization
    loss_q: Optional[Tensor]


class R3Attention:
    """One R3 multi-head attention block (self, causal-self or cross)."""

    def __init__(self, d_model: int, heads: int, d_k: int, K: int, rng: np.random.Generator,
                 similarity_dropout: float = 0.1, beta: float = 0.25, sr_mode: str = "quantized",
                 init_std: float = 0.02):
        if d_model != heads * d_k:
            raise DimensionError(f"d_model {d_model} != heads {heads} * d_k {d_k}")
        if sr_mode not in SR_MODES:
            raise ValueError(f"sr_mode must be one of {SR_MODES}")
        self.heads, self.d_k, self.beta, self.sr_mode = heads, d_k, beta, sr_mode
        self.special = BranchWeights.init(d_model, heads, d_k, rng, init_std)
        self.general = BranchWeights.init(d_model, heads, d_k, rng, init_std)
        self.codebook = RoleCodebook.init(K, d_k, rng, similarity_dropout)
        self.w_o = Tensor(rng.normal(0.0, init_std, (heads * d_k, d_model)), requires_grad=True)

    def parameters(self) -> dict:
        return {
            "sr.wq": self.special.wq, "sr.wk": self.special.wk, "sr.wv": self.special.wv,
            "gr.wq": self.general.wq, "gr.wk": self.general.wk, "gr.wv": self.general.wv,
            "codebook": self.codebook.weight, "wo": self.w_o,
        }

    def __call__(self, q_in: Tensor, kv_in: Tensor, *, q_pos=None, k_pos=None, bias=None,
                 key_mask: Optional[np.ndarray] = None, q_valid: Optional[np.ndarray] = None,
                 causal: bool = False, training: bool = False, rng=None) -> AttentionOutput:
        Qg, Kg, Vg = project_qkv(q_in, kv_in, kv_in, self.general)
        x_g = general_relativity(Qg, Kg, Vg, 0.0 if bias is None else bias, causal, key_mask)
        x_g = ad.swapaxes(x_g, -2, -3)  # (..., L, H, d_k)

        indices = loss_q = None
        if self.sr_mode == "ones":
            role = Tensor(np.ones(x_g.shape))
        else:
            qs = q_in if q_pos is None else q_in + q_pos
            ks = kv_in if k_pos is None else kv_in + k_pos
            Qs, Ks, Vs = project_qkv(qs, ks, ks, self.special)
            x_s = ad.swapaxes(special_relativity(Qs, Ks, Vs, key_mask, causal), -2, -3)
            valid = None if q_valid is None else np.asarray(q_valid, dtype=bool)[..., None]
            qr = quantize(x_s, self.codebook, training, rng, self.beta, valid)
            indices, loss_q = qr.indices, qr.loss_q
            role = qr.z_q if self.sr_mode == "quantized" else x_s
        return AttentionOutput(r3_bind(role, x_g, self.w_o), indices, loss_q)
