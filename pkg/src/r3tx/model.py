"""Encoder-decoder captioner built from R3 attention blocks."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import SR_MODES, R3Attention
from .autodiff import Tensor
from .errors import ConfigError, ContractError, RangeError
from .positional import (
    BiasTable,
    SpatioTemporalTables,
    bias_matrix,
    encode_text_positions,
    encode_video_positions,
)

PAD_ID, EOS_ID, MASK_ID = 0, 1, 2
MAX_CAPTION = 50


@dataclass
class R3Config:
    d_model: int = 128
    d_k: int = 32
    heads: int = 4
    K: int = 64
    beta: float = 0.25
    N: int = 4
    T: int = 50
    L_text: int = 50
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_ff: int = 256
    d_feat: int = 32
    vocab_size: int = 64
    mask_rate: float = 0.15
    dropout: float = 0.1
    similarity_dropout: float = 0.1
    learning_rate: float = 3e-4
    batch_size: int = 16
    num_buckets: int = 32
    max_distance: int = 128
    init_std: float = 0.02
    sr_mode: str = "quantized"
    seed: int = 0

    def validate(self) -> "R3Config":
        if self.d_model != self.heads * self.d_k:
            raise ConfigError(f"d_model {self.d_model} must equal heads {self.heads} * d_k {self.d_k}")
        if self.vocab_size <= MASK_ID:
            raise ConfigError("vocab_size must cover <pad>, </s> and <mask>")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigError("mask_rate must lie in [0, 1)")
        for name in ("dropout", "similarity_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.L_text > MAX_CAPTION:
            raise ConfigError(f"L_text is capped at {MAX_CAPTION}")
        if self.sr_mode not in SR_MODES:
            raise ConfigError(f"sr_mode must be one of {SR_MODES}")
        if self.num_buckets % 2:
            raise ConfigError("num_buckets must be even")
        for name in ("K", "N", "T", "encoder_layers", "decoder_layers", "d_ff", "d_feat", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        return self


@dataclass
class Batch:
    video: np.ndarray          # (B, Lv, d_feat)
    positions: np.ndarray      # (B, Lv, 5) = (t, x0, y0, x1, y1)
    video_mask: np.ndarray     # (B, Lv) bool
    captions: Optional[np.ndarray] = None      # (B, Lt) target ids ending in </s>, pad-filled
    caption_mask: Optional[np.ndarray] = None  # (B, Lt) bool

    @property
    def size(self) -> int:
        return self.video.shape[0]


def make_batch(records: Sequence, with_captions: bool = True) -> Batch:
    """Pad a list of episode records into one batch. Padding tokens sit at t=0, full box."""
    if not records:
        raise ContractError("make_batch: no records")
    B = len(records)
    Lv = max(len(r.features) for r in records)
    if Lv == 0:
        raise ContractError("make_batch: empty video")
    d_feat = records[0].features.shape[1]
    video = np.zeros((B, Lv, d_feat))
    pos = np.tile(np.array([0.0, 0.0, 0.0, 1.0, 1.0]), (B, Lv, 1))
    vmask = np.zeros((B, Lv), dtype=bool)
    for i, r in enumerate(records):
        n = len(r.features)
        video[i, :n] = r.features
        pos[i, :n] = r.positions
        vmask[i, :n] = True
    batch = Batch(video, pos, vmask)
    if with_captions:
        caps = [list(r.caption) + [EOS_ID] for r in records]
        Lt = max(len(c) for c in caps)
        if Lt > MAX_CAPTION:
            raise RangeError(f"caption of {Lt} tokens exceeds {MAX_CAPTION}")
        ids = np.full((B, Lt), PAD_ID, dtype=np.int64)
        cmask = np.zeros((B, Lt), dtype=bool)
        for i, c in enumerate(caps):
            ids[i, :len(c)] = c
            cmask[i, :len(c)] = True
        batch.captions, batch.caption_mask = ids, cmask
    return batch


def mask_text(tokens, rate: float, seed=None, special_ids: Sequence[int] = (PAD_ID, EOS_ID, MASK_ID)):
    """Replace each non-special token by <mask> independently with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"mask rate must lie in [0, 1), got {rate}")
    ids = np.array(tokens, dtype=np.int64)
    if rate == 0.0 or ids.size == 0:
        return ids
    rng = np.random.default_rng(seed)
    hit = (rng.random(ids.shape) < rate) & ~np.isin(ids, special_ids)
    return np.where(hit, MASK_ID, ids)


def shift_right(ids: np.ndarray) -> np.ndarray:
    """Prepend the begin-of-sentence id (= pad) and drop the last token."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.full_like(ids, PAD_ID)
    out[..., 1:] = ids[..., :-1]
    return out


def _param(rng, shape, std):
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


class _FeedForward:
    def __init__(self, d_model, d_ff, rng, std):
        self.w1, self.b1 = _param(rng, (d_model, d_ff), std), Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2, self.b2 = _param(rng, (d_ff, d_model), std), Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, x):
        return ad.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class _Norm:
    def __init__(self, d_model):
        self.gain = Tensor(np.ones(d_model), requires_grad=True)
        self.bias = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self):
        return {"gain": self.gain, "bias": self.bias}

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, 1e-5)


def _attention(cfg: R3Config, rng) -> R3Attention:
    return R3Attention(cfg.d_model, cfg.heads, cfg.d_k, cfg.K, rng, cfg.similarity_dropout,
                       cfg.beta, cfg.sr_mode, cfg.init_std)


class EncoderLayer:
    def __init__(self, cfg: R3Config, rng):
        self.attn = _attention(cfg, rng)
        self.norm1, self.ff, self.norm2 = _Norm(cfg.d_model), _FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.init_std), _Norm(cfg.d_model)

    def parameters(self):
        return {"attn": self.attn.parameters(), "norm1": self.norm1.parameters(),
                "ff": self.ff.parameters(), "norm2": self.norm2.parameters()}


class DecoderLayer:
    def __init__(self, cfg: R3Config, rng):
        self.self_attn = _attention(cfg, rng)
        self.cross_attn = _attention(cfg, rng)
        self.norm1, self.norm2, self.norm3 = _Norm(cfg.d_model), _Norm(cfg.d_model), _Norm(cfg.d_model)
        self.ff = _FeedForward(cfg.d_model, cfg.d_ff, rng, cfg.init_std)

    def parameters(self):
        return {"self_attn": self.self_attn.parameters(), "norm1": self.norm1.parameters(),
                "cross_attn": self.cross_attn.parameters(), "norm2": self.norm2.parameters(),
                "ff": self.ff.parameters(), "norm3": self.norm3.parameters()}


def _flatten(tree: dict, prefix: str = "") -> Dict[str, Tensor]:
    out = {}
    for k, v in tree.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


@dataclass
class EncoderOutput:
    states: Tensor
    pos_emb: Tensor
    mask: np.ndarray
    t_index: np.ndarray
    roles: Dict[str, np.ndarray] = field(default_factory=dict)
    loss_q: List[Tensor] = field(default_factory=list)


@dataclass
class DecoderOutput:
    logits: Tensor
    roles: Dict[str, np.ndarray] = field(default_factory=dict)
    loss_q: List[Tensor] = field(default_factory=list)


class R3Transformer:
    """Video encoder + caption decoder; every attention site is an R3 block.

    ``cfg.sr_mode == "ones"`` turns every block into plain relative-bias
    attention, i.e. the general-attention-only baseline.
    """

    def __init__(self, cfg: R3Config):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        std = cfg.init_std
        self.feat_w = _param(rng, (cfg.d_feat, cfg.d_model), std)
        self.feat_b = Tensor(np.zeros(cfg.d_model), requires_grad=True)
        self.tok_emb = _param(rng, (cfg.vocab_size, cfg.d_model), std)
        self.tables = SpatioTemporalTables.init(cfg.d_model, cfg.N, cfg.T, cfg.L_text, rng, std)
        self.enc_bias = BiasTable.init(cfg.num_buckets, cfg.heads, True, rng, std, cfg.max_distance)
        self.dec_self_bias = BiasTable.init(cfg.num_buckets, cfg.heads, False, rng, std, cfg.max_distance)
        self.dec_cross_bias = BiasTable.init(cfg.num_buckets, cfg.heads, True, rng, std, cfg.max_distance)
        self.encoder = [EncoderLayer(cfg, rng) for _ in range(cfg.encoder_layers)]
        self.decoder = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]
        self.out_w = _param(rng, (cfg.d_model, cfg.vocab_size), std)
        self.out_b = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)

    def named_parameters(self) -> Dict[str, Tensor]:
        tree = {
            "feat_w": self.feat_w, "feat_b": self.feat_b, "tok_emb": self.tok_emb,
            "pos": self.tables.parameters(),
            "bias": {"enc": self.enc_bias.buckets, "dec_self": self.dec_self_bias.buckets,
                     "dec_cross": self.dec_cross_bias.buckets},
            "enc": {str(i): layer.parameters() for i, layer in enumerate(self.encoder)},
            "dec": {str(i): layer.parameters() for i, layer in enumerate(self.decoder)},
            "out_w": self.out_w, "out_b": self.out_b,
        }
        return _flatten(tree)

    def quantize_sites(self) -> List[str]:
        sites = [f"enc{i}.self" for i in range(len(self.encoder))]
        for i in range(len(self.decoder)):
            sites += [f"dec{i}.self", f"dec{i}.cross"]
        return sites

    def zero_grad(self) -> None:
        ad.zero_grad(self.named_parameters().values())

    # ------------------------------------------------------------ forward

    def encode(self, batch: Batch, training: bool = False, rng=None) -> EncoderOutput:
        cfg = self.cfg
        if batch.video.shape[1] == 0 or not batch.video_mask.any(axis=1).all():
            raise ContractError("encode: empty video")
        rate = cfg.dropout if training else 0.0
        mask = batch.video_mask
        t_idx = batch.positions[..., 0].astype(np.int64)
        pos = encode_video_positions(batch.positions, self.tables)
        x = Tensor(batch.video) @ self.feat_w + self.feat_b
        bias = bias_matrix(t_idx.shape[1], t_idx.shape[1], self.enc_bias, t_idx, t_idx)
        out = EncoderOutput(x, pos, mask, t_idx)
        for i, layer in enumerate(self.encoder):
            a = layer.attn(x, x, q_pos=pos, k_pos=pos, bias=bias, key_mask=mask, q_valid=mask,
                           training=training, rng=rng)
            x = layer.norm1(x + ad.dropout(a.out, rate, rng, training))
            x = layer.norm2(x + ad.dropout(layer.ff(x), rate, rng, training))
            if a.indices is not None:
                out.roles[f"enc{i}.self"] = a.indices
                out.loss_q.append(a.loss_q)
        out.states = x
        return out

    def decode(self, inputs: np.ndarray, enc: EncoderOutput, training: bool = False, rng=None,
               valid: Optional[np.ndarray] = None) -> DecoderOutput:
        """Run the decoder on already-shifted input ids (B, Lt)."""
        cfg = self.cfg
        inputs = np.asarray(inputs, dtype=np.int64)
        Lt = inputs.shape[-1]
        if Lt > cfg.L_text:
            raise RangeError(f"decoder input of {Lt} tokens exceeds {cfg.L_text}")
        rate = cfg.dropout if training else 0.0
        text_pos = encode_text_positions(Lt, self.tables)
        q_index = np.arange(Lt)
        self_bias = bias_matrix(Lt, Lt, self.dec_self_bias)
        Lv = enc.t_index.shape[-1]
        cross_bias = bias_matrix(Lt, Lv, self.dec_cross_bias, q_index, enc.t_index)
        x = ad.embedding(self.tok_emb, inputs)
        out = DecoderOutput(x)
        for i, layer in enumerate(self.decoder):
            a = layer.self_attn(x, x, q_pos=text_pos, k_pos=text_pos, bias=self_bias, causal=True,
                                q_valid=valid, training=training, rng=rng)
            x = layer.norm1(x + ad.dropout(a.out, rate, rng, training))
            c = layer.cross_attn(x, enc.states, q_pos=text_pos, k_pos=enc.pos_emb, bias=cross_bias,
                                 key_mask=enc.mask, q_valid=valid, training=training, rng=rng)
            x = layer.norm2(x + ad.dropout(c.out, rate, rng, training))
            x = layer.norm3(x + ad.dropout(layer.ff(x), rate, rng, training))
            for site, att in ((f"dec{i}.self", a), (f"dec{i}.cross", c)):
                if att.indices is not None:
                    out.roles[site] = att.indices
                    out.loss_q.append(att.loss_q)
        out.logits = x @ self.out_w + self.out_b
        return out

    def decoder_forward(self, masked_ids: np.ndarray, enc: EncoderOutput, training: bool = False,
                        rng=None, valid: Optional[np.ndarray] = None) -> DecoderOutput:
        masked_ids = np.asarray(masked_ids, dtype=np.int64)
        if masked_ids.shape[-1] > MAX_CAPTION:
            raise RangeError(f"caption of {masked_ids.shape[-1]} tokens exceeds {MAX_CAPTION}")
        return self.decode(shift_right(masked_ids), enc, training, rng, valid)


def training_loss(model: R3Transformer, batch: Batch, training: bool = True, seed=None) -> dict:
    """Cross-entropy on unmasked targets given a masked, shifted caption, plus every VQ loss.

    Returns tensors ``total``, ``ce`` and ``l_q`` with total = ce + l_q, along
    with the role indices chosen at every quantize site.
    """
    if batch.captions is None:
        raise ContractError("training_loss: batch has no captions")
    if not batch.caption_mask.any():
        raise ContractError("training_loss: every caption position is padding")
    rng = np.random.default_rng(seed)
    masked = mask_text(batch.captions, model.cfg.mask_rate if training else 0.0, rng)
    enc = model.encode(batch, training, rng)
    dec = model.decoder_forward(masked, enc, training, rng, batch.caption_mask)
    ce = ad.cross_entropy(dec.logits, batch.captions, batch.caption_mask)
    parts = enc.loss_q + dec.loss_q
    l_q = Tensor(0.0)
    for part in parts:
        l_q = l_q + part
    roles = dict(enc.roles)
    roles.update(dec.roles)
    return {"total": ce + l_q, "ce": ce, "l_q": l_q, "roles": roles, "logits": dec.logits}


def token_accuracy(model: R3Transformer, batch: Batch) -> float:
    """Teacher-forced next-token accuracy on unmasked captions, evaluation mode."""
    with ad.no_grad():
        enc = model.encode(batch)
        logits = model.decoder_forward(batch.captions, enc).logits.data
    pred = logits.argmax(axis=-1)
    m = batch.caption_mask
    return float((pred[m] == batch.captions[m]).mean())


@dataclass
class Generation:
    tokens: List[List[int]]
    roles: List[Dict[str, np.ndarray]]   # per example: site -> (steps, H)


def generate_greedy(model: R3Transformer, batch: Batch, max_len: int = MAX_CAPTION,
                    enc: Optional[EncoderOutput] = None) -> Generation:
    """Argmax decoding from <bos> until </s> or ``max_len`` tokens, no penalties.

    The running prefix is fed unmasked. Roles chosen at every decoder quantize
    site for the position that emitted each kept token are returned alongside.
    """
    if max_len > MAX_CAPTION or max_len > model.cfg.L_text:
        raise RangeError(f"max_len {max_len} exceeds {min(MAX_CAPTION, model.cfg.L_text)}")
    B = batch.size
    with ad.no_grad():
        if enc is None:
            enc = model.encode(batch)
        inputs = np.full((B, 1), PAD_ID, dtype=np.int64)
        tokens: List[List[int]] = [[] for _ in range(B)]
        roles: List[Dict[str, list]] = [{} for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            dec = model.decode(inputs, enc)
            nxt = dec.logits.data[:, -1, :].argmax(axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == EOS_ID:
                    done[b] = True
                    continue
                tokens[b].append(int(nxt[b]))
                for site, idx in dec.roles.items():
                    roles[b].setdefault(site, []).append(idx[b, -1])
            if done.all():
                break
            inputs = np.concatenate([inputs, nxt[:, None]], axis=1)
    H = model.cfg.heads
    packed = [{site: np.array(v, dtype=np.int64).reshape(-1, H) for site, v in r.items()} for r in roles]
    if model.cfg.sr_mode != "ones":
        sites = [s for s in model.quantize_sites() if s.startswith("dec")]
        for r in packed:
            for s in sites:
                r.setdefault(s, np.zeros((0, H), dtype=np.int64))
    return Generation(tokens, packed)


def config_fields() -> List[str]:
    return [f.name for f in fields(R3Config)]
