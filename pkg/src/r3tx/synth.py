"""Toy grounded-captioning world.

An episode is a short sequence of (agent, action, patient) events. Each event
occupies one two-slot window over a G x G grid, so every event contributes
2 * G * G voxel tokens. The caption is produced from the same event list by a
tiny grammar, which also emits the part-of-speech tag of every word.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, FormatError, OOVError, ValidationError

TAGS = ("NOUN", "VERB", "DET", "ADP", "ADJ", "OTHER")
TAG_CODE = {t: i for i, t in enumerate(TAGS)}

COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "white", "black")
SHAPES = ("cube", "ball", "plate", "bowl", "cup", "cone", "box", "ring", "pan", "pot")

# action -> words between the agent phrase and the patient phrase
ACTION_TEMPLATES: Dict[str, Tuple[Tuple[str, str], ...]] = {
    "move-to": (("moves", "VERB"), ("to", "ADP")),
    "pick-up": (("picks", "VERB"), ("up", "ADP")),
    "place-on": (("is", "OTHER"), ("placed", "VERB"), ("on", "ADP")),
    "stir": (("stirs", "VERB"),),
    "cut": (("cuts", "VERB"),),
    "combine": (("combines", "VERB"), ("with", "ADP")),
}
CONNECTIVE = ("then", "OTHER")
SPECIALS = ("<pad>", "</s>", "<mask>")

# feature channel layout
_SHAPE0 = 0
_COLOR0 = _SHAPE0 + len(SHAPES)
_ACTION0 = _COLOR0 + len(COLORS)
_AGENT = _ACTION0 + len(ACTION_TEMPLATES)
_PATIENT, _DISTRACTOR, _OCCUPIED, _DX, _DY, _PHASE, _CLOCK = range(_AGENT + 1, _AGENT + 8)
MIN_FEAT = _CLOCK + 1


def lexicon() -> Dict[str, str]:
    """Every grammar word mapped to its (unique) tag."""
    words = {"the": "DET", CONNECTIVE[0]: CONNECTIVE[1]}
    words.update({c: "ADJ" for c in COLORS})
    words.update({s: "NOUN" for s in SHAPES})
    for template in ACTION_TEMPLATES.values():
        words.update(dict(template))
    return words


class Vocabulary:
    """Closed word-level vocabulary: the three specials followed by the sorted lexicon."""

    def __init__(self, words: Optional[Sequence[str]] = None):
        lex = lexicon()
        words = sorted(lex) if words is None else list(words)
        self.itos: List[str] = list(SPECIALS) + words
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.tags = {w: lex.get(w, "OTHER") for w in words}

    def __len__(self) -> int:
        return len(self.itos)

    def tokenize(self, text: str) -> List[int]:
        out = []
        for w in text.split():
            if w not in self.stoi:
                raise OOVError(w)
            out.append(self.stoi[w])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[int(i)] for i in ids)

    def words(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[int(i)] for i in ids]

    def tag_ids(self, ids: Sequence[int]) -> List[str]:
        return [self.tags.get(self.itos[int(i)], "OTHER") for i in ids]


@dataclass
class WorldSpec:
    grid: int = 3
    slots_per_event: int = 2
    timesteps: int = 50
    colors: Tuple[str, ...] = COLORS
    shapes: Tuple[str, ...] = SHAPES
    actions: Tuple[str, ...] = tuple(ACTION_TEMPLATES)
    min_events: int = 1
    max_events: int = 4
    distractor_prob: float = 0.5
    d_feat: int = 32
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> "WorldSpec":
        if not self.actions:
            raise ConfigError("world needs at least one action")
        unknown = [a for a in self.actions if a not in ACTION_TEMPLATES]
        if unknown:
            raise ConfigError(f"unknown actions {unknown}")
        if len(self.colors) * len(self.shapes) < 3:
            raise ConfigError("need at least three distinct entities")
        if any(c not in COLORS for c in self.colors) or any(s not in SHAPES for s in self.shapes):
            raise ConfigError("colors and shapes must come from the grammar lexicon")
        if not 1 <= self.min_events <= self.max_events:
            raise ConfigError("need 1 <= min_events <= max_events")
        if self.grid < 2 or self.grid * self.grid < 3:
            raise ConfigError("grid must hold at least three entities")
        if self.max_events * self.slots_per_event > self.timesteps:
            raise ConfigError("episodes do not fit into the temporal buckets")
        if self.d_feat < MIN_FEAT:
            raise ConfigError(f"d_feat must be at least {MIN_FEAT}")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ConfigError("distractor_prob must lie in [0, 1]")
        return self


@dataclass
class Event:
    agent: Tuple[str, str]    # (color, shape)
    action: str
    patient: Tuple[str, str]
    agent_cell: int
    patient_cell: int
    distractor: Optional[Tuple[str, str]] = None
    distractor_cell: int = -1


@dataclass
class EpisodeRecord:
    features: np.ndarray                  # (n, d_feat)
    positions: np.ndarray                 # (n, 5): t, x0, y0, x1, y1
    caption: Optional[List[int]] = None
    pos_tags: Optional[List[str]] = None
    seed: int = 0
    events: List[Event] = field(default_factory=list, compare=False, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        return (self.seed == other.seed and self.caption == other.caption
                and self.pos_tags == other.pos_tags
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.positions, other.positions))

    @property
    def verb_count(self) -> int:
        return sum(t == "VERB" for t in (self.pos_tags or ()))


def caption_words(events: Sequence[Event]) -> List[Tuple[str, str]]:
    """The (word, tag) sequence describing an event list."""
    out: List[Tuple[str, str]] = []
    for i, ev in enumerate(events):
        if i:
            out.append(CONNECTIVE)
        out += [("the", "DET"), (ev.agent[0], "ADJ"), (ev.agent[1], "NOUN")]
        out += list(ACTION_TEMPLATES[ev.action])
        out += [("the", "DET"), (ev.patient[0], "ADJ"), (ev.patient[1], "NOUN")]
    return out


def _sample_events(spec: WorldSpec, rng: np.random.Generator) -> List[Event]:
    n = int(rng.integers(spec.min_events, spec.max_events + 1))
    cells = spec.grid * spec.grid
    events = []
    for _ in range(n):
        ents: List[Tuple[str, str]] = []
        while len(ents) < 3:
            e = (spec.colors[rng.integers(len(spec.colors))], spec.shapes[rng.integers(len(spec.shapes))])
            if e not in ents:
                ents.append(e)
        agent, patient, other = ents
        where = rng.permutation(cells)[:3]
        action = spec.actions[rng.integers(len(spec.actions))]
        ev = Event(agent, action, patient, int(where[0]), int(where[1]))
        if rng.random() < spec.distractor_prob:
            ev.distractor, ev.distractor_cell = other, int(where[2])
        events.append(ev)
    return events


def _render(spec: WorldSpec, events: Sequence[Event], rng: np.random.Generator):
    G, S = spec.grid, spec.slots_per_event
    n_tok = len(events) * S * G * G
    feats = np.zeros((n_tok, spec.d_feat))
    pos = np.zeros((n_tok, 5))
    actions = list(ACTION_TEMPLATES)
    k = 0
    for e, ev in enumerate(events):
        ar, ac = divmod(ev.agent_cell, G)
        pr, pc = divmod(ev.patient_cell, G)
        for s in range(S):
            t = e * S + s
            for cell in range(G * G):
                r, c = divmod(cell, G)
                f = feats[k]
                pos[k] = (t, c / G, r / G, (c + 1) / G, (r + 1) / G)
                f[_PHASE] = s / max(S - 1, 1)
                f[_CLOCK] = (e + 1) / spec.max_events
                occupant = None
                if cell == ev.agent_cell:
                    occupant = ev.agent
                    f[_AGENT] = 1.0
                    f[_ACTION0 + actions.index(ev.action)] = 1.0
                    f[_DX] = (pc - ac) / G * s
                    f[_DY] = (pr - ar) / G * s
                elif cell == ev.patient_cell:
                    occupant = ev.patient
                    f[_PATIENT] = 1.0
                    f[_ACTION0 + actions.index(ev.action)] = 1.0
                elif cell == ev.distractor_cell and ev.distractor is not None:
                    occupant = ev.distractor
                    f[_DISTRACTOR] = 1.0
                if occupant is not None:
                    f[_OCCUPIED] = 1.0
                    f[_COLOR0 + COLORS.index(occupant[0])] = 1.0
                    f[_SHAPE0 + SHAPES.index(occupant[1])] = 1.0
                k += 1
    if spec.noise > 0:
        feats += rng.normal(0.0, spec.noise, feats.shape)
    return feats, pos


def generate_episode(spec: WorldSpec, seed: int, vocab: Optional[Vocabulary] = None) -> EpisodeRecord:
    """Sample and render one episode; a pure function of (spec, seed)."""
    spec.validate()
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng([spec.seed, seed])
    events = _sample_events(spec, rng)
    feats, pos = _render(spec, events, rng)
    words = caption_words(events)
    caption = [vocab.stoi[w] for w, _ in words]
    return EpisodeRecord(feats, pos, caption, [t for _, t in words], int(seed), events)


def generate_dataset(spec: WorldSpec, count: int, vocab: Optional[Vocabulary] = None,
                     first_seed: int = 0) -> List[EpisodeRecord]:
    vocab = vocab or Vocabulary()
    return [generate_episode(spec, first_seed + i, vocab) for i in range(count)]


def make_splits(records: Sequence, fractions=(0.8, 0.2), seed: int = 0,
                names: Sequence[str] = ("train", "eval")) -> Dict[str, list]:
    """Seeded shuffle, then consecutive slices sized by ``fractions``."""
    if not records:
        raise ContractError("make_splits: no records")
    if len(fractions) != len(names):
        raise ConfigError("one fraction per split name")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(records))
    n = len(records)
    bounds = np.floor(np.cumsum(fractions) * n + 1e-9).astype(int)
    bounds[-1] = n
    out, start = {}, 0
    for name, stop in zip(names, bounds):
        out[name] = [records[i] for i in order[start:stop]]
        start = stop
    return out


def split_indices(n: int, fractions=(0.8, 0.2), seed: int = 0,
                  names: Sequence[str] = ("train", "eval")) -> Dict[str, List[int]]:
    return {k: list(v) for k, v in make_splits(list(range(n)), fractions, seed, names).items()}


# ---------------------------------------------------------------- feature container

MAGIC = b"R3FEAT\x00\x00"
VERSION = 1


def save_feature_file(path, records: Sequence[EpisodeRecord]) -> None:
    """Write records in the little-endian feature container (see docs/formats.md)."""
    d_feat = records[0].features.shape[1] if records else 0
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<III", VERSION, d_feat, len(records)))
    for r in records:
        feats = np.asarray(r.features, dtype="<f8")
        if feats.shape[1] != d_feat:
            raise ValidationError("all records in one file must share d_feat")
        buf.write(struct.pack("<QI", r.seed, feats.shape[0]))
        block = np.concatenate([np.asarray(r.positions, dtype="<f8"), feats], axis=1)
        buf.write(block.astype("<f8").tobytes())
        if r.caption is None:
            buf.write(b"\x00")
            continue
        buf.write(b"\x01")
        buf.write(struct.pack("<I", len(r.caption)))
        buf.write(np.asarray(r.caption, dtype="<u4").tobytes())
        if r.pos_tags is None:
            buf.write(b"\x00")
        else:
            buf.write(b"\x01")
            buf.write(bytes(TAG_CODE[t] for t in r.pos_tags))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError("feature file is truncated")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def validate_record(r: EpisodeRecord, index: int, T: Optional[int] = None) -> None:
    pos = r.positions
    t, x0, y0, x1, y1 = (pos[:, i] for i in range(5))
    if np.any(t < 0) or np.any(t != np.floor(t)) or (T is not None and np.any(t >= T)):
        raise ValidationError(f"record {index}: temporal index out of range")
    if np.any(~((0 <= x0) & (x0 <= x1) & (x1 <= 1) & (0 <= y0) & (y0 <= y1) & (y1 <= 1))):
        raise ValidationError(f"record {index}: box outside the unit square")
    if not np.all(np.isfinite(r.features)):
        raise ValidationError(f"record {index}: non-finite feature")
    if r.pos_tags is not None and (r.caption is None or len(r.pos_tags) != len(r.caption)):
        raise ValidationError(f"record {index}: tag count differs from caption length")


def load_feature_file(path, T: Optional[int] = None) -> List[EpisodeRecord]:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a feature file (bad magic)")
    version, d_feat, count = rd.unpack("<III")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    records = []
    for i in range(count):
        seed, n = rd.unpack("<QI")
        block = np.frombuffer(rd.take(8 * n * (5 + d_feat)), dtype="<f8").reshape(n, 5 + d_feat)
        caption = tags = None
        (has_cap,) = rd.unpack("<B")
        if has_cap not in (0, 1):
            raise FormatError(f"{path}: bad caption flag in record {i}")
        if has_cap:
            (L,) = rd.unpack("<I")
            caption = np.frombuffer(rd.take(4 * L), dtype="<u4").astype(int).tolist()
            (has_tags,) = rd.unpack("<B")
            if has_tags:
                codes = rd.take(L)
                if any(c >= len(TAGS) for c in codes):
                    raise ValidationError(f"record {i}: unknown tag code")
                tags = [TAGS[c] for c in codes]
        rec = EpisodeRecord(block[:, 5:].astype(np.float64), block[:, :5].astype(np.float64),
                            caption, tags, int(seed))
        validate_record(rec, i, T)
        records.append(rec)
    if rd.off != len(rd.data):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return records
