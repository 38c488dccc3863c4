"""Generation traces, role-attraction statistics and predicate-stratified reports."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, FormatError, RangeError
from .metrics import metric_report

TRACE_FORMAT = "r3tx-trace"
TRACE_VERSION = 1
UNDEFINED = "undefined"
STRATA = (1, 2, 3, 4)


@dataclass
class GenerationTrace:
    id: int
    generated: List[str]
    reference: List[str] = field(default_factory=list)
    roles: Dict[str, np.ndarray] = field(default_factory=dict)   # site -> (len(generated), H)
    generated_tags: List[str] = field(default_factory=list)
    reference_tags: List[str] = field(default_factory=list)

    def __post_init__(self):
        for site, arr in self.roles.items():
            if len(arr) != len(self.generated):
                raise ContractError(f"trace {self.id}: site {site} has {len(arr)} role steps "
                                    f"for {len(self.generated)} generated tokens")

    @property
    def predicates(self) -> int:
        return sum(t == "VERB" for t in self.reference_tags)


def role_word_probability(traces: Sequence[GenerationTrace], site: str, head: int = 0
                          ) -> Dict[str, Tuple[int, float]]:
    """For each generated word, the most frequent role at (site, head) and its share.

    Ties between roles resolve to the lowest role id.
    """
    if not traces:
        raise ContractError("role_word_probability: no traces")
    counts: Dict[str, Counter] = defaultdict(Counter)
    seen_site = False
    for tr in traces:
        if site not in tr.roles:
            continue
        seen_site = True
        arr = np.asarray(tr.roles[site])
        if arr.size and not 0 <= head < arr.shape[1]:
            raise RangeError(f"head {head} outside [0, {arr.shape[1]})")
        for word, row in zip(tr.generated, arr):
            counts[word][int(row[head])] += 1
    if not seen_site:
        raise RangeError(f"unknown quantize site {site!r}")
    out = {}
    for word, c in counts.items():
        best = max(c.values())
        role = min(k for k, v in c.items() if v == best)
        out[word] = (role, best / sum(c.values()))
    return out


def word_frequency(traces: Sequence[GenerationTrace]) -> Dict[str, int]:
    """Word counts over the reference captions."""
    c: Counter = Counter()
    for tr in traces:
        c.update(tr.reference)
    return dict(c)


def predicate_stratify(examples: Sequence[GenerationTrace], min_predicates: int) -> List[GenerationTrace]:
    """Examples whose reference holds at least ``min_predicates`` VERB tags."""
    if min_predicates not in STRATA:
        raise RangeError(f"min_predicates must be one of {STRATA}")
    return [ex for ex in examples if ex.predicates >= min_predicates]


def evaluate_traces(traces: Sequence[GenerationTrace], strata: Sequence[int] = STRATA) -> Dict[str, dict]:
    """Metric reports for the full corpus and each non-empty predicate stratum."""
    if not traces:
        raise ContractError("evaluate_traces: no traces")
    out = {"all": metric_report([t.generated for t in traces], [t.reference for t in traces])}
    for m in strata:
        sub = predicate_stratify(traces, m)
        if sub:
            out[f"min{m}"] = metric_report([t.generated for t in sub], [t.reference for t in sub])
    return out


def improvement_report(model: Dict[str, dict], baseline: Dict[str, dict]) -> Dict[str, dict]:
    """Per stratum and metric: 100 * (model - baseline) / baseline, or 'undefined' at a zero baseline."""
    if set(model) != set(baseline):
        raise ContractError(f"strata differ: {sorted(model)} vs {sorted(baseline)}")
    out = {}
    for stratum in model:
        row = {}
        for metric, value in model[stratum].items():
            if metric == "count":
                continue
            base = baseline[stratum].get(metric)
            if value is None or base is None or base == 0:
                row[metric] = UNDEFINED
            else:
                row[metric] = 100.0 * (value - base) / base
        out[stratum] = row
    return out


# ---------------------------------------------------------------- files

def write_traces(path, traces: Sequence[GenerationTrace], sites: Sequence[str], heads: int) -> None:
    """JSON lines: a header object, then one object per example."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": TRACE_FORMAT, "version": TRACE_VERSION,
                             "sites": list(sites), "heads": heads}) + "\n")
        for tr in traces:
            fh.write(json.dumps({
                "id": tr.id, "generated": tr.generated, "reference": tr.reference,
                "generated_tags": tr.generated_tags, "reference_tags": tr.reference_tags,
                "roles": {s: np.asarray(a).tolist() for s, a in tr.roles.items()},
            }) + "\n")


def read_traces(path) -> Tuple[dict, List[GenerationTrace]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read trace dump {path}: {exc}") from None
    if not lines:
        raise FormatError(f"{path}: empty trace dump")
    try:
        header = json.loads(lines[0])
        if header.get("format") != TRACE_FORMAT or header.get("version") != TRACE_VERSION:
            raise FormatError(f"{path}: not a version-{TRACE_VERSION} trace dump")
        traces = []
        heads = header["heads"]
        for line in lines[1:]:
            obj = json.loads(line)
            roles = {s: np.asarray(a, dtype=np.int64).reshape(-1, heads) for s, a in obj["roles"].items()}
            traces.append(GenerationTrace(obj["id"], obj["generated"], obj["reference"], roles,
                                          obj.get("generated_tags", []), obj.get("reference_tags", [])))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed trace dump ({exc})") from None
    return header, traces


def _fmt(v) -> str:
    if v is None:
        return UNDEFINED
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(path, reports: Dict[str, dict]) -> None:
    """One ``stratum.metric=value`` line per entry."""
    with open(path, "w") as fh:
        for stratum, rep in reports.items():
            for metric, value in rep.items():
                fh.write(f"{stratum}.{metric}={_fmt(value)}\n")


def write_report_csv(path, reports: Dict[str, dict]) -> None:
    metrics: List[str] = []
    for rep in reports.values():
        metrics += [m for m in rep if m not in metrics]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stratum"] + metrics)
        for stratum, rep in reports.items():
            w.writerow([stratum] + [_fmt(rep.get(m)) for m in metrics])


def read_report(path) -> Dict[str, dict]:
    out: Dict[str, dict] = defaultdict(dict)
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        stratum, _, metric = key.rpartition(".")
        if value == UNDEFINED:
            out[stratum][metric] = None
        else:
            out[stratum][metric] = int(value) if metric == "count" else float(value)
    return dict(out)


def write_role_tables(out_dir, traces: Sequence[GenerationTrace], site: str, head: int) -> Tuple[Path, Path]:
    """Plot-ready CSVs: word -> (role, probability) and word -> reference frequency."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probs = role_word_probability(traces, site, head)
    freq = word_frequency(traces)
    p1, p2 = out_dir / "role_probability.csv", out_dir / "word_frequency.csv"
    with open(p1, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "role", "probability", "site", "head"])
        for word in sorted(probs, key=lambda k: (-probs[k][1], k)):
            role, p = probs[word]
            w.writerow([word, role, f"{p:.6f}", site, head])
    with open(p2, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "count"])
        for word in sorted(freq, key=lambda k: (-freq[k], k)):
            w.writerow([word, freq[word]])
    return p1, p2


def mean_or_nan(values) -> float:
    values = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(values)) if values else float("nan")
