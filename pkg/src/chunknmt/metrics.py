"""Corpus BLEU, chunk boundary/tag accuracy, and attention heatmap export."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Sequence[str]]) -> int:
    return min((len(r) for r in refs), key=lambda L: (abs(L - hyp_len), L))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        return [m / t if t else 0.0 for m, t in zip(self.matches, self.totals)]

    @property
    def brevity_penalty(self) -> float:
        if self.hyp_len == 0:
            return 0.0
        if self.hyp_len > self.ref_len:
            return 1.0
        return math.exp(1.0 - self.ref_len / self.hyp_len)


def bleu_stats(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]],
               max_n: int = 4, case_insensitive: bool = True) -> BleuStats:
    if not hypotheses:
        raise ValueError("empty hypothesis corpus")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} reference sets")
    fold = (lambda ts: [t.lower() for t in ts]) if case_insensitive else list
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp = fold(hyp)
        refs = [fold(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), refs)
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStats(matches, totals, hyp_len, ref_len)


def bleu(hypotheses, references, max_n: int = 4, case_insensitive: bool = True) -> float:
    """Corpus BLEU in percent, no smoothing.

    ``references`` holds one list of reference token lists per hypothesis.
    Orders for which the hypotheses contain no n-grams at all (every
    sentence shorter than n) are left out of the geometric mean.
    """
    st = bleu_stats(hypotheses, references, max_n, case_insensitive)
    orders = [(m, t) for m, t in zip(st.matches, st.totals) if t > 0]
    if not orders or any(m == 0 for m, _ in orders):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in orders) / len(orders)
    return 100.0 * st.brevity_penalty * math.exp(log_p)


def sentence_bleu_smoothed(hypothesis, references, max_n: int = 4,
                           case_insensitive: bool = True) -> float:
    """Diagnostic sentence BLEU with add-one smoothing for n >= 2."""
    st = bleu_stats([hypothesis], [references], max_n, case_insensitive)
    if st.matches[0] == 0:
        return 0.0
    log_p = math.log(st.matches[0] / st.totals[0])
    for m, t in zip(st.matches[1:], st.totals[1:]):
        log_p += math.log((m + 1) / (t + 1))
    return 100.0 * st.brevity_penalty * math.exp(log_p / max_n)


def boundary_accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    """Exact-match fraction over positions 2..T (the first position is forced)."""
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    scored = list(zip(predicted, gold))[1:]
    if not scored:
        return float("nan")
    return sum(int(p == g) for p, g in scored) / len(scored)


def tag_accuracy(predicted: Sequence, gold: Sequence) -> float:
    if len(predicted) != len(gold):
        raise ValueError(f"length mismatch: {len(predicted)} vs {len(gold)}")
    if not gold:
        return float("nan")
    return sum(int(p == g) for p, g in zip(predicted, gold)) / len(gold)


@dataclass
class EvalReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    n_sentences: int
    boundary_accuracy: float | None = None
    tag_accuracy: float | None = None
    free_boundary_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        for i, p in enumerate(d.pop("precisions"), start=1):
            d[f"precision_{i}"] = p
        d.update(extra)
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            if v is None:
                v = "NA"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=False)


def parse_report_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, v = (x.strip() for x in line.split("=", 1))
        if v == "NA":
            out[k] = None
        else:
            try:
                out[k] = int(v)
            except ValueError:
                out[k] = float(v)
    return out


def make_report(hypotheses, references, **accuracies) -> EvalReport:
    st = bleu_stats(hypotheses, references)
    score = bleu(hypotheses, references)
    return EvalReport(score, st.precisions, st.brevity_penalty, st.hyp_len, st.ref_len,
                      len(hypotheses), **accuracies)


# ---------------------------------------------------------------- alignment export


def _round_rows(weights: np.ndarray, decimals: int = 6) -> np.ndarray:
    """Round each row to ``decimals`` places so the rounded row still sums to 1.

    Largest-remainder rounding on integer units of 10**-decimals.
    """
    unit = 10 ** decimals
    out = np.zeros(weights.shape, dtype=np.int64)
    for i, row in enumerate(weights):
        scaled = row / row.sum() * unit
        base = np.floor(scaled).astype(np.int64)
        short = unit - int(base.sum())
        order = np.argsort(-(scaled - base), kind="stable")
        base[order[:short]] += 1
        out[i] = base
    return out


def export_alignment(trace, src_tokens: Sequence[str], tgt_tokens: Sequence[str]) -> str:
    """Heatmap as TSV: header row of source tokens, one row per target token.

    ``trace`` holds the attention weights each target step conditioned on,
    either as an array (T, J) or as (weights, scale) pairs.
    """
    rows = [w[0] if isinstance(w, tuple) else w for w in trace]
    weights = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)[:, :len(src_tokens)]
    if weights.shape[0] != len(tgt_tokens):
        raise ValueError(f"{weights.shape[0]} attention rows for {len(tgt_tokens)} target tokens")
    units = _round_rows(weights)
    lines = ["\t".join([""] + list(src_tokens))]
    for tok, row in zip(tgt_tokens, units):
        lines.append("\t".join([tok] + [f"{u // 1000000}.{u % 1000000:06d}" for u in row]))
    return "\n".join(lines) + "\n"


def read_alignment(text: str) -> tuple[list[str], list[str], np.ndarray]:
    lines = text.rstrip("\n").split("\n")
    src = lines[0].split("\t")[1:]
    tgt, vals = [], []
    for line in lines[1:]:
        cells = line.split("\t")
        tgt.append(cells[0])
        vals.append([float(c) for c in cells[1:]])
    return src, tgt, np.array(vals).reshape(len(tgt), len(src))
