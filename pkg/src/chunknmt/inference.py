"""Greedy and beam-search decoding, with the boundary gate inside the search.

PAD and BOS are never proposed as output tokens; their probability mass is
simply left out (no renormalization), so every score is a model log-probability.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS, PAD
from .model import BiScaleState, Seq2Seq

GATE_MODES = ("in-beam", "argmax")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    boundaries: list[int] = field(default_factory=list)
    score: float = 0.0
    trace: list[tuple[np.ndarray, str]] = field(default_factory=list)
    tags: list[int] = field(default_factory=list)
    finished: bool = False
    state: BiScaleState | None = None

    def normalized(self, len_norm: float) -> float:
        if not len_norm or not self.tokens:
            return self.score
        return self.score / len(self.tokens) ** len_norm

    def extend(self, y: int, b: int, logp: float, alpha: np.ndarray, scale: str,
               tag: int | None) -> "Hypothesis":
        return Hypothesis(self.tokens + [y], self.boundaries + [b], self.score + logp,
                          self.trace + [(alpha, scale)],
                          self.tags + ([tag] if tag is not None else []), y == EOS)


def _word_logp(logits: np.ndarray) -> np.ndarray:
    logp = _log_softmax(logits)
    logp[:, [PAD, BOS]] = -np.inf
    return logp


def _tag_lookup(out) -> dict[int, int]:
    if out.tag_logits is None:
        return {}
    pred = out.tag_logits.data.argmax(axis=-1)
    return {int(r): int(k) for r, k in zip(out.tag_rows, pred)}


def greedy_decode_batch(model: Seq2Seq, src_batch, max_len: int = 100,
                        src_mask: np.ndarray | None = None) -> list[Hypothesis]:
    """Per step: gate argmax (first step forced open), then word argmax."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ann, state, y_prev = model.start(src_batch, src_mask)
    B = ann.rows
    hyps = [Hypothesis() for _ in range(B)]
    for _ in range(max_len):
        state, out = model.decoder_step(state, y_prev, ann)
        logp = _word_logp(out.logits.data)
        y = logp.argmax(axis=-1)
        tags = _tag_lookup(out)
        for i, h in enumerate(hyps):
            if h.finished:
                continue
            hyps[i] = h.extend(int(y[i]), int(out.boundary[i]), float(logp[i, y[i]]),
                               out.alpha[i].copy(), out.scale, tags.get(i))
        if all(h.finished for h in hyps):
            break
        y_prev = y
    return hyps


def greedy_decode(model: Seq2Seq, src, max_len: int = 100) -> Hypothesis:
    return greedy_decode_batch(model, np.asarray(src, dtype=np.int64)[None], max_len)[0]


def beam_search(model: Seq2Seq, src, beam: int = 5, max_len: int = 100,
                gate_mode: str = "in-beam", len_norm: float = 1.0) -> list[Hypothesis]:
    """Return hypotheses ranked by ``score / len**len_norm``.

    In ``in-beam`` mode each live hypothesis branches over both gate values
    and the gate log-probability joins the score; in ``argmax`` mode the
    gate is decided greedily and only word terms are scored. Finished
    hypotheses are returned when any exist, otherwise the surviving
    unfinished ones.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if gate_mode not in GATE_MODES:
        raise ValueError(f"gate_mode must be one of {GATE_MODES}")
    src = np.asarray(src, dtype=np.int64).reshape(1, -1)
    ann, state, _ = model.start(src)
    biscale = model.config.biscale
    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for t in range(max_len):
        n = len(live)
        branch = biscale and gate_mode == "in-beam" and t > 0
        if branch:
            parent = np.repeat(np.arange(n), 2)
            bits = np.tile(np.array([0, 1]), n)
        else:
            parent = np.arange(n)
            bits = None
        rows_state = state.select(parent)
        rows_ann = ann.select(np.zeros(parent.size, dtype=np.int64))
        y_prev = np.array([live[i].tokens[-1] if live[i].tokens else BOS for i in parent])
        new_state, out = model.decoder_step(rows_state, y_prev, rows_ann, bits)
        logp = _word_logp(out.logits.data)
        base = np.array([live[i].score for i in parent])
        if branch:
            gate_logp = _log_softmax(out.boundary_logits.data)
            base = base + gate_logp[np.arange(parent.size), bits]
        cand = base[:, None] + logp
        V = cand.shape[1]
        flat = cand.ravel()
        order = np.argsort(-flat, kind="stable")[:beam]
        order = order[np.isfinite(flat[order])]
        tags = _tag_lookup(out)
        next_live, keep_rows = [], []
        for idx in order:
            r, y = divmod(int(idx), V)
            h = live[parent[r]]
            step_logp = float(flat[idx]) - h.score
            child = h.extend(y, int(out.boundary[r]), step_logp, out.alpha[r].copy(),
                             out.scale, tags.get(r))
            child.score = float(flat[idx])
            if child.finished:
                finished.append(child)
            else:
                next_live.append(child)
                keep_rows.append(r)
        if not next_live:
            live = []
            break
        state = new_state.select(np.array(keep_rows))
        live = next_live
    pool = finished if finished else live
    return sorted(pool, key=lambda h: -h.normalized(len_norm))


def score_sequence(model: Seq2Seq, src, tokens, boundaries=None,
                   gate_mode: str = "in-beam") -> float:
    """Re-score a token/boundary sequence with a fresh teacher-forced pass.

    With ``boundaries=None`` (bi-scale only) the gate decides by argmax, as in
    ``argmax`` mode. Gate terms count only in ``in-beam`` mode and from the
    second position on.
    """
    src = np.asarray(src, dtype=np.int64).reshape(1, -1)
    ann, state, y_prev = model.start(src)
    total = 0.0
    for t, y in enumerate(tokens):
        gold = None if boundaries is None or not model.config.biscale else [boundaries[t]]
        state, out = model.decoder_step(state, y_prev, ann, gold)
        total += float(_log_softmax(out.logits.data)[0, y])
        if model.config.biscale and gate_mode == "in-beam" and t > 0:
            total += float(_log_softmax(out.boundary_logits.data)[0, out.boundary[0]])
        y_prev = np.array([y])
    return total
