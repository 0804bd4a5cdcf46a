"""Vocabularies, chunk-annotated corpora, batching and the synthetic task."""
from __future__ import annotations

import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
EOS_TOKEN = SPECIALS[EOS]
EOS_CHUNK = "EOS_CHUNK"
DEFAULT_MAX_LEN = 50
DEFAULT_VOCAB_SIZE = 30000

_TAG_RE = re.compile(r"^[A-Za-z0-9_$\-]+$")


class ChunkParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


class Vocab:
    """Token/id map with reserved specials at fixed low ids."""

    def __init__(self, tokens: Iterable[str] = (), specials: Sequence[str] = SPECIALS,
                 max_size: int | None = None):
        self.specials = tuple(specials)
        self.max_size = max_size
        self.itos: list[str] = list(self.specials)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def unk_id(self) -> int | None:
        return self.stoi.get(SPECIALS[UNK])

    def lookup(self, tok: str) -> int:
        idx = self.stoi.get(tok)
        if idx is None:
            if self.unk_id is None:
                raise KeyError(tok)
            return self.unk_id
        return idx

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.lookup(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_dict(self) -> dict:
        return {"specials": list(self.specials), "tokens": self.itos[len(self.specials):],
                "max_size": self.max_size}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["tokens"], specials=d["specials"], max_size=d.get("max_size"))


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int,
                specials: Sequence[str] = SPECIALS) -> Vocab:
    """Keep the ``max_size`` most frequent tokens; ties go to first occurrence."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    counts: Counter = Counter()
    first: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            if tok in specials:
                continue
            counts[tok] += 1
            first.setdefault(tok, len(first))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], first[t]))
    return Vocab(ranked[:max_size], specials=specials, max_size=max_size)


@dataclass
class ChunkedSentence:
    """Target tokens with per-token boundary bits and per-chunk tags.

    ``tokens`` ends with the EOS token, which forms its own terminal chunk
    tagged ``EOS_CHUNK``. ``boundaries``/``tags`` are None for unannotated
    (baseline-only) targets.
    """

    tokens: list[str]
    boundaries: list[int] | None = None
    tags: list[str] | None = None

    def __post_init__(self):
        if self.boundaries is not None:
            check_chunk_invariants(self)

    @property
    def annotated(self) -> bool:
        return self.boundaries is not None

    def chunks(self) -> list[tuple[str, list[str]]]:
        out: list[tuple[str, list[str]]] = []
        k = -1
        for tok, b in zip(self.tokens, self.boundaries):
            if b:
                k += 1
                out.append((self.tags[k], []))
            out[-1][1].append(tok)
        return out


def check_chunk_invariants(sent: ChunkedSentence) -> None:
    b = sent.boundaries
    if len(b) != len(sent.tokens):
        raise ValueError("boundaries and tokens differ in length")
    if not b or b[0] != 1:
        raise ValueError("first token must open a chunk")
    if any(x not in (0, 1) for x in b):
        raise ValueError("boundary bits must be 0 or 1")
    if sum(b) != len(sent.tags):
        raise ValueError("one tag per chunk required")


def parse_chunked_line(line: str, lineno: int | None = None) -> ChunkedSentence:
    """Parse ``(NP the French Republic) (VP collapsed)`` into a ChunkedSentence."""
    tokens: list[str] = []
    boundaries: list[int] = []
    tags: list[str] = []
    # pad parens so they split as their own items
    items = line.replace("(", " ( ").replace(")", " ) ").split()
    i = 0
    if not items:
        raise ChunkParseError("empty line", lineno)
    while i < len(items):
        if items[i] != "(":
            raise ChunkParseError(f"token {items[i]!r} outside a chunk", lineno)
        if i + 1 >= len(items) or items[i + 1] in "()":
            raise ChunkParseError("missing chunk tag", lineno)
        tag = items[i + 1]
        if not _TAG_RE.match(tag):
            raise ChunkParseError(f"bad characters in tag {tag!r}", lineno)
        i += 2
        words = []
        while i < len(items) and items[i] not in "()":
            words.append(items[i])
            i += 1
        if i >= len(items):
            raise ChunkParseError("unbalanced brackets", lineno)
        if items[i] == "(":
            raise ChunkParseError("unbalanced brackets (nested chunk)", lineno)
        if not words:
            raise ChunkParseError(f"empty chunk {tag}", lineno)
        i += 1
        tags.append(tag)
        tokens.extend(words)
        boundaries.extend([1] + [0] * (len(words) - 1))
    tokens.append(EOS_TOKEN)
    boundaries.append(1)
    tags.append(EOS_CHUNK)
    return ChunkedSentence(tokens, boundaries, tags)


def serialize_chunked(sent: ChunkedSentence) -> str:
    """Inverse of :func:`parse_chunked_line`; the terminal EOS chunk is dropped."""
    parts = []
    for tag, words in sent.chunks():
        if tag == EOS_CHUNK and words == [EOS_TOKEN]:
            continue
        parts.append(f"({tag} {' '.join(words)})")
    return " ".join(parts)


def plain_target(line: str) -> ChunkedSentence:
    return ChunkedSentence(line.split() + [EOS_TOKEN])


@dataclass
class ParallelExample:
    source: list[str]
    target: ChunkedSentence


def read_parallel(src_lines: Iterable[str], tgt_lines: Iterable[str],
                  max_len: int = DEFAULT_MAX_LEN, annotated: bool = True
                  ) -> tuple[list[ParallelExample], int]:
    """Pair source and target lines; returns (examples, number filtered by length).

    Length limits count words, not the appended EOS.
    """
    examples, filtered = [], 0
    src_lines, tgt_lines = list(src_lines), list(tgt_lines)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line count mismatch: {len(src_lines)} source vs {len(tgt_lines)} target")
    for n, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        src = s.split()
        if annotated:
            tgt = parse_chunked_line(t, n)
        elif "(" in t:
            tgt = parse_chunked_line(t, n)
            tgt = ChunkedSentence(tgt.tokens)
        else:
            tgt = plain_target(t)
        if not src or len(tgt.tokens) < 2:
            raise ChunkParseError("empty sentence", n)
        if len(src) > max_len or len(tgt.tokens) - 1 > max_len:
            filtered += 1
            continue
        examples.append(ParallelExample(src, tgt))
    return examples, filtered


def read_jsonl(lines: Iterable[str]) -> list[ParallelExample]:
    """Machine-generated alternative: ``{"src", "tgt", "b", "tags"}`` per line, no EOS."""
    out = []
    for line in lines:
        if not line.strip():
            continue
        d = json.loads(line)
        b = list(d["b"]) + [1] if "b" in d else None
        tags = list(d["tags"]) + [EOS_CHUNK] if "tags" in d else None
        out.append(ParallelExample(list(d["src"]), ChunkedSentence(list(d["tgt"]) + [EOS_TOKEN], b, tags)))
    return out


def write_jsonl(examples: Iterable[ParallelExample], fh: io.TextIOBase) -> None:
    for ex in examples:
        t = ex.target
        d = {"src": ex.source, "tgt": t.tokens[:-1]}
        if t.annotated:
            d["b"] = t.boundaries[:-1]
            d["tags"] = t.tags[:-1]
        fh.write(json.dumps(d) + "\n")


@dataclass
class Batch:
    src: np.ndarray          # (B, J) int
    src_mask: np.ndarray     # (B, J) bool
    tgt: np.ndarray          # (B, T) int, includes EOS
    tgt_mask: np.ndarray     # (B, T) bool
    boundaries: np.ndarray | None = None  # (B, T) int
    tags: np.ndarray | None = None        # (B, T) int; tag id at chunk-opening positions

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def annotated(self) -> bool:
        return self.boundaries is not None


def encode_example(ex: ParallelExample, vocab_src: Vocab, vocab_tgt: Vocab,
                   vocab_tag: Vocab | None = None) -> Batch:
    return encode_batch([ex], vocab_src, vocab_tgt, vocab_tag)


def encode_batch(examples: Sequence[ParallelExample], vocab_src: Vocab, vocab_tgt: Vocab,
                 vocab_tag: Vocab | None = None) -> Batch:
    """PAD-pad a list of examples; UNK replacement happens here."""
    if not examples:
        raise ValueError("empty batch")
    B = len(examples)
    J = max(len(ex.source) for ex in examples)
    T = max(len(ex.target.tokens) for ex in examples)
    src = np.full((B, J), PAD, dtype=np.int64)
    tgt = np.full((B, T), PAD, dtype=np.int64)
    annotated = vocab_tag is not None and all(ex.target.annotated for ex in examples)
    bnd = np.zeros((B, T), dtype=np.int64) if annotated else None
    tags = np.zeros((B, T), dtype=np.int64) if annotated else None
    for i, ex in enumerate(examples):
        src[i, :len(ex.source)] = vocab_src.encode(ex.source)
        tgt[i, :len(ex.target.tokens)] = vocab_tgt.encode(ex.target.tokens)
        if annotated:
            b = ex.target.boundaries
            bnd[i, :len(b)] = b
            starts = np.flatnonzero(b)
            tags[i, starts] = vocab_tag.encode(ex.target.tags)
    return Batch(src, src != PAD, tgt, tgt != PAD, bnd, tags)


def iterate_batches(examples: Sequence, batch_size: int, rng: np.random.Generator | None = None):
    """Yield lists of examples; order is a deterministic function of ``rng``."""
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield [examples[i] for i in order[start:start + batch_size]]


# ---------------------------------------------------------------- synthetic task

TAG_NAMES = ("NP", "VP", "PP", "ADJP", "ADVP", "SBAR", "PRT", "CONJP")


@dataclass
class SynthGrammar:
    """Parameters of the synthetic chunked translation task.

    Each tag owns ``words_per_tag`` source words; a fixed bijective lexicon
    maps them to target words. A sentence is ``chunks_per_sentence`` chunks
    with no two adjacent chunks sharing a tag, so chunk edges are visible on
    the source side. The target translates each chunk word by word and, with
    ``reverse_chunks``, emits the chunks in reverse order.
    """

    chunks_per_sentence: int = 3
    chunk_len_min: int = 1
    chunk_len_max: int = 3
    reverse_chunks: bool = True
    n_tags: int = 4
    words_per_tag: int = 4
    lexicon_seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_tags <= len(TAG_NAMES):
            raise ValueError(f"n_tags must be in [1, {len(TAG_NAMES)}]")
        if self.chunk_len_min < 1 or self.chunk_len_max < self.chunk_len_min:
            raise ValueError("need 1 <= chunk_len_min <= chunk_len_max")
        if self.chunks_per_sentence < 1:
            raise ValueError("chunks_per_sentence must be >= 1")

    def lexicon(self) -> dict[str, str]:
        rng = np.random.default_rng(self.lexicon_seed)
        lex = {}
        for k in range(self.n_tags):
            perm = rng.permutation(self.words_per_tag)
            for i in range(self.words_per_tag):
                lex[f"{TAG_NAMES[k].lower()}{i}"] = f"{TAG_NAMES[k].lower()}{perm[i]}_t"
        return lex


def synth_task(seed: int, n_sentences: int, grammar: SynthGrammar | None = None
               ) -> list[ParallelExample]:
    grammar = grammar or SynthGrammar()
    lex = grammar.lexicon()
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sentences):
        chunks = []
        prev = -1
        for _ in range(grammar.chunks_per_sentence):
            choices = [k for k in range(grammar.n_tags) if k != prev] or [prev]
            tag = choices[int(rng.integers(len(choices)))]
            prev = tag
            length = int(rng.integers(grammar.chunk_len_min, grammar.chunk_len_max + 1))
            words = [f"{TAG_NAMES[tag].lower()}{int(rng.integers(grammar.words_per_tag))}"
                     for _ in range(length)]
            chunks.append((TAG_NAMES[tag], words))
        source = [w for _, words in chunks for w in words]
        ordered = chunks[::-1] if grammar.reverse_chunks else chunks
        tokens, bnd, tags = [], [], []
        for tag, words in ordered:
            tokens.extend(lex[w] for w in words)
            bnd.extend([1] + [0] * (len(words) - 1))
            tags.append(tag)
        out.append(ParallelExample(source, ChunkedSentence(tokens + [EOS_TOKEN], bnd + [1],
                                                           tags + [EOS_CHUNK])))
    return out


def format_source(ex: ParallelExample) -> str:
    return " ".join(ex.source)
