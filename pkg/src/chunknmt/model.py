"""Encoder, attention, and the word-level and chunk-based bi-scale decoders.

Everything is batched over rows (sentences during training, hypotheses
during beam search). A decoder step consumes and returns a
:class:`BiScaleState`; the bi-scale step updates the chunk state only for
rows whose boundary bit fires and copies it unchanged for the rest.
"""
from __future__ import annotations

import dataclasses
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BOS

MODES = ("baseline", "biscale")
ATTENTION_SCALES = ("word", "chunk")
READOUTS = ("tanh", "maxout")
CHECKPOINT_FORMAT = "chunknmt-checkpoint"


class ContractError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    tag_vocab: int = 1
    embed_dim: int = 620
    encoder_hidden_dim: int = 1000
    word_state_dim: int = 1000
    chunk_state_dim: int = 1000
    chunk_embed_dim: int = 1000
    attention_dim: int = 1000
    readout_dim: int = 500
    mode: str = "biscale"
    attention_scale: str = "chunk"
    readout: str = "tanh"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.attention_scale not in ATTENTION_SCALES:
            raise ValueError(f"attention_scale must be one of {ATTENTION_SCALES}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.mode == "baseline" and self.attention_scale == "chunk":
            raise ValueError("baseline mode has no chunk attention")
        dims = ("src_vocab", "tgt_vocab", "tag_vocab", "embed_dim", "encoder_hidden_dim",
                "word_state_dim", "chunk_state_dim", "chunk_embed_dim", "attention_dim",
                "readout_dim")
        for name in dims:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def biscale(self) -> bool:
        return self.mode == "biscale"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class Annotations:
    """Encoder states ``h`` (B, J, 2H) plus the source mask.

    Projected attention keys ``h @ U`` are cached per attention module.
    """

    def __init__(self, h: Tensor, mask: np.ndarray, summary: Tensor):
        self.h = h
        self.mask = mask
        self.summary = summary  # backward encoder state at the first position
        self._keys: dict[str, Tensor] = {}

    @property
    def rows(self) -> int:
        return self.h.shape[0]

    def keys(self, name: str, U: Tensor) -> Tensor:
        if name not in self._keys:
            self._keys[name] = self.h @ U
        return self._keys[name]

    def select(self, rows: np.ndarray) -> "Annotations":
        out = Annotations(self.h[rows], self.mask[rows], self.summary[rows])
        out._keys = {k: v[rows] for k, v in self._keys.items()}
        return out


@dataclass
class BiScaleState:
    """Decoder state for a batch of rows.

    ``p`` and the LSTM-minus cache are None in baseline mode. ``t_prime``
    holds, per row, the step at which the current chunk opened; ``alpha`` is
    the attention the current step conditions on and ``pc`` the current
    chunk context (both detached, for inspection).
    """

    s: Tensor
    p: Tensor | None = None
    t_prime: np.ndarray | None = None
    m_at_boundary: Tensor | None = None
    step: int = 0
    alpha: np.ndarray | None = None
    pc: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.s.shape[0]

    def select(self, rows) -> "BiScaleState":
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda t: None if t is None else t[rows]  # noqa: E731
        pick_np = lambda a: None if a is None else a[rows]  # noqa: E731
        return BiScaleState(pick(self.s), pick(self.p), pick_np(self.t_prime),
                            pick(self.m_at_boundary), self.step, pick_np(self.alpha),
                            pick_np(self.pc))


@dataclass
class StepOutput:
    logits: Tensor
    boundary: np.ndarray                   # decided bits, (B,)
    alpha: np.ndarray                      # attention weights conditioned on, (B, J)
    scale: str                             # "word" or "chunk"
    boundary_logits: Tensor | None = None  # (B, 2); class 1 = new chunk
    tag_logits: Tensor | None = None       # (k, L) for boundary rows
    tag_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _glorot(rng: np.random.Generator, shape: tuple, scale: float) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class Seq2Seq:
    """Attentional encoder-decoder; ``config.mode`` picks the decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or ad.get_default_dtype())
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        for name, shape, kind in self.param_specs(config):
            if kind == "zeros":
                data = np.zeros(shape)
            elif kind == "embedding":
                data = rng.uniform(-0.1, 0.1, size=shape) * config.init_scale
            else:
                data = _glorot(rng, shape, config.init_scale)
            self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    # ------------------------------------------------------------ parameters

    @staticmethod
    def param_specs(c: ModelConfig) -> list[tuple[str, tuple, str]]:
        E, H, S, P = c.embed_dim, c.encoder_hidden_dim, c.word_state_dim, c.chunk_state_dim
        Ep, A, R, D = c.chunk_embed_dim, c.attention_dim, c.readout_dim, 2 * c.encoder_hidden_dim
        rout = 2 * R if c.readout == "maxout" else R

        def gru(prefix, inp, hid):
            return [(f"{prefix}_Wx", (inp, 3 * hid), "w"), (f"{prefix}_Ug", (hid, 2 * hid), "w"),
                    (f"{prefix}_Uc", (hid, hid), "w"), (f"{prefix}_b", (3 * hid,), "zeros")]

        specs = [("src_emb", (c.src_vocab, E), "embedding"),
                 ("tgt_emb", (c.tgt_vocab, E), "embedding")]
        specs += gru("enc_f", E, H) + gru("enc_b", E, H)
        specs += [("init_s_W", (H, S), "w"), ("init_s_b", (S,), "zeros")]
        word_att = [("watt_W", (S, A), "w"), ("watt_U", (D, A), "w"), ("watt_v", (A,), "w")]
        if not c.biscale:
            specs += word_att
            specs += gru("dec", E + D, S)
            ctx_dim = D
        else:
            specs += [("init_p_W", (H, P), "w"), ("init_p_b", (P,), "zeros")]
            if c.attention_scale == "chunk":
                specs += [("catt_W", (P, A), "w"), ("catt_U", (D, A), "w"), ("catt_v", (A,), "w")]
                specs += gru("dec", E + P, S)
            else:
                specs += word_att
                specs += gru("dec", E + P + D, S)
            specs += [("gate_W", (S + E, 2), "w"), ("gate_b", (2,), "zeros"),
                      ("minus_W", (S + E, Ep), "w")]
            specs += gru("chunk", Ep + D, P)
            specs += [("tag_read_W", (P + Ep + D, rout), "w"), ("tag_read_b", (rout,), "zeros"),
                      ("tag_out_W", (R, c.tag_vocab), "w"), ("tag_out_b", (c.tag_vocab,), "zeros")]
            ctx_dim = P
        specs += [("read_W", (E + S + ctx_dim, rout), "w"), ("read_b", (rout,), "zeros"),
                  ("out_W", (R, c.tgt_vocab), "w"), ("out_b", (c.tgt_vocab,), "zeros")]
        return specs

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------ building blocks

    def _gru(self, prefix: str, s: Tensor, xw: Tensor) -> Tensor:
        """Gated recurrent step given the precomputed input projection ``xw``."""
        P = self.params
        H = s.shape[-1]
        gates = ad.sigmoid(ad.slice_last(xw, 0, 2 * H) + s @ P[f"{prefix}_Ug"])
        r = ad.slice_last(gates, 0, H)
        z = ad.slice_last(gates, H, 2 * H)
        cand = ad.tanh(ad.slice_last(xw, 2 * H, 3 * H) + (r * s) @ P[f"{prefix}_Uc"])
        return s + z * (cand - s)

    def gru_step(self, prefix: str, s: Tensor, x: Tensor, ctx: Tensor | None = None) -> Tensor:
        inp = x if ctx is None else ad.concat([x, ctx], axis=-1)
        return self._gru(prefix, s, inp @ self.params[f"{prefix}_Wx"] + self.params[f"{prefix}_b"])

    def _readout(self, prefix: str, parts: list[Tensor]) -> Tensor:
        P = self.params
        name_r, name_o = ("read", "out") if prefix == "" else (f"{prefix}_read", f"{prefix}_out")
        pre = ad.concat(parts, axis=-1) @ P[f"{name_r}_W"] + P[f"{name_r}_b"]
        hidden = ad.maxout(pre, 2) if self.config.readout == "maxout" else ad.tanh(pre)
        return hidden @ P[f"{name_o}_W"] + P[f"{name_o}_b"]

    def _attend(self, prefix: str, query: Tensor, ann: Annotations) -> tuple[Tensor, Tensor]:
        P = self.params
        B, J, D = ann.h.shape
        keys = ann.keys(prefix, P[f"{prefix}_U"])
        q = ad.reshape(query @ P[f"{prefix}_W"], (B, 1, -1))
        scores = ad.tanh(keys + q) @ P[f"{prefix}_v"]
        alpha = ad.softmax(scores, mask=ann.mask)
        ctx = ad.reshape(ad.reshape(alpha, (B, 1, J)) @ ann.h, (B, D))
        return ctx, alpha

    # ------------------------------------------------------------ encoder

    def encode(self, src: np.ndarray, src_mask: np.ndarray | None = None) -> Annotations:
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src.shape[1] == 0:
            raise ValueError("empty source")
        mask = src != 0 if src_mask is None else np.asarray(src_mask, dtype=bool)
        P = self.params
        B, J = src.shape
        H = self.config.encoder_hidden_dim
        emb = ad.embedding(P["src_emb"], src)
        zero = Tensor(np.zeros((B, H), dtype=self.dtype))
        states = {}
        for direction, order in (("enc_f", range(J)), ("enc_b", range(J - 1, -1, -1))):
            xw_all = emb @ P[f"{direction}_Wx"] + P[f"{direction}_b"]
            s = zero
            out = [None] * J
            for j in order:
                new = self._gru(direction, s, xw_all[:, j])
                s = ad.where(mask[:, j, None], new, s)
                out[j] = s
            states[direction] = out
        h = ad.concat([ad.stack(states["enc_f"], axis=1), ad.stack(states["enc_b"], axis=1)], axis=-1)
        return Annotations(h, mask, states["enc_b"][0])

    # ------------------------------------------------------------ attention

    def word_attention(self, s_prev: Tensor, ann: Annotations) -> tuple[Tensor, Tensor]:
        return self._attend("watt", s_prev, ann)

    def chunk_attention(self, p_prev: Tensor, ann: Annotations,
                        boundary: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Chunk-state-queried attention; only valid at rows opening a chunk."""
        if boundary is not None and not np.all(boundary):
            raise ContractError("chunk attention called at a non-boundary step")
        return self._attend("catt", p_prev, ann)

    # ------------------------------------------------------------ chunk machinery

    def boundary_logits(self, s_prev: Tensor, e_y_prev: Tensor) -> Tensor:
        se = ad.concat([s_prev, e_y_prev], axis=-1)
        return se @ self.params["gate_W"] + self.params["gate_b"]

    def boundary_gate(self, s_prev: Tensor, e_y_prev: Tensor) -> np.ndarray:
        """P(b_t = 1) per row."""
        return ad.softmax(self.boundary_logits(s_prev, e_y_prev)).data[..., 1]

    def minus_projection(self, s_prev: Tensor, e_y_prev: Tensor) -> Tensor:
        return ad.concat([s_prev, e_y_prev], axis=-1) @ self.params["minus_W"]

    def chunk_minus_embedding(self, state: BiScaleState, s_prev: Tensor, e_y_prev: Tensor
                              ) -> tuple[Tensor, Tensor]:
        """Return (e_p, m_now): the last chunk's representation and the new cache value."""
        m_now = self.minus_projection(s_prev, e_y_prev)
        if state.m_at_boundary is None:
            e_p = Tensor(np.zeros(m_now.shape, dtype=self.dtype))
        else:
            e_p = m_now - state.m_at_boundary
        return e_p, m_now

    def chunk_update(self, p_prev: Tensor, e_p: Tensor, pc: Tensor) -> Tensor:
        return self.gru_step("chunk", p_prev, e_p, pc)

    def tag_logits(self, p_t: Tensor, e_p: Tensor, pc: Tensor) -> Tensor:
        return self._readout("tag", [p_t, e_p, pc])

    # ------------------------------------------------------------ decoder

    def init_state(self, ann: Annotations) -> BiScaleState:
        P = self.params
        s0 = ad.tanh(ann.summary @ P["init_s_W"] + P["init_s_b"])
        B, J = ann.mask.shape
        alpha = np.zeros((B, J))
        if not self.config.biscale:
            return BiScaleState(s0, alpha=alpha)
        p0 = ad.tanh(ann.summary @ P["init_p_W"] + P["init_p_b"])
        return BiScaleState(s0, p0, np.zeros(B, dtype=np.int64), None, 0, alpha,
                            np.zeros((B, ann.h.shape[2])))

    def decoder_step(self, state: BiScaleState, y_prev, ann: Annotations,
                     gold_b=None) -> tuple[BiScaleState, StepOutput]:
        """Advance every row by one target position.

        ``gold_b`` overrides the gate decision (teacher forcing or a beam
        branch); otherwise the gate's argmax decides. Step 0 always opens a
        chunk.
        """
        y_prev = np.asarray(y_prev, dtype=np.int64).reshape(-1)
        if y_prev.shape[0] != state.rows:
            raise ValueError(f"y_prev has {y_prev.shape[0]} rows, state has {state.rows}")
        e_y = ad.embedding(self.params["tgt_emb"], y_prev)
        if not self.config.biscale:
            return self._baseline_step(state, e_y, ann)
        return self._biscale_step(state, e_y, ann, gold_b)

    def _baseline_step(self, state, e_y, ann):
        c, alpha = self.word_attention(state.s, ann)
        s = self.gru_step("dec", state.s, e_y, c)
        logits = self._readout("", [e_y, s, c])
        B = state.rows
        new = BiScaleState(s, step=state.step + 1, alpha=alpha.data)
        return new, StepOutput(logits, np.ones(B, dtype=np.int64), alpha.data, "word")

    def _biscale_step(self, state, e_y, ann, gold_b):
        B = state.rows
        word_scale = self.config.attention_scale == "word"
        gate = self.boundary_logits(state.s, e_y)
        if state.step == 0:
            b = np.ones(B, dtype=np.int64)
        elif gold_b is not None:
            b = np.asarray(gold_b, dtype=np.int64).reshape(-1)
            if b.shape[0] != B:
                raise ValueError(f"gold_b has {b.shape[0]} rows, state has {B}")
        else:
            b = (gate.data[:, 1] > gate.data[:, 0]).astype(np.int64)

        if word_scale:
            c, c_alpha = self.word_attention(state.s, ann)

        rows = np.flatnonzero(b)
        p, m_cache, tag_logits = state.p, state.m_at_boundary, None
        alpha, pc_np = state.alpha.copy(), state.pc.copy()
        if rows.size:
            full = rows.size == B
            sub = (lambda t: t) if full else (lambda t: t[rows])
            sub_state = state if full else state.select(rows)
            s_prev, ey_k = sub_state.s, sub(e_y)
            e_p, m_now = self.chunk_minus_embedding(sub_state, s_prev, ey_k)
            if word_scale:
                pc, a_k = sub(c), c_alpha.data[rows]
            else:
                ann_k = ann if full else ann.select(rows)
                pc, a_alpha = self.chunk_attention(sub_state.p, ann_k, boundary=b[rows])
                a_k = a_alpha.data
            p_new = self.chunk_update(sub_state.p, e_p, pc)
            tag_logits = self.tag_logits(p_new, e_p, pc)
            if full:
                p, m_cache = p_new, m_now
            else:
                fire = b[:, None].astype(bool)
                p = ad.where(fire, ad.scatter_rows(p_new, rows, B), state.p)
                m_cache = ad.where(fire, ad.scatter_rows(m_now, rows, B), state.m_at_boundary)
            alpha[rows] = a_k
            pc_np[rows] = pc.data
        t_prime = np.where(b == 1, state.step, state.t_prime)

        if word_scale:
            s = self.gru_step("dec", state.s, e_y, ad.concat([p, c], axis=-1))
            alpha = c_alpha.data
        else:
            s = self.gru_step("dec", state.s, e_y, p)
        logits = self._readout("", [e_y, s, p])
        new = BiScaleState(s, p, t_prime, m_cache, state.step + 1, alpha, pc_np)
        out = StepOutput(logits, b, alpha, "word" if word_scale else "chunk", gate,
                         tag_logits, rows)
        return new, out

    def start(self, src, src_mask=None) -> tuple[Annotations, BiScaleState, np.ndarray]:
        ann = self.encode(src, src_mask)
        return ann, self.init_state(ann), np.full(ann.rows, BOS, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: Seq2Seq, meta: dict | None = None) -> None:
    """JSON-lines: a header line (config + meta), then one line per parameter."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": CHECKPOINT_FORMAT, "version": 1, "dtype": str(model.dtype),
                  "config": model.config.to_dict(), "meta": meta or {}}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for name, p in model.params.items():
            rec = {"name": name, "shape": list(p.shape),
                   "data": [float(x) for x in p.data.reshape(-1)]}
            fh.write(json.dumps(rec) + "\n")


def load_checkpoint(path) -> tuple[Seq2Seq, dict]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        config = ModelConfig(**header["config"])
        model = Seq2Seq(config, dtype=header.get("dtype"))
        seen = set()
        for line in fh:
            rec = json.loads(line)
            name = rec["name"]
            if name not in model.params:
                raise ValueError(f"unexpected tensor {name!r} in checkpoint")
            target = model.params[name]
            shape = tuple(rec["shape"])
            if shape != target.shape:
                raise ValueError(f"tensor {name!r}: checkpoint shape {shape} "
                                 f"does not match config shape {target.shape}")
            target.data[...] = np.asarray(rec["data"], dtype=model.dtype).reshape(shape)
            seen.add(name)
        missing = [n for n in model.params if n not in seen]
        if missing:
            raise ValueError(f"checkpoint is missing tensor {missing[0]!r}")
    return model, header.get("meta", {})
