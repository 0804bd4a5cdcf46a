"""Synthetic-task comparison of the bi-scale decoder against a word-attention baseline."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import EOS, SynthGrammar, Vocab, build_vocab, encode_batch, synth_task
from .inference import beam_search, greedy_decode_batch
from .metrics import bleu
from .model import ModelConfig, Seq2Seq
from .training import TrainConfig, Trainer, teacher_forced_eval

TAG_SPECIALS = ("<pad>",)


@dataclass
class ExperimentConfig:
    n_train: int = 2000
    n_test: int = 200
    grammar: SynthGrammar = field(default_factory=SynthGrammar)
    embed_dim: int = 32
    hidden_dim: int = 32
    epochs: int = 20
    batch_size: int = 32
    lr: float = 3e-3
    clip_norm: float = 5.0
    beam: int = 5
    decode: str = "beam"  # or "greedy"


def vocabs_for(examples):
    vs = build_vocab((e.source for e in examples), 30000)
    vt = build_vocab((e.target.tokens for e in examples), 30000)
    vg = build_vocab((e.target.tags for e in examples), 1000, specials=TAG_SPECIALS)
    return vs, vt, vg


def biscale_config(vs, vt, vg, d: int, e: int) -> ModelConfig:
    return ModelConfig(len(vs), len(vt), len(vg), embed_dim=e, encoder_hidden_dim=d,
                       word_state_dim=d, chunk_state_dim=d, chunk_embed_dim=d, attention_dim=d,
                       readout_dim=d, mode="biscale", attention_scale="chunk")


def matched_baseline_config(target_params: int, vs, vt, vg, d: int, e: int) -> ModelConfig:
    """Baseline sharing encoder/attention sizes; decoder width grown to match parameter count."""
    best = None
    for s in range(1, 8 * d):
        cfg = ModelConfig(len(vs), len(vt), len(vg), embed_dim=e, encoder_hidden_dim=d,
                          word_state_dim=s, attention_dim=d, readout_dim=s,
                          mode="baseline", attention_scale="word")
        n = sum(int(np.prod(shape)) for _, shape, _ in Seq2Seq.param_specs(cfg))
        if best is None or abs(n - target_params) < abs(best[0] - target_params):
            best = (n, cfg)
        if n > target_params:
            break
    return best[1]


def decode_bleu(model: Seq2Seq, examples, vs: Vocab, vt: Vocab, how: str = "beam",
                beam: int = 5) -> float:
    hyps = []
    if how == "greedy":
        for start in range(0, len(examples), 64):
            chunk = examples[start:start + 64]
            b = encode_batch(chunk, vs, vt)
            for h in greedy_decode_batch(model, b.src, max_len=3 * b.tgt.shape[1], src_mask=b.src_mask):
                hyps.append(h.tokens)
    else:
        for ex in examples:
            src = np.array(vs.encode(ex.source))
            h = beam_search(model, src, beam=beam, max_len=3 * len(ex.source) + 5)[0]
            hyps.append(h.tokens)
    words = [vt.decode(t[:-1] if t and t[-1] == EOS else t) for t in hyps]
    refs = [[ex.target.tokens[:-1]] for ex in examples]
    return bleu(words, refs)


def run_one(model_cfg: ModelConfig, train, test, vs, vt, vg, cfg: ExperimentConfig, seed: int,
            log=None) -> dict:
    model = Seq2Seq(model_cfg, seed=seed)
    tcfg = TrainConfig(lr=cfg.lr, optimizer="adam", batch_size=cfg.batch_size,
                       max_epochs=cfg.epochs, clip_norm=cfg.clip_norm, seed=seed)
    trainer = Trainer(model, tcfg, vs, vt, vg if model_cfg.biscale else None)
    t0 = time.perf_counter()
    for _ in range(cfg.epochs):
        st = trainer.train_epoch(train)
        if log:
            log(f"  [{model_cfg.mode}] epoch {st.epoch} loss {st.loss_total:.4f}")
    train_time = time.perf_counter() - t0
    tf_test = teacher_forced_eval(model, test, vs, vt, vg)
    return {"mode": model_cfg.mode, "params": model.n_params(), "train_seconds": train_time,
            "final_loss": trainer.history[-1].loss_total if trainer.history else float("nan"),
            "test_bleu": decode_bleu(model, test, vs, vt, cfg.decode, cfg.beam),
            "test_token_accuracy": tf_test.token_accuracy,
            "test_boundary_accuracy": tf_test.boundary_accuracy,
            "test_tag_accuracy": tf_test.tag_accuracy, "model": model}


def compare(seed: int, cfg: ExperimentConfig | None = None, log=None) -> dict:
    """Train both decoders on the same seeded corpus; return their test metrics."""
    cfg = cfg or ExperimentConfig()
    train = synth_task(seed, cfg.n_train, cfg.grammar)
    test = synth_task(seed + 100_000, cfg.n_test, cfg.grammar)
    vs, vt, vg = vocabs_for(train)
    bcfg = biscale_config(vs, vt, vg, cfg.hidden_dim, cfg.embed_dim)
    n_bi = sum(int(np.prod(shape)) for _, shape, _ in Seq2Seq.param_specs(bcfg))
    wcfg = matched_baseline_config(n_bi, vs, vt, vg, cfg.hidden_dim, cfg.embed_dim)
    bi = run_one(bcfg, train, test, vs, vt, vg, cfg, seed, log)
    base = run_one(wcfg, train, test, vs, vt, vg, cfg, seed, log)
    return {"seed": seed, "biscale": bi, "baseline": base,
            "margin": bi["test_bleu"] - base["test_bleu"],
            "config": dataclasses.asdict(cfg)}
