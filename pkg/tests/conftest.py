import numpy as np
import pytest

from chunknmt import autodiff as ad
from chunknmt.corpus import SynthGrammar, build_vocab, synth_task
from chunknmt.model import ModelConfig, Seq2Seq


@pytest.fixture(autouse=True)
def _float64_profile():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


def tiny_vocabs(examples):
    vs = build_vocab([e.source for e in examples], 1000)
    vt = build_vocab([e.target.tokens for e in examples], 1000)
    vg = build_vocab([e.target.tags for e in examples], 1000, specials=("<pad>",))
    return vs, vt, vg


def tiny_config(vs, vt, vg, mode="biscale", dim=4, **kw):
    kw.setdefault("attention_scale", "chunk" if mode == "biscale" else "word")
    return ModelConfig(len(vs), len(vt), len(vg), embed_dim=dim, encoder_hidden_dim=dim,
                       word_state_dim=dim, chunk_state_dim=dim, chunk_embed_dim=dim,
                       attention_dim=dim, readout_dim=dim, mode=mode, **kw)


def bind_params(model: Seq2Seq, arrays):
    """Swap model parameters for the given tensors (used by finite-difference checks)."""
    for name, t in zip(list(model.params), arrays):
        model.params[name] = t


@pytest.fixture
def toy():
    g = SynthGrammar(chunks_per_sentence=2, chunk_len_min=1, chunk_len_max=3, n_tags=3, words_per_tag=3)
    examples = synth_task(5, 12, g)
    vs, vt, vg = tiny_vocabs(examples)
    return examples, vs, vt, vg
