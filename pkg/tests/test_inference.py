import itertools

import numpy as np
import pytest

from chunknmt.corpus import EOS, UNK
from chunknmt.inference import beam_search, greedy_decode, greedy_decode_batch, score_sequence
from chunknmt.model import ModelConfig, Seq2Seq

# output alphabet after excluding PAD and BOS: EOS, UNK and one word
ALPHABET = (EOS, UNK, 4)


def small_model(seed, mode="biscale"):
    rng = np.random.default_rng(seed)
    d = lambda: int(rng.integers(2, 5))  # noqa: E731
    cfg = ModelConfig(6, 5, 3, embed_dim=d(), encoder_hidden_dim=d(), word_state_dim=d(),
                      chunk_state_dim=d(), chunk_embed_dim=d(), attention_dim=d(), readout_dim=d(),
                      mode=mode, attention_scale="chunk" if mode == "biscale" else "word", init_scale=3.0)
    src = rng.integers(4, 6, size=int(rng.integers(1, 4)))
    return Seq2Seq(cfg, seed=seed), src


def exhaustive(model, src, max_len, gate_mode):
    """Every EOS-terminated output of length <= max_len, scored by a fresh forward pass."""
    out = []
    words = [y for y in ALPHABET if y != EOS]
    for k in range(1, max_len + 1):
        for prefix in itertools.product(words, repeat=k - 1):
            tokens = list(prefix) + [EOS]
            if gate_mode == "in-beam" and model.config.biscale:
                patterns = [[1] + list(b) for b in itertools.product((0, 1), repeat=k - 1)]
            else:
                patterns = [None]
            for bits in patterns:
                out.append((score_sequence(model, src, tokens, bits, gate_mode), tokens, bits))
    return out


def _ranking(items, len_norm):
    return sorted(items, key=lambda x: -x[0] / len(x[1]) ** len_norm)


@pytest.mark.parametrize("gate_mode", ["in-beam", "argmax"])
@pytest.mark.parametrize("seed", range(20))
def test_wide_beam_equals_exhaustive_search(seed, gate_mode):
    model, src = small_model(seed)
    L = 3 if seed % 2 else 4
    oracle = _ranking(exhaustive(model, src, L, gate_mode), 1.0)
    width = (2 * len(ALPHABET)) ** L
    hyps = beam_search(model, src, beam=width, max_len=L, gate_mode=gate_mode, len_norm=1.0)
    assert len(hyps) == len(oracle)
    for h, (score, tokens, bits) in zip(hyps, oracle):
        assert h.tokens == tokens
        if bits is not None:
            assert h.boundaries == bits
        assert abs(h.score - score) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_baseline_wide_beam_equals_exhaustive_search(seed):
    model, src = small_model(seed, mode="baseline")
    oracle = _ranking(exhaustive(model, src, 3, "argmax"), 0.0)
    hyps = beam_search(model, src, beam=len(ALPHABET) ** 3, max_len=3, len_norm=0.0)
    assert [h.tokens for h in hyps] == [t for _, t, _ in oracle]
    np.testing.assert_allclose([h.score for h in hyps], [s for s, _, _ in oracle], atol=1e-8, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_greedy_equals_beam_one_with_argmax_gate(seed):
    model, src = small_model(seed)
    g = greedy_decode(model, src, max_len=6)
    b = beam_search(model, src, beam=1, max_len=6, gate_mode="argmax")[0]
    assert g.tokens == b.tokens and g.boundaries == b.boundaries
    assert abs(g.score - b.score) < 1e-10


@pytest.mark.parametrize("gate_mode", ["in-beam", "argmax"])
def test_returned_scores_match_rescoring(gate_mode):
    for seed in range(8):
        model, src = small_model(seed)
        for h in beam_search(model, src, beam=4, max_len=5, gate_mode=gate_mode):
            bits = h.boundaries if gate_mode == "in-beam" else None
            assert abs(score_sequence(model, src, h.tokens, bits, gate_mode) - h.score) < 1e-8


def test_attention_trace_is_constant_within_chunks():
    for seed in range(10):
        model, src = small_model(seed)
        for h in [greedy_decode(model, src, 8)] + beam_search(model, src, 3, 8):
            assert h.boundaries[0] == 1
            for t in range(1, len(h.tokens)):
                if h.boundaries[t] == 0:
                    assert h.trace[t][0].tobytes() == h.trace[t - 1][0].tobytes()
            assert all(scale == "chunk" for _, scale in h.trace)
            np.testing.assert_allclose([a.sum() for a, _ in h.trace], 1.0, atol=1e-12)


def test_max_len_and_specials_never_emitted():
    for seed in range(10):
        model, src = small_model(seed)
        for h in beam_search(model, src, 4, 3) + [greedy_decode(model, src, 3)]:
            assert 1 <= len(h.tokens) <= 3
            assert all(y in ALPHABET for y in h.tokens)
            assert h.finished == (h.tokens[-1] == EOS)


def test_batch_greedy_matches_single_sentence_greedy():
    model, _ = small_model(3)
    srcs = [np.array([4, 5, 4]), np.array([5]), np.array([5, 4])]
    width = max(len(s) for s in srcs)
    batch = np.zeros((3, width), dtype=np.int64)
    for i, s in enumerate(srcs):
        batch[i, :len(s)] = s
    many = greedy_decode_batch(model, batch, 6, batch != 0)
    for s, h in zip(srcs, many):
        one = greedy_decode(model, s, 6)
        assert one.tokens == h.tokens and one.boundaries == h.boundaries
        assert abs(one.score - h.score) < 1e-10


def test_bad_arguments():
    model, src = small_model(0)
    with pytest.raises(ValueError):
        beam_search(model, src, beam=0)
    with pytest.raises(ValueError):
        beam_search(model, src, gate_mode="sample")
    with pytest.raises(ValueError):
        greedy_decode(model, src, max_len=0)


def test_length_normalization_changes_ranking_only():
    model, src = small_model(11)
    raw = beam_search(model, src, 50, 4, len_norm=0.0)
    normed = beam_search(model, src, 50, 4, len_norm=1.0)
    key = lambda h: (tuple(h.tokens), tuple(h.boundaries))  # noqa: E731
    assert sorted(map(key, raw)) == sorted(map(key, normed))
    assert [h.score for h in raw] == sorted((h.score for h in raw), reverse=True)


@pytest.mark.xfail(strict=True, reason="beam search is not monotone in width; see decisions ledger")
def test_top_score_is_monotone_in_beam_width():
    for seed in range(50):
        model, src = small_model(seed)
        for gate_mode in ("in-beam", "argmax"):
            tops = [beam_search(model, src, k, 6, gate_mode, 0.0)[0].score for k in range(1, 5)]
            assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:])), (seed, gate_mode, tops)


def test_monotone_once_beam_covers_the_search_space():
    for seed in range(5):
        model, src = small_model(seed)
        best = beam_search(model, src, (2 * len(ALPHABET)) ** 3, 3, "in-beam", 0.0)[0]
        assert best.finished
        for k in range(1, 5):
            # a narrow beam may end with only unfinished prefixes, which lie outside the finished space
            for h in beam_search(model, src, k, 3, "in-beam", 0.0):
                assert not h.finished or h.score <= best.score + 1e-12


@pytest.mark.parametrize("gate_mode", ["in-beam", "argmax"])
def test_two_symbol_vocab_beam_four_matches_enumeration(gate_mode):
    # outputs are {UNK, EOS}: UNK plays the single word
    cfg = ModelConfig(6, 4, 2, embed_dim=3, encoder_hidden_dim=3, word_state_dim=3, chunk_state_dim=3,
                      chunk_embed_dim=3, attention_dim=3, readout_dim=3, init_scale=3.0)
    model, src = Seq2Seq(cfg, seed=5), np.array([4, 5])
    seqs = [([EOS], [1]), ([UNK, EOS], [1, 0]), ([UNK, EOS], [1, 1])]
    if gate_mode == "argmax":
        seqs = [(t, None) for t, _ in seqs[:2]]
    oracle = sorted(((score_sequence(model, src, t, b, gate_mode), t) for t, b in seqs),
                    key=lambda x: -x[0] / len(x[1]))
    hyps = beam_search(model, src, beam=4, max_len=2, gate_mode=gate_mode)
    assert [h.tokens for h in hyps] == [t for _, t in oracle]
    np.testing.assert_allclose([h.score for h in hyps], [s for s, _ in oracle], atol=1e-8, rtol=0)


def test_model_that_emits_eos_first_gives_length_one_output():
    model, src = small_model(2)
    model.params["out_b"].data[EOS] = 100.0
    assert greedy_decode(model, src, 10).tokens == [EOS]
    assert beam_search(model, src, 3, 10)[0].tokens == [EOS]
