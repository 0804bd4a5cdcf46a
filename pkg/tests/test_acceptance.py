"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The synthetic-task comparison trains ten models and takes roughly a quarter
of an hour on one core.
"""
import itertools
import math
import time

import numpy as np
import pytest

from chunknmt.autodiff import grad_check
from chunknmt.cli import main as cli_main
from chunknmt.corpus import BOS, EOS, Batch, encode_batch, synth_task
from chunknmt.experiment import ExperimentConfig, biscale_config, compare, vocabs_for
from chunknmt.inference import beam_search
from chunknmt.model import ModelConfig, Seq2Seq
from chunknmt.training import joint_loss, overfit_probe

from conftest import bind_params, tiny_config, tiny_vocabs
from test_inference import ALPHABET, exhaustive, small_model
from test_model import random_instance, ref_baseline_decode

SEEDS = (1, 2, 3, 4, 5)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return emit


def test_criterion_1_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    cfg = ModelConfig(7, 8, 4, embed_dim=4, encoder_hidden_dim=3, word_state_dim=4, chunk_state_dim=3,
                      chunk_embed_dim=3, attention_dim=3, readout_dim=4, init_scale=2.0)
    model = Seq2Seq(cfg, seed=11)
    # 3 source tokens; 4 target tokens (EOS included) in 2 chunks plus the EOS chunk
    batch = Batch(np.array([[4, 5, 6]]), np.ones((1, 3), bool), np.array([[4, 5, 6, EOS]]),
                  np.ones((1, 4), bool), np.array([[1, 0, 1, 1]]), np.array([[1, 0, 2, 3]]))
    point = [p.data.copy() for p in model.params.values()]

    def f(arrays):
        bind_params(model, arrays)
        return joint_loss(model, batch).total

    err = grad_check(f, point)
    took = time.perf_counter() - t0
    assert verdict(1, err < 1e-4 and took < 10, f"max rel err {err:.2e} (< 1e-4), {took:.1f}s (< 10s)")


def test_criterion_2_baseline_equivalence(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        model, src, tgt, _ = random_instance(seed)
        P = {k: v.data for k, v in model.params.items()}
        prev = np.concatenate([[BOS], tgt[:-1]])
        ann, state, _ = model.start(src[None])
        for (alpha, s, logits), y in zip(ref_baseline_decode(P, src, prev), prev):
            state, out = model.decoder_step(state, [y], ann)
            for a, b in ((out.alpha[0], alpha), (state.s.data[0], s), (out.logits.data[0], logits)):
                worst = max(worst, float(np.max(np.abs(a - b))))
    took = time.perf_counter() - t0
    assert verdict(2, worst < 1e-10 and took < 5, f"max abs diff {worst:.1e} (< 1e-10), {took:.2f}s (< 5s)")


def test_criterion_3_copy_update_semantics(verdict):
    t0 = time.perf_counter()
    violations = 0
    copies = 0
    rng = np.random.default_rng(0)
    for trial in range(100):
        model, src, _, _ = random_instance(1000 + trial, mode="biscale")
        T = int(rng.integers(2, 8))
        bits = np.concatenate([[1], rng.integers(0, 2, size=T - 1)])
        ys = rng.integers(2, 6, size=T)
        ann, state, y = model.start(src[None])
        prev_p, prev_alpha = None, None
        for t in range(T):
            state, out = model.decoder_step(state, y, ann, gold_b=[bits[t]])
            if bits[t] == 0:
                copies += 1
                same_p = state.p.data.tobytes() == prev_p
                same_alpha = out.alpha.tobytes() == prev_alpha
                violations += int(not (same_p and same_alpha))
            prev_p, prev_alpha = state.p.data.tobytes(), out.alpha.tobytes()
            y = [ys[t]]
    took = time.perf_counter() - t0
    ok = violations == 0 and copies > 0 and took < 5
    assert verdict(3, ok, f"{violations} violations over {copies} copy steps in 100 decodes, {took:.2f}s (< 5s)")


def test_criterion_4_beam_oracle(verdict):
    t0 = time.perf_counter()
    L = 4
    mismatches = 0
    for seed, gate_mode in itertools.product(range(20), ("in-beam", "argmax")):
        model, src = small_model(seed)
        oracle = sorted(exhaustive(model, src, L, gate_mode), key=lambda x: -x[0] / len(x[1]))
        hyps = beam_search(model, src, (2 * len(ALPHABET)) ** L, L, gate_mode, 1.0)
        same = len(hyps) == len(oracle) and all(
            h.tokens == toks and (bits is None or h.boundaries == bits) and abs(h.score - sc) < 1e-8
            for h, (sc, toks, bits) in zip(hyps, oracle))
        mismatches += int(not same)
    took = time.perf_counter() - t0
    ok = mismatches == 0 and took < 60
    assert verdict(4, ok, f"{mismatches}/40 rankings differ from exhaustive search, {took:.1f}s (< 60s)")


@pytest.fixture(scope="module")
def synthetic_runs():
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    runs = [compare(seed, cfg) for seed in SEEDS]
    return runs, time.perf_counter() - t0


def test_criterion_5_synthetic_task(verdict, synthetic_runs):
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    probe_set = synth_task(SEEDS[0], cfg.n_train, cfg.grammar)[:8]
    vs, vt, vg = vocabs_for(probe_set)
    model = Seq2Seq(biscale_config(vs, vt, vg, cfg.hidden_dim, cfg.embed_dim), seed=SEEDS[0])
    probe = overfit_probe(model, probe_set, 2000, vs, vt, vg)
    runs, took = synthetic_runs
    took += time.perf_counter() - t0
    margins = [r["margin"] for r in runs]
    wins = sum(m > 0 for m in margins)
    ok = probe.token_accuracy >= 0.99 and wins >= 4
    detail = (f"overfit token acc {probe.token_accuracy:.4f} (>= 0.99); bi-scale ahead in {wins}/5 seeds "
              f"(need >= 4), margins " + ", ".join(f"{m:+.2f}" for m in margins) +
              f"; {took / 60:.1f} min (target < 30)")
    assert verdict(5, ok, detail)


def test_criterion_6_boundary_learnability(verdict, synthetic_runs):
    runs, _ = synthetic_runs
    accs = [r["biscale"]["test_boundary_accuracy"] for r in runs]
    ok = min(accs) >= 0.95
    assert verdict(6, ok, "teacher-forced test boundary accuracy per seed " +
                   ", ".join(f"{a:.4f}" for a in accs) + " (each >= 0.95)")


def test_criterion_7_loss_closed_form(verdict):
    examples = synth_task(5, 12)
    vs, vt, vg = tiny_vocabs(examples)
    model = Seq2Seq(tiny_config(vs, vt, vg, dim=6), seed=2)
    for name in ("out_W", "out_b", "tag_out_W", "tag_out_b", "gate_W", "gate_b"):
        model.params[name].data[...] = 0.0
    worst = 0.0
    for ex in examples:
        got = joint_loss(model, encode_batch([ex], vs, vt, vg)).total.item()
        T, K = len(ex.target.tokens), len(ex.target.tags)
        want = T * math.log(len(vt)) + K * math.log(len(vg)) + (T - 1) * math.log(2)
        worst = max(worst, abs(got - want))
    assert verdict(7, worst < 1e-6, f"max |loss - closed form| {worst:.1e} over 12 sentences (< 1e-6)")


def test_criterion_8_determinism(verdict, tmp_path):
    assert cli_main(["synth-data", "--seed", "9", "--sentences", "40", "--out-prefix",
                     str(tmp_path / "d")]) == 0
    args = ["train", "--src", str(tmp_path / "d.src"), "--tgt", str(tmp_path / "d.tgt"),
            "--profile", "verify", "--seed", "7", "--epochs", "3", "--save-every", "1",
            "--optimizer", "adadelta", "--batch-size", "16", "--embed-dim", "8",
            "--encoder-hidden-dim", "8", "--word-state-dim", "8", "--chunk-state-dim", "8",
            "--chunk-embed-dim", "8", "--attention-dim", "8", "--readout-dim", "8"]
    for run in ("a", "b"):
        assert cli_main(args + ["--out-dir", str(tmp_path / run)]) == 0
    # effective-config echoes each run's own --out-dir, so only logs and checkpoints are compared
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".log", ".jsonl"))
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    ok = not differing and "train.log" in files and "model.jsonl" in files and len(files) == 5
    assert verdict(8, ok, f"{len(files)} files compared ({', '.join(files)}); differing: {differing or 'none'}")
