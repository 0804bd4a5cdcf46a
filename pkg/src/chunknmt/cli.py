"""Command-line entry point: train, translate, evaluate, synth-data, export-align."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .corpus import (DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE, EOS, EOS_CHUNK, EOS_TOKEN,
                     ChunkedSentence, SynthGrammar, Vocab, build_vocab, parse_chunked_line,
                     read_parallel, serialize_chunked, synth_task)
from .inference import beam_search, greedy_decode
from .metrics import export_alignment, make_report
from .model import ModelConfig, Seq2Seq, load_checkpoint, save_checkpoint
from .training import TrainConfig, Trainer, teacher_forced_eval

log = logging.getLogger("chunknmt")

TAG_SPECIALS = ("<pad>",)


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment; keys may use dashes."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            k, v = (x.strip() for x in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(args) -> int:
    grammar = SynthGrammar(args.chunks_per_sentence, args.chunk_len_min, args.chunk_len_max,
                           args.reverse_chunks, args.n_tags, args.words_per_tag, args.lexicon_seed)
    examples = synth_task(args.seed, args.sentences, grammar)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{prefix}.src", "w", encoding="utf-8") as fs, \
            open(f"{prefix}.tgt", "w", encoding="utf-8") as ft:
        for ex in examples:
            fs.write(" ".join(ex.source) + "\n")
            ft.write(serialize_chunked(ex.target) + "\n")
    print(f"wrote {len(examples)} sentence pairs to {prefix}.src / {prefix}.tgt")
    return 0


# ---------------------------------------------------------------- train


def _effective_config(args) -> str:
    """Snapshot readable back through ``--config`` (unset options omitted)."""
    keys = sorted(k for k in vars(args) if k not in ("func", "config", "command", "verbose"))
    return "".join(f"{k} = {getattr(args, k)}\n" for k in keys if getattr(args, k) is not None)


def cmd_train(args) -> int:
    _require(args.src, "source corpus")
    _require(args.tgt, "target corpus")
    biscale = args.mode == "biscale"
    profile_dtype = np.float64 if args.profile == "verify" else np.float32
    ad.set_default_dtype(profile_dtype)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective-config").write_text(_effective_config(args), encoding="utf-8")

    src_lines, tgt_lines = _read_lines(args.src), _read_lines(args.tgt)
    if biscale and not any("(" in line for line in tgt_lines):
        raise UsageError("bi-scale training needs a chunk-annotated target file, e.g. "
                         "'(NP the cat) (VP sat)'; use --mode baseline for plain targets")
    examples, filtered = read_parallel(src_lines, tgt_lines, args.max_len, annotated=biscale)
    if not examples:
        raise UsageError("no training sentences left after length filtering")
    vs = build_vocab((e.source for e in examples), args.vocab_size)
    vt = build_vocab((e.target.tokens for e in examples), args.vocab_size)
    vg = build_vocab((e.target.tags for e in examples), 1000, specials=TAG_SPECIALS) \
        if biscale else Vocab([EOS_CHUNK], specials=TAG_SPECIALS)
    attention_scale = args.attention_scale or ("chunk" if biscale else "word")
    mcfg = ModelConfig(len(vs), len(vt), len(vg), args.embed_dim, args.encoder_hidden_dim,
                       args.word_state_dim, args.chunk_state_dim, args.chunk_embed_dim,
                       args.attention_dim, args.readout_dim, args.mode, attention_scale,
                       args.readout)
    tcfg = TrainConfig(args.lr, args.optimizer, args.batch_size, args.epochs,
                       None if args.clip < 0 else args.clip, args.lambda_y, args.lambda_l,
                       args.lambda_b, args.seed, args.max_len, args.vocab_size)
    model = Seq2Seq(mcfg, seed=args.seed, dtype=profile_dtype)
    trainer = Trainer(model, tcfg, vs, vt, vg if biscale else None)
    meta = {"vocab_src": vs.to_dict(), "vocab_tgt": vt.to_dict(), "vocab_tag": vg.to_dict()}
    deterministic = args.profile == "verify"
    with open(out_dir / "train.log", "w", encoding="utf-8") as logf:
        logf.write(f"# sentences={len(examples)} filtered={filtered} params={model.n_params()}\n")
        logf.write("epoch\tloss_total\tloss_y\tloss_l\tloss_b\tgrad_norm\twallclock\n")
        start = time.perf_counter()
        for epoch in range(1, args.epochs + 1):
            stats = trainer.train_epoch(examples)
            elapsed = time.perf_counter() - start
            logf.write(stats.log_line(0.0 if deterministic else elapsed) + "\n")
            logf.flush()
            log.info("epoch %d loss %.4f (%.1fs)", epoch, stats.loss_total, elapsed)
            if args.save_every and epoch % args.save_every == 0:
                save_checkpoint(out_dir / f"checkpoint-epoch{epoch}.jsonl", model, meta)
    save_checkpoint(out_dir / "model.jsonl", model, meta)
    print(f"trained {args.epochs} epochs on {len(examples)} sentences "
          f"({filtered} filtered); checkpoint {out_dir / 'model.jsonl'}")
    return 0


# ---------------------------------------------------------------- translate


def _load(path):
    _require(path, "checkpoint")
    model, meta = load_checkpoint(path)
    return (model, Vocab.from_dict(meta["vocab_src"]), Vocab.from_dict(meta["vocab_tgt"]),
            Vocab.from_dict(meta["vocab_tag"]))


def _decode_lines(model, vs, args, lines):
    for line in lines:
        toks = line.split()
        if not toks:
            yield toks, None
            continue
        src = np.array(vs.encode(toks))
        if args.greedy:
            hyp = greedy_decode(model, src, args.max_len)
        else:
            hyp = beam_search(model, src, args.beam, args.max_len, args.gate_mode, args.len_norm)[0]
        yield toks, hyp


def _hyp_words(hyp, vt) -> list[str]:
    ids = hyp.tokens[:-1] if hyp.tokens and hyp.tokens[-1] == EOS else hyp.tokens
    return vt.decode(ids)


def _hyp_chunks(hyp, vt, vg) -> str:
    toks = vt.decode(hyp.tokens)
    if not hyp.tokens or hyp.tokens[-1] != EOS:
        toks.append(EOS_TOKEN)
        bnd = hyp.boundaries + [1]
        tags = vg.decode(hyp.tags) + [EOS_CHUNK]
    else:
        bnd, tags = hyp.boundaries, vg.decode(hyp.tags)
    return serialize_chunked(ChunkedSentence(toks, list(bnd), tags))


def cmd_translate(args) -> int:
    model, vs, vt, vg = _load(args.checkpoint)
    lines = _read_lines(_require(args.input, "input file"))
    dump_dir = Path(args.dump_attention) if args.dump_attention else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)
    out_lines, chunk_lines = [], []
    for n, (src, hyp) in enumerate(_decode_lines(model, vs, args, lines), start=1):
        if hyp is None:
            out_lines.append("")
            chunk_lines.append("")
            continue
        words = _hyp_words(hyp, vt)
        out_lines.append(" ".join(words))
        if model.config.biscale:
            chunk_lines.append(_hyp_chunks(hyp, vt, vg))
        if dump_dir:
            tgt = vt.decode(hyp.tokens)
            (dump_dir / f"align-{n:05d}.tsv").write_text(
                export_alignment(hyp.trace, src, tgt), encoding="utf-8")
    Path(args.output).write_text("".join(x + "\n" for x in out_lines), encoding="utf-8")
    if args.dump_boundaries:
        if not model.config.biscale:
            raise UsageError("--dump-boundaries needs a bi-scale checkpoint")
        Path(args.dump_boundaries).write_text("".join(x + "\n" for x in chunk_lines),
                                              encoding="utf-8")
    return 0


def cmd_export_align(args) -> int:
    args.dump_attention = args.out_dir
    model, vs, vt, vg = _load(args.checkpoint)
    lines = _read_lines(_require(args.input, "input file"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for n, (src, hyp) in enumerate(_decode_lines(model, vs, args, lines), start=1):
        if hyp is None:
            continue
        (out / f"align-{n:05d}.tsv").write_text(
            export_alignment(hyp.trace, src, vt.decode(hyp.tokens)), encoding="utf-8")
    return 0


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    hyps = [line.split() for line in _read_lines(_require(args.hyp, "hypothesis file"))]
    ref_sets = [_read_lines(_require(r, "reference file")) for r in args.ref]
    for path, refs in zip(args.ref, ref_sets):
        if len(refs) != len(hyps):
            raise UsageError(f"line count mismatch: {len(hyps)} hypotheses vs "
                             f"{len(refs)} lines in {path}")

    def words(line):
        if "(" in line:
            return parse_chunked_line(line).tokens[:-1]
        return line.split()

    references = [[words(rs[i]) for rs in ref_sets] for i in range(len(hyps))]
    acc = {}
    if args.annotated_ref:
        annotated = _read_lines(_require(args.annotated_ref, "annotated reference"))
        if len(annotated) != len(hyps):
            raise UsageError("line count mismatch between hypotheses and annotated reference")
        if args.checkpoint and args.src:
            model, vs, vt, vg = _load(args.checkpoint)
            src = _read_lines(_require(args.src, "source file"))
            examples, _ = read_parallel(src, annotated, max_len=10**9, annotated=True)
            rep = teacher_forced_eval(model, examples, vs, vt, vg)
            acc["boundary_accuracy"] = rep.boundary_accuracy
            acc["tag_accuracy"] = rep.tag_accuracy
        if args.hyp_chunks:
            acc["free_boundary_accuracy"] = _free_boundary_accuracy(
                _read_lines(_require(args.hyp_chunks, "hypothesis chunk file")), annotated)
    report = make_report(hyps, references, **acc)
    text = report.to_text()
    sys.stdout.write(text)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    return 0


def _free_boundary_accuracy(hyp_lines, ref_lines) -> float | None:
    """Position-wise gate agreement over the common prefix of free-running output."""
    hit = tot = 0
    for h, r in zip(hyp_lines, ref_lines):
        if not h.strip():
            continue
        hb = parse_chunked_line(h).boundaries
        rb = parse_chunked_line(r).boundaries
        n = min(len(hb), len(rb))
        hit += sum(int(a == b) for a, b in zip(hb[1:n], rb[1:n]))
        tot += max(n - 1, 0)
    return hit / tot if tot else None


# ---------------------------------------------------------------- parser


def _add_decode_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="source sentences, one per line")
    p.add_argument("--beam", type=int, default=5, help="beam width (default 5)")
    p.add_argument("--gate-mode", choices=("in-beam", "argmax"), default="in-beam",
                   help="boundary decisions inside the beam or by gate argmax (default in-beam)")
    p.add_argument("--len-norm", type=float, default=1.0,
                   help="length normalization exponent; 0 disables (default 1.0)")
    p.add_argument("--greedy", action="store_true", help="greedy decoding instead of beam search")
    p.add_argument("--max-len", type=int, default=100, help="maximum output length (default 100)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunknmt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a seeded synthetic chunked translation corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--chunks-per-sentence", type=int, default=3)
    p.add_argument("--chunk-len-min", type=int, default=1)
    p.add_argument("--chunk-len-max", type=int, default=3)
    p.add_argument("--reverse-chunks", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--n-tags", type=int, default=4)
    p.add_argument("--words-per-tag", type=int, default=4)
    p.add_argument("--lexicon-seed", type=int, default=0,
                   help="fixes the source-to-target lexicon; share it between train and test")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a baseline or bi-scale model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    p.add_argument("--src", required=True, help="source corpus, space-tokenized")
    p.add_argument("--tgt", required=True, help="target corpus, bracketed chunks for biscale")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("baseline", "biscale"), default="biscale",
                   help="word-level decoder or bi-scale decoder")
    p.add_argument("--attention-scale", choices=("word", "chunk"), default=None,
                   help="chunk for biscale, word for baseline when unset")
    p.add_argument("--profile", choices=("verify", "fast"), default="verify",
                   help="verify: 64-bit, deterministic log; fast: 32-bit with wallclock")
    p.add_argument("--seed", type=int, default=1234, help="parameter init and shuffling seed")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--batch-size", type=int, default=80, help="sentences per update")
    p.add_argument("--optimizer", choices=("sgd", "adadelta", "adam"), default="adadelta",
                   help="update rule")
    p.add_argument("--lr", type=float, default=1.0, help="learning rate")
    p.add_argument("--clip", type=float, default=1.0, help="global grad-norm clip; <0 disables")
    p.add_argument("--lambda-y", type=float, default=1.0, help="word loss weight")
    p.add_argument("--lambda-l", type=float, default=1.0, help="tag loss weight")
    p.add_argument("--lambda-b", type=float, default=1.0, help="boundary loss weight")
    p.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE,
                   help="most frequent words kept per side")
    p.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN,
                   help="sentences longer than this are filtered")
    p.add_argument("--embed-dim", type=int, default=620, help="word embedding size")
    p.add_argument("--encoder-hidden-dim", type=int, default=1000, help="per-direction encoder state size")
    p.add_argument("--word-state-dim", type=int, default=1000, help="decoder word state size")
    p.add_argument("--chunk-state-dim", type=int, default=1000, help="decoder chunk state size")
    p.add_argument("--chunk-embed-dim", type=int, default=1000, help="LSTM-minus chunk embedding size")
    p.add_argument("--attention-dim", type=int, default=1000, help="attention hidden size")
    p.add_argument("--readout-dim", type=int, default=500, help="readout layer size")
    p.add_argument("--readout", choices=("tanh", "maxout"), default="tanh", help="readout nonlinearity")
    p.add_argument("--save-every", type=int, default=0, help="checkpoint every N epochs; 0 = final only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode source sentences with a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_decode_flags(p)
    p.add_argument("--output", required=True)
    p.add_argument("--dump-boundaries", help="write bracketed chunk output with predicted tags")
    p.add_argument("--dump-attention", help="directory for one heatmap TSV per sentence")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("export-align", help="decode and write attention heatmap TSVs",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_decode_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_align)

    p = sub.add_parser("evaluate", help="BLEU and chunk accuracies",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, action="append", help="repeat for multiple references")
    p.add_argument("--annotated-ref", help="bracketed reference for boundary/tag accuracy")
    p.add_argument("--checkpoint", help="model for teacher-forced accuracies")
    p.add_argument("--src", help="source file matching --annotated-ref")
    p.add_argument("--hyp-chunks", help="output of translate --dump-boundaries")
    p.add_argument("--json", help="also write the report as JSON here")
    p.add_argument("--report", help="also write the text report here")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    subparsers = parser._subparsers._group_actions[0].choices
    # first pass only locates --config, so required flags may still come from the file
    required = {(name, a.dest) for name, sp in subparsers.items() for a in sp._actions if a.required}
    for sp in subparsers.values():
        for a in sp._actions:
            a.required = False
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    values = {}
    if getattr(args, "config", None):
        try:
            values = read_config_file(_require(args.config, "config file"))
        except UsageError as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        unknown = sorted(set(values) - {a.dest for a in sub._actions})
        if unknown:
            print(f"error: unknown config keys: {', '.join(unknown)}", file=sys.stderr)
            return 2
    for action in sub._actions:
        if action.dest in values:
            v = values[action.dest]
            if isinstance(action, argparse.BooleanOptionalAction):
                v = v.lower() in ("1", "true", "yes", "on")
            action.default = v
        elif (args.command, action.dest) in required:
            action.required = True
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
