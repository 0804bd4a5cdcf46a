"""Teacher-forced training under the joint translation/tag/boundary objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Batch, ParallelExample, Vocab, encode_batch, iterate_batches
from .model import Seq2Seq

OPTIMIZERS = ("sgd", "adadelta", "adam")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1.0
    optimizer: str = "adadelta"
    batch_size: int = 80
    max_epochs: int = 10
    clip_norm: float | None = 1.0
    lambda_y: float = 1.0
    lambda_l: float = 1.0
    lambda_b: float = 1.0
    seed: int = 1234
    max_len: int = 50
    vocab_size: int = 30000

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("lr, batch_size must be positive")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if min(self.lambda_y, self.lambda_l, self.lambda_b) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    total: ad.Tensor
    y: float
    l: float
    b: float
    n_sentences: int


def joint_loss(model: Seq2Seq, batch: Batch, lambda_y: float = 1.0, lambda_l: float = 1.0,
               lambda_b: float = 1.0) -> LossBreakdown:
    """Batch mean of per-sentence summed negative log-likelihoods.

    Bi-scale models add the tag term over chunk-opening positions and the
    boundary term over positions 2..T (the first boundary is forced). PAD
    positions are masked out of every term. Terms with zero weight are not
    built, so they contribute no gradient.
    """
    biscale = model.config.biscale
    if biscale and not batch.annotated:
        raise ValueError("bi-scale training needs chunk-annotated targets (boundaries and tags)")
    B, T = batch.tgt.shape
    ann, state, y_prev = model.start(batch.src, batch.src_mask)
    mask = batch.tgt_mask.astype(model.dtype)
    terms_y, terms_l, terms_b = [], [], []
    for t in range(T):
        gold_b = None
        if biscale:
            # PAD rows copy: their losses are masked and updating would waste work
            gold_b = np.where(batch.tgt_mask[:, t], batch.boundaries[:, t], 0)
        state, out = model.decoder_step(state, y_prev, ann, gold_b)
        if lambda_y:
            nll = ad.softmax_cross_entropy(out.logits, batch.tgt[:, t])
            terms_y.append(ad.sum(nll * mask[:, t]))
        if biscale and lambda_b and t >= 1:
            nll = ad.softmax_cross_entropy(out.boundary_logits, batch.boundaries[:, t])
            terms_b.append(ad.sum(nll * mask[:, t]))
        if biscale and lambda_l and out.tag_logits is not None:
            rows = out.tag_rows
            nll = ad.softmax_cross_entropy(out.tag_logits, batch.tags[rows, t])
            terms_l.append(ad.sum(nll * mask[rows, t]))
        y_prev = batch.tgt[:, t]

    def total_of(terms):
        if not terms:
            return None
        acc = terms[0]
        for term in terms[1:]:
            acc = acc + term
        return acc

    parts = []
    values = {}
    for key, terms, lam in (("y", terms_y, lambda_y), ("l", terms_l, lambda_l), ("b", terms_b, lambda_b)):
        tot = total_of(terms)
        values[key] = 0.0 if tot is None else float(tot.data) / B
        if tot is not None:
            parts.append(tot * (lam / B))
    total = total_of(parts) if parts else ad.Tensor(0.0)
    return LossBreakdown(total, values["y"], values["l"], values["b"], B)


# ---------------------------------------------------------------- optimizers


def clip_gradients(params, clip_norm: float | None) -> float:
    """Scale grads to global norm <= clip_norm; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if clip_norm is not None and norm > clip_norm:
        scale = clip_norm / norm if norm > 0 else 0.0
        for p in params:
            p.grad = p.grad * scale
    return norm


class Optimizer:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self):
        for p in self.params:
            p.data -= self.lr * p.grad


class Adadelta(Optimizer):
    """Per-parameter adaptive steps from running averages of g^2 and dx^2."""

    def __init__(self, params, lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6):
        super().__init__(params, lr)
        self.rho, self.eps = rho, eps
        self.eg = [np.zeros_like(p.data) for p in self.params]
        self.edx = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        rho, eps = self.rho, self.eps
        for p, eg, edx in zip(self.params, self.eg, self.edx):
            g = p.grad
            eg *= rho
            eg += (1 - rho) * g * g
            dx = -np.sqrt(edx + eps) / np.sqrt(eg + eps) * g
            edx *= rho
            edx += (1 - rho) * dx * dx
            p.data += self.lr * dx


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(model: Seq2Seq, cfg: TrainConfig) -> Optimizer:
    params = model.params.values()
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr)
    if cfg.optimizer == "adadelta":
        return Adadelta(params, cfg.lr)
    return Adam(params, cfg.lr)


# ---------------------------------------------------------------- loops


@dataclass
class EpochStats:
    epoch: int
    loss_total: float
    loss_y: float
    loss_l: float
    loss_b: float
    grad_norm: float
    n_batches: int

    def log_line(self, wallclock: float) -> str:
        return (f"{self.epoch}\t{self.loss_total:.6f}\t{self.loss_y:.6f}\t{self.loss_l:.6f}\t"
                f"{self.loss_b:.6f}\t{self.grad_norm:.6f}\t{wallclock:.3f}")


@dataclass
class Trainer:
    model: Seq2Seq
    cfg: TrainConfig
    vocab_src: Vocab
    vocab_tgt: Vocab
    vocab_tag: Vocab | None = None
    optimizer: Optimizer | None = None
    epoch: int = 0
    steps: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = make_optimizer(self.model, self.cfg)

    def train_step(self, batch: Batch) -> tuple[LossBreakdown, float]:
        cfg = self.cfg
        self.model.zero_grad()
        with ad.Tape():
            try:
                lb = joint_loss(self.model, batch, cfg.lambda_y, cfg.lambda_l, cfg.lambda_b)
            except FloatingPointError as err:
                raise TrainingDiverged(f"non-finite forward pass at step {self.steps}: {err}") from err
            loss = float(lb.total.data)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {self.steps}: "
                                       f"y={lb.y} l={lb.l} b={lb.b}")
            if lb.total.requires_grad:
                ad.backward(lb.total)
        params = list(self.model.params.values())
        norm = clip_gradients(params, cfg.clip_norm)
        self.optimizer.step()
        self.steps += 1
        return lb, norm

    def train_epoch(self, examples: Sequence[ParallelExample]) -> EpochStats:
        rng = np.random.default_rng([self.cfg.seed, self.epoch])
        sums = np.zeros(4)
        norms, n_sent, n_batches = 0.0, 0, 0
        for chunk in iterate_batches(examples, self.cfg.batch_size, rng):
            batch = encode_batch(chunk, self.vocab_src, self.vocab_tgt, self.vocab_tag)
            lb, norm = self.train_step(batch)
            k = lb.n_sentences
            sums += k * np.array([float(lb.total.data), lb.y, lb.l, lb.b])
            norms += norm
            n_sent += k
            n_batches += 1
        self.epoch += 1
        mean = sums / max(n_sent, 1)
        stats = EpochStats(self.epoch, *mean, grad_norm=norms / max(n_batches, 1), n_batches=n_batches)
        self.history.append(stats)
        return stats


def train_epoch(trainer: Trainer, examples: Sequence[ParallelExample]) -> EpochStats:
    return trainer.train_epoch(examples)


# ---------------------------------------------------------------- evaluation


@dataclass
class TeacherForcedReport:
    token_accuracy: float
    boundary_accuracy: float
    tag_accuracy: float
    n_tokens: int
    n_boundary_positions: int
    n_chunks: int


def teacher_forced_eval(model: Seq2Seq, examples: Sequence[ParallelExample], vocab_src: Vocab,
                        vocab_tgt: Vocab, vocab_tag: Vocab | None = None,
                        batch_size: int = 64) -> TeacherForcedReport:
    """Next-token, gate and tag argmax accuracies given gold history.

    Boundary accuracy is scored at positions t >= 2; tag accuracy at gold
    chunk-opening positions.
    """
    tok = [0, 0]
    bnd = [0, 0]
    tag = [0, 0]
    for chunk in iterate_batches(examples, batch_size):
        batch = encode_batch(chunk, vocab_src, vocab_tgt, vocab_tag if model.config.biscale else None)
        ann, state, y_prev = model.start(batch.src, batch.src_mask)
        m = batch.tgt_mask
        for t in range(batch.tgt.shape[1]):
            gold_b = np.where(m[:, t], batch.boundaries[:, t], 0) if model.config.biscale else None
            state, out = model.decoder_step(state, y_prev, ann, gold_b)
            pred = out.logits.data.argmax(axis=-1)
            tok[0] += int(np.sum((pred == batch.tgt[:, t]) & m[:, t]))
            tok[1] += int(m[:, t].sum())
            if model.config.biscale:
                if t >= 1:
                    gp = out.boundary_logits.data.argmax(axis=-1)
                    bnd[0] += int(np.sum((gp == batch.boundaries[:, t]) & m[:, t]))
                    bnd[1] += int(m[:, t].sum())
                rows = out.tag_rows
                if rows.size:
                    tp = out.tag_logits.data.argmax(axis=-1)
                    ok = m[rows, t]
                    tag[0] += int(np.sum((tp == batch.tags[rows, t]) & ok))
                    tag[1] += int(ok.sum())
            y_prev = batch.tgt[:, t]
    frac = lambda c: c[0] / c[1] if c[1] else float("nan")  # noqa: E731
    return TeacherForcedReport(frac(tok), frac(bnd), frac(tag), tok[1], bnd[1], tag[1])


def overfit_probe(model: Seq2Seq, examples: Sequence[ParallelExample], steps: int,
                  vocab_src: Vocab, vocab_tgt: Vocab, vocab_tag: Vocab | None = None,
                  cfg: TrainConfig | None = None) -> TeacherForcedReport:
    """Train full-batch on a tiny corpus for ``steps`` updates, then report accuracies."""
    if len(examples) > 32:
        raise ValueError("overfit probe expects at most 32 sentences")
    cfg = cfg or TrainConfig(optimizer="adam", lr=1e-2, batch_size=len(examples))
    trainer = Trainer(model, cfg, vocab_src, vocab_tgt, vocab_tag if model.config.biscale else None)
    batch = encode_batch(list(examples), vocab_src, vocab_tgt,
                         vocab_tag if model.config.biscale else None)
    for _ in range(steps):
        trainer.train_step(batch)
    return teacher_forced_eval(model, examples, vocab_src, vocab_tgt, vocab_tag)
