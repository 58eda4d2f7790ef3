"""Cross-entropy pretraining and self-critical fine-tuning.

The XE objective mixes a word term (weight 0.2) and a binary chunk-gate term
(weight 0.8), averaged per token. The RL phase is self-critical: the sampled
decode's reward is baselined by the greedy decode's reward, and the advantage
scales the log-prob of the sampled word and gate actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decode
from .autodiff import Tensor
from .data import Corpus, Sample
from .errors import ConfigError, NumericError
from .metrics import CiderStats, cider_d, cider_stats, nw_score
from .model import ModelParams, teacher_forced_pass

_LOG_EPS = 1e-12


@dataclass
class TrainConfig:
    seed: int = 0
    lr_xe: float = 5e-4
    lr_decay: float = 0.8          # per-epoch multiplicative decay (XE phase)
    lr_rl: float = 5e-5
    batch_size: int = 100
    word_weight: float = 0.2
    gate_weight: float = 0.8
    lambda_cider: float = 1.0
    lambda_nw: float = 2.0
    xe_epochs: int = 100
    rl_steps: int = 0
    rl_batch_size: int = 10
    grad_clip: float = 5.0
    eval_every: int = 10
    patience: int = 10             # eval rounds without val CIDEr-D improvement
    max_len: int = 30

    def validate(self):
        if self.lr_xe <= 0 or self.lr_rl <= 0:
            raise ConfigError("learning rates must be positive")
        if min(self.word_weight, self.gate_weight, self.lambda_cider, self.lambda_nw) < 0:
            raise ConfigError("loss and reward weights must be nonnegative")
        if self.batch_size < 1 or self.rl_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.xe_epochs < 0 or self.rl_steps < 0:
            raise ConfigError("epoch/step counts must be nonnegative")


class Adam:
    """Adaptive-moment optimizer over a named tensor dict."""

    def __init__(self, tensors: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.tensors = tensors
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in tensors.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in tensors.items()}

    def step(self):
        self.t += 1
        for k, p in self.tensors.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {k!r} became non-finite after update")


def clip_gradients(tensors: dict[str, Tensor], max_norm: float):
    total = math.sqrt(
        sum(float((p.grad * p.grad).sum()) for p in tensors.values() if p.grad is not None)
    )
    if total > max_norm > 0:
        scale = max_norm / total
        for p in tensors.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def xe_loss(step_outputs, sample: Sample, word_weight=0.2, gate_weight=0.8) -> Tensor:
    """Per-token mean of the weighted word and gate cross-entropies."""
    caption = sample.caption
    total = None
    for out, target, gate in zip(step_outputs, caption.tokens, caption.gates):
        word_term = -ad.pick(out.word_logprobs, target)
        p1 = ad.clip_min(out.gate_prob, _LOG_EPS)
        p0 = ad.clip_min(1.0 - out.gate_prob, _LOG_EPS)
        gate_term = -ad.log(p1 if gate else p0)
        term = word_weight * word_term + gate_weight * gate_term
        total = term if total is None else total + term
    return total * (1.0 / len(caption.tokens))


class CaptionReward:
    """Weighted CIDEr-D + alignment reward against control-matched references."""

    def __init__(self, corpus: Corpus, stats: CiderStats, lambda_cider=1.0, lambda_nw=2.0):
        self.corpus = corpus
        self.stats = stats
        self.lambda_cider = lambda_cider
        self.lambda_nw = lambda_nw

    def __call__(self, tokens, gates, sample: Sample) -> float:
        eos = self.corpus.vocab.eos_id
        cand = [t for t in tokens if t != eos]
        r = 0.0
        if self.lambda_cider:
            refs = [cap.tokens[:-1] for cap in self.corpus.references_for(sample)]
            r += self.lambda_cider * cider_d(cand, refs, self.stats)
        if self.lambda_nw:
            # best-ref = the reference built for this control signal
            r += self.lambda_nw * nw_score(
                self.corpus.decoded_nouns(tokens),
                self.corpus.nouns_of(sample.caption),
                self.corpus.noun_table,
            )
        if not math.isfinite(r):
            raise NumericError("reward is non-finite")
        return r


def reward_stats_for(reward_fn, batch, decodes):
    return float(np.mean([reward_fn(t, g, s) for (t, g), s in zip(decodes, batch)]))


def scst_step(params: ModelParams, batch: list[Sample], reward_fn, rng, optimizer: Adam,
              grad_clip=5.0, max_len=30):
    """One self-critical update over a batch; returns reward statistics."""
    params.zero_grads()
    loss = None
    sampled_rewards, greedy_rewards = [], []
    for sample in batch:
        control = sample.control
        desc = sample.image_desc
        greedy_tokens, greedy_gates = decode.greedy_decode(params, desc, control, max_len)
        s_tokens, s_gates, _ = decode.sample_decode(params, desc, control, rng, max_len)
        baseline = reward_fn(greedy_tokens, greedy_gates, sample)
        r = reward_fn(s_tokens, s_gates, sample)
        greedy_rewards.append(baseline)
        sampled_rewards.append(r)
        advantage = r - baseline
        if advantage == 0.0:
            continue
        logp = decode.sequence_logprob(params, desc, control, s_tokens, s_gates)
        term = (-advantage / len(batch)) * logp
        loss = term if loss is None else loss + term
    if loss is not None:
        ad.backward(loss)
        clip_gradients(params.tensors, grad_clip)
    optimizer.step()
    params.zero_grads()
    return {
        "mean_sampled_reward": float(np.mean(sampled_rewards)),
        "mean_greedy_reward": float(np.mean(greedy_rewards)),
    }


def xe_epoch(params: ModelParams, samples: list[Sample], config: TrainConfig,
             optimizer: Adam, rng) -> float:
    """One cross-entropy epoch; returns the mean per-token loss."""
    order = rng.permutation(len(samples))
    losses = []
    for start in range(0, len(samples), config.batch_size):
        batch = [samples[i] for i in order[start : start + config.batch_size]]
        params.zero_grads()
        loss = None
        for sample in batch:
            outs = teacher_forced_pass(params, sample)
            term = xe_loss(outs, sample, config.word_weight, config.gate_weight)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / len(batch))
        losses.append(loss.item())
        ad.backward(loss)
        clip_gradients(params.tensors, config.grad_clip)
        optimizer.step()
        params.zero_grads()
    return float(np.mean(losses))


def teacher_forced_accuracy(params: ModelParams, samples: list[Sample]):
    """Token and gate accuracy under teacher forcing."""
    tok_hits = tok_total = gate_hits = 0
    with ad.no_grad():
        for sample in samples:
            outs = teacher_forced_pass(params, sample)
            for out, target, gate in zip(outs, sample.caption.tokens, sample.caption.gates):
                tok_hits += int(np.argmax(out.word_logprobs.data) == target)
                gate_hits += int(int(out.gate_prob.item() > 0.5) == gate)
                tok_total += 1
    return tok_hits / tok_total, gate_hits / tok_total


def train(config: TrainConfig, params: ModelParams, train_corpus: Corpus,
          val_corpus: Corpus | None = None, log_cb=None):
    """XE phase with early stopping on validation CIDEr-D, then optional SCST.

    Returns (params, log_rows). log_cb, when given, receives each row as it
    is produced (the CLI streams them into the metrics JSONL).
    """
    from .evaluation import evaluate_sequence  # local import, avoids a cycle

    config.validate()
    rng = np.random.default_rng(config.seed)
    samples = train_corpus.samples()
    if not samples:
        raise ConfigError("training corpus has no samples")
    stats = corpus_cider_stats(train_corpus)
    reward_fn = CaptionReward(train_corpus, stats, config.lambda_cider, config.lambda_nw)

    rows = []

    def emit(row):
        rows.append(row)
        if log_cb:
            log_cb(row)

    optimizer = Adam(params.tensors, config.lr_xe)
    best_val = -math.inf
    stale = 0
    for epoch in range(1, config.xe_epochs + 1):
        loss = xe_epoch(params, samples, config, optimizer, rng)
        optimizer.lr *= config.lr_decay
        if epoch % config.eval_every == 0 or epoch == config.xe_epochs:
            tok_acc, gate_acc = teacher_forced_accuracy(params, samples)
            row = {"epoch": epoch, "split": "train", "phase": "xe", "xe_loss": loss,
                   "token_acc": tok_acc, "gate_acc": gate_acc,
                   "cider_d": None, "nw": None, "iou": None}
            emit(row)
            if val_corpus is not None and val_corpus.images:
                rep = evaluate_sequence(params, val_corpus, max_len=config.max_len)
                emit({"epoch": epoch, "split": "val", "phase": "xe", "xe_loss": None,
                      "token_acc": None, "gate_acc": None,
                      "cider_d": rep["cider_d"], "nw": rep["nw"], "iou": rep["iou"]})
                if rep["cider_d"] > best_val + 1e-9:
                    best_val = rep["cider_d"]
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        break

    if config.rl_steps:
        rl_opt = Adam(params.tensors, config.lr_rl)
        for it in range(1, config.rl_steps + 1):
            idx = rng.choice(len(samples), size=min(config.rl_batch_size, len(samples)), replace=False)
            batch = [samples[i] for i in idx]
            stats_row = scst_step(params, batch, reward_fn, rng, rl_opt,
                                  config.grad_clip, config.max_len)
            if it % max(1, config.eval_every) == 0 or it == config.rl_steps:
                emit({"epoch": it, "split": "train", "phase": "rl",
                      "xe_loss": None, "token_acc": None, "gate_acc": None,
                      "cider_d": None, "nw": None, "iou": None,
                      **stats_row})
    return params, rows


def corpus_cider_stats(corpus: Corpus) -> CiderStats:
    """Document frequencies over a corpus, one document per image."""
    groups = [[cap.tokens[:-1] for cap in img.captions] for img in corpus.images]
    return cider_stats(groups)
