"""Sorting network: learns to order a scrambled set of region sets.

Each region runs through a small fully connected net (visual branch, textual
branch, merged with geometry, tanh head) producing position scores; scores
are mean-pooled over a region set. Stacking the per-set score vectors gives a
square matrix that the Sinkhorn operator relaxes into a soft permutation;
the Hungarian algorithm hardens it at decode time.

Training minimizes the MSE between the scrambled per-set features and the
soft permutation applied to the features in ground-truth mention order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ControlSignal, Corpus, RegionSet
from .errors import ConfigError, UsageError
from .metrics import hungarian, kendall_tau, ranking_accuracy
from .model import CHECKPOINT_VERSION, _read_checkpoint
from .train import Adam


@dataclass
class SorterConfig:
    """Desk-scale widths; the full-scale reference is (512, 128) visual,
    128 textual and 256 merged over 2048/300-d inputs."""

    feat_dim: int = 64
    emb_dim: int = 16
    visual_dims: tuple = (32, 16)
    textual_dim: int = 16
    merge_dim: int = 32
    n_max: int = 10
    sinkhorn_iters: int = 20
    temperature: float = 1.0


class SortNetParams:
    def __init__(self, config: SorterConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: SorterConfig, seed: int) -> "SortNetParams":
        rng = np.random.default_rng(seed)

        def glorot(out_d, in_d):
            s = math.sqrt(6.0 / (in_d + out_d))
            return Tensor(rng.uniform(-s, s, size=(out_d, in_d)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        v1, v2 = config.visual_dims
        merged_in = v2 + config.textual_dim + 4
        tensors = {
            "Wv1": glorot(v1, config.feat_dim), "bv1": zeros(v1),
            "Wv2": glorot(v2, v1), "bv2": zeros(v2),
            "Wt": glorot(config.textual_dim, config.emb_dim), "bt": zeros(config.textual_dim),
            "Wm": glorot(config.merge_dim, merged_in), "bm": zeros(config.merge_dim),
            "Wh": glorot(config.n_max, config.merge_dim), "bh": zeros(config.n_max),
        }
        return cls(config, tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def save(self, path):
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "sorter",
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for name, t in self.tensors.items()
            },
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SortNetParams":
        payload = _read_checkpoint(path, "sorter")
        cfg = payload["config"]
        cfg["visual_dims"] = tuple(cfg["visual_dims"])
        config = SorterConfig(**cfg)
        tensors = {
            name: Tensor(np.array(rec["data"]).reshape(rec["shape"]), requires_grad=True)
            for name, rec in payload["params"].items()
        }
        return cls(config, tensors)


def sinkhorn(x, iters: int = 20) -> Tensor:
    """L rounds of row- then column-normalization of exp(X).

    The global max is subtracted before exponentiating; the first row
    normalization cancels the shift, so the result is unchanged.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    s = ad.exp(x - float(x.data.max()))
    for _ in range(iters):
        s = s / ad.tsum(s, axis=1, keepdims=True)
        s = s / ad.tsum(s, axis=0, keepdims=True)
    return s


def encode_region(params: SortNetParams, region) -> Tensor:
    p = params
    vis = ad.relu(p["Wv1"] @ Tensor(region.feat) + p["bv1"])
    vis = ad.relu(p["Wv2"] @ vis + p["bv2"])
    txt = ad.relu(p["Wt"] @ Tensor(region.class_emb) + p["bt"])
    merged = ad.relu(p["Wm"] @ ad.concat([vis, txt, Tensor(region.geom)]) + p["bm"])
    return ad.tanh(p["Wh"] @ merged + p["bh"])


def encode_set(params: SortNetParams, region_set: RegionSet) -> Tensor:
    """Position-score vector of a region set: mean of its region encodings."""
    encoded = [encode_region(params, r) for r in region_set.regions]
    if len(encoded) == 1:
        return encoded[0]
    return ad.tmean(ad.stack(encoded), axis=0)


def score_matrix(params: SortNetParams, sets: list[RegionSet]) -> Tensor:
    n = len(sets)
    if n == 0:
        raise UsageError("cannot sort an empty collection of region sets")
    if n > params.config.n_max:
        raise UsageError(f"{n} region sets exceed n_max={params.config.n_max}")
    rows = ad.stack([encode_set(params, s) for s in sets])
    return rows[:, :n] * (1.0 / params.config.temperature)


def soft_permutation(params: SortNetParams, sets: list[RegionSet]) -> Tensor:
    return sinkhorn(score_matrix(params, sets), params.config.sinkhorn_iters)


def sort_region_sets(params: SortNetParams, scrambled: list[RegionSet]) -> list[int]:
    """Predicted ordering: item index to place at each output position."""
    with ad.no_grad():
        p = soft_permutation(params, scrambled)
    pairs = hungarian(-p.data)  # maximize soft-permutation mass
    position_to_item = {pos: item for item, pos in pairs}
    return [position_to_item[pos] for pos in range(len(scrambled))]


def sort_control(params: SortNetParams, scrambled: list[RegionSet]) -> ControlSignal:
    order = sort_region_sets(params, scrambled)
    return ControlSignal([scrambled[i] for i in order])


def set_features(region_set: RegionSet) -> np.ndarray:
    """Per-set target features for the reconstruction loss:
    feature mean ++ class-embedding mean ++ geometry mean."""
    return np.concatenate([
        np.mean([r.feat for r in region_set.regions], axis=0),
        np.mean([r.class_emb for r in region_set.regions], axis=0),
        np.mean([r.geom for r in region_set.regions], axis=0),
    ])


def reconstruction_loss(params: SortNetParams, scrambled: list[RegionSet],
                        sorted_sets: list[RegionSet]) -> Tensor:
    """MSE between scrambled features and the soft permutation applied to the
    ground-truth-ordered features."""
    p = soft_permutation(params, scrambled)
    target = Tensor(np.stack([set_features(s) for s in sorted_sets]))
    scrambled_feats = Tensor(np.stack([set_features(s) for s in scrambled]))
    diff = p @ target - scrambled_feats
    return ad.tmean(diff * diff)


@dataclass
class SorterTrainConfig:
    seed: int = 0
    lr: float = 5e-4
    lr_decay: float = 0.8
    epochs: int = 60
    batch_size: int = 16
    eval_every: int = 5
    patience: int = 6

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("sorter learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad sorter epoch/batch configuration")


def ordered_sequences(corpus: Corpus, min_len: int = 2) -> list[list[RegionSet]]:
    """Ground-truth-ordered region-set sequences from every caption."""
    return [
        list(s.control.sets)
        for s in corpus.samples()
        if len(s.control) >= min_len
    ]


def evaluate_sorter(params: SortNetParams, sequences: list[list[RegionSet]], rng):
    """Ranking accuracy and mean Kendall's tau over freshly scrambled inputs."""
    pairs, taus = [], []
    for seq in sequences:
        n = len(seq)
        perm = list(rng.permutation(n))
        scrambled = [seq[p] for p in perm]
        item_order = sort_region_sets(params, scrambled)
        pred = [perm[i] for i in item_order]
        pairs.append((pred, list(range(n))))
        taus.append(kendall_tau(pred, list(range(n))))
    return ranking_accuracy(pairs), float(np.mean(taus))


def train_sorter(config: SorterTrainConfig, params: SortNetParams,
                 train_sequences: list[list[RegionSet]],
                 val_sequences: list[list[RegionSet]] | None = None,
                 log_cb=None):
    """Gradient descent through the Sinkhorn relaxation; early stopping on
    validation ranking accuracy, best-scoring parameters restored at the end.
    Returns (params, log_rows)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    if not train_sequences:
        raise ConfigError("no training sequences of length >= 2 for the sorter")
    optimizer = Adam(params.tensors, config.lr)
    rows = []
    best = -1.0
    best_snapshot = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_sequences))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_sequences[i] for i in order[start : start + config.batch_size]]
            params.zero_grads()
            loss = None
            for seq in batch:
                perm = rng.permutation(len(seq))
                scrambled = [seq[p] for p in perm]
                term = reconstruction_loss(params, scrambled, seq)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            losses.append(loss.item())
            ad.backward(loss)
            optimizer.step()
            params.zero_grads()
        optimizer.lr *= config.lr_decay
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            eval_rng = np.random.default_rng(config.seed + 1)
            acc, tau = evaluate_sorter(params, val_sequences or train_sequences, eval_rng)
            row = {"epoch": epoch, "split": "val" if val_sequences else "train",
                   "phase": "sorter", "mse": float(np.mean(losses)),
                   "accuracy": acc, "tau": tau}
            rows.append(row)
            if log_cb:
                log_cb(row)
            if acc > best + 1e-12:
                best = acc
                best_snapshot = {k: t.data.copy() for k, t in params.tensors.items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best_snapshot is not None:
        for k, t in params.tensors.items():
            t.data = best_snapshot[k]
    return params, rows
