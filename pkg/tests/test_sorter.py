"""Sorting network tests: Sinkhorn properties, encoding, training mechanics."""

import numpy as np
import pytest

from ctrlcap import autodiff as ad
from ctrlcap.autodiff import Tensor
from ctrlcap.data import GrammarConfig, generate_corpus
from ctrlcap.errors import ConfigError, UsageError
from ctrlcap.metrics import hungarian
from ctrlcap.sorter import (
    SorterConfig,
    SorterTrainConfig,
    SortNetParams,
    encode_region,
    encode_set,
    evaluate_sorter,
    ordered_sequences,
    reconstruction_loss,
    score_matrix,
    sinkhorn,
    sort_control,
    sort_region_sets,
    train_sorter,
)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(0, 8, GrammarConfig(order="spatial"))


@pytest.fixture(scope="module")
def params(corpus):
    cfg = SorterConfig(feat_dim=corpus.feat_dim, emb_dim=corpus.emb_dim)
    return SortNetParams.init(cfg, 0)


# ----------------------------------------------------------------- sinkhorn


def test_sinkhorn_is_doubly_stochastic():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 9))
        s = sinkhorn(rng.standard_normal((n, n)), iters=20).data
        np.testing.assert_allclose(s.sum(axis=1), np.ones(n), atol=1e-3)
        np.testing.assert_allclose(s.sum(axis=0), np.ones(n), atol=1e-3)
        assert np.all(s > 0)


def test_sinkhorn_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 5))
    a = sinkhorn(x, iters=10).data
    b = sinkhorn(x + 42.0, iters=10).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_sinkhorn_sharp_input_recovers_permutation():
    perm = np.array([2, 0, 3, 1])
    x = np.full((4, 4), -20.0)
    x[np.arange(4), perm] = 20.0
    s = sinkhorn(x, iters=20).data
    pairs = hungarian(-s)
    assert [j for _, j in pairs] == list(perm)
    assert s[np.arange(4), perm].min() > 0.99


def test_sinkhorn_is_differentiable():
    x = Tensor(np.random.default_rng(2).standard_normal((3, 3)), requires_grad=True)
    ad.backward(ad.tsum(sinkhorn(x, iters=5) * Tensor(np.eye(3))))
    assert x.grad is not None and np.all(np.isfinite(x.grad))


# ----------------------------------------------------------------- encoding


def test_encode_set_is_mean_of_regions(corpus, params):
    rs = corpus.samples()[0].control.sets[0]
    enc = encode_set(params, rs).data
    per_region = np.stack([encode_region(params, r).data for r in rs.regions])
    np.testing.assert_allclose(enc, per_region.mean(axis=0), atol=1e-12)
    assert np.all(np.abs(enc) <= 1.0)  # tanh head


def test_encode_set_is_order_invariant(corpus, params):
    sets = [s for s in corpus.samples()[0].control.sets if len(s) >= 2]
    if not sets:
        pytest.skip("no multi-region set in fixture")
    rs = sets[0]
    import copy

    swapped = copy.copy(rs)
    swapped.regions = rs.regions[::-1]
    np.testing.assert_allclose(
        encode_set(params, rs).data, encode_set(params, swapped).data, atol=1e-12
    )


def test_score_matrix_shape_and_errors(corpus, params):
    sets = corpus.samples()[0].control.sets
    m = score_matrix(params, sets)
    assert m.shape == (len(sets), len(sets))
    with pytest.raises(UsageError):
        score_matrix(params, [])
    too_many = sets * 6
    with pytest.raises(UsageError):
        score_matrix(params, too_many[: params.config.n_max + 1])


def test_sort_returns_bijection(corpus, params):
    for sample in corpus.samples()[:5]:
        sets = sample.control.sets
        order = sort_region_sets(params, sets)
        assert sorted(order) == list(range(len(sets)))
        control = sort_control(params, sets)
        assert len(control) == len(sets)


def test_single_set_is_trivially_sorted(corpus, params):
    rs = corpus.samples()[0].control.sets[0]
    assert sort_region_sets(params, [rs]) == [0]


# ----------------------------------------------------------------- training


def test_reconstruction_loss_prefers_correct_permutation(corpus, params):
    seq = next(s.control.sets for s in corpus.samples() if len(s.control) >= 3)
    aligned = reconstruction_loss(params, list(seq), list(seq))
    assert aligned.item() >= 0.0


def test_training_reduces_loss_and_is_deterministic(corpus):
    seqs = ordered_sequences(corpus)

    def run():
        cfg = SorterConfig(feat_dim=corpus.feat_dim, emb_dim=corpus.emb_dim)
        p = SortNetParams.init(cfg, 0)
        tc = SorterTrainConfig(seed=0, lr=3e-3, lr_decay=1.0, epochs=6, batch_size=8,
                               eval_every=3, patience=10)
        p, rows = train_sorter(tc, p, seqs)
        return p, rows

    p1, rows1 = run()
    p2, rows2 = run()
    assert rows1[-1]["mse"] < rows1[0]["mse"]
    assert rows1 == rows2
    for k in p1.tensors:
        np.testing.assert_array_equal(p1[k].data, p2[k].data)


def test_evaluate_sorter_bounds(corpus, params):
    seqs = ordered_sequences(corpus)
    acc, tau = evaluate_sorter(params, seqs, np.random.default_rng(0))
    assert 0.0 <= acc <= 1.0
    assert -1.0 <= tau <= 1.0


def test_train_sorter_validation(corpus, params):
    with pytest.raises(ConfigError):
        train_sorter(SorterTrainConfig(lr=0.0), params, ordered_sequences(corpus))
    with pytest.raises(ConfigError):
        train_sorter(SorterTrainConfig(), params, [])


def test_ordered_sequences_min_length(corpus):
    for seq in ordered_sequences(corpus, min_len=3):
        assert len(seq) >= 3


# -------------------------------------------------------------- checkpoints


def test_sorter_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "s.json"
    params.save(path)
    loaded = SortNetParams.load(path)
    assert loaded.config == params.config
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(loaded[name].data, t.data)
