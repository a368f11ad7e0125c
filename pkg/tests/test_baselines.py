import numpy as np
import pytest

from oracles import pn_posterior
from pcn.baselines import CEConfig, CEHead, ce_rank, ce_train, knn_classify, knn_rank, pn_config, posthoc_protos, sample_minibatch
from pcn.datagen import TRAIN, VAL, Dataset
from pcn.episodic import EpisodeConfig, build_test_prototypes, embed
from pcn.numerics import net_init
from pcn.protobank import class_posterior


def _two_blobs(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(-3, 0.3, size=(n, 2)), rng.normal(3, 0.3, size=(n, 2))])
    y = np.repeat([0, 1], n)
    split = np.where(np.arange(2 * n) % 4 == 0, VAL, TRAIN)
    return Dataset(X, y, split, 2, 0)


def test_pn_config():
    cfg, m_base, m_novel = pn_config(EpisodeConfig(alpha=0.7, n_way=4))
    assert (cfg.alpha, cfg.n_way, m_base, m_novel) == (0.0, 4, 1, 1)


def test_knn_examples():
    train = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    assert knn_classify(train, [2, 7, 9], [5.0, 5.0], 1)[0] == 9
    pts = np.array([[0.0], [0.1], [0.2], [10.0]])
    pred, ranking = knn_classify(pts, [0, 0, 1, 1], [0.05], 3)
    assert pred == 0
    assert [c for c, _, _ in ranking] == [0, 1]
    assert knn_classify(pts, [0, 0, 1, 1], [0.05], 99)[0] == 0


def test_knn_ties_and_absent_classes():
    pts = np.array([[-1.0], [2.0]])
    # one vote each: the nearer neighbour's class wins
    assert knn_rank(pts, [5, 3], [[0.0]], 2).tolist() == [[5, 3]]
    # equal counts and distances: lower id wins
    assert knn_rank(np.array([[-1.0], [1.0]]), [5, 3], [[0.0]], 2).tolist() == [[3, 5]]
    assert knn_rank(pts, [5, 3], [[0.0]], 1, classes=[3, 5, 8]).tolist() == [[5, 3, 8]]


def test_knn_permutation_invariant():
    rng = np.random.default_rng(3)
    train = rng.integers(0, 3, size=(30, 2)).astype(float)
    labels = rng.integers(0, 4, size=30)
    queries = rng.integers(0, 3, size=(10, 2)).astype(float)
    a = knn_rank(train, labels, queries, 5, classes=range(4))
    perm = rng.permutation(30)
    b = knn_rank(train[perm], labels[perm], queries, 5, classes=range(4))
    assert np.array_equal(a, b)


def test_balanced_sampler_statistics():
    pools = {0: np.arange(90), 1: np.arange(90, 100)}
    rng = np.random.default_rng(0)
    idx = np.concatenate([sample_minibatch(pools, 100, rng, True) for _ in range(100)])
    share = np.mean(idx >= 90)
    assert abs(share - 0.5) <= 0.05
    plain = np.concatenate([sample_minibatch(pools, 100, rng, False) for _ in range(100)])
    assert abs(np.mean(plain >= 90) - 0.1) <= 0.05


def test_ce_train_separable():
    ds = _two_blobs()
    net = net_init([2, 8, 4], 0)
    head = CEHead.init(4, [0, 1], 1)
    hyper = CEConfig(learning_rate=1e-2, batches_per_epoch=20, max_epochs=5, patience=5)
    net, head, history = ce_train(net, head, ds, True, hyper, seed=0)
    assert max(h["val_mca"] for h in history) == 1.0
    val = ds.indices(split=VAL)
    assert np.array_equal(ce_rank(net, head, ds.X[val])[:, 0], ds.y[val])
    p = head.proba(embed(net, ds.X))
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)


def test_posthoc_single_prototype_is_pn():
    ds = _two_blobs()
    net = net_init([2, 6, 3], 2)
    bank = posthoc_protos(net, ds, 1, 1, seed=0)
    plain = build_test_prototypes(net, ds, 1, 1, seed=5)
    E = embed(net, ds.X[:7])
    means = [embed(net, ds.X[ds.indices(cls=c, split=TRAIN)]).mean(axis=0) for c in (0, 1)]
    for e in E:
        np.testing.assert_allclose(class_posterior(e, bank), pn_posterior(e, means), atol=1e-10)
        np.testing.assert_allclose(class_posterior(e, bank), class_posterior(e, plain), atol=1e-12)
    many = posthoc_protos(net, ds, 4, 4, seed=0)
    assert all(many.n_prototypes(c) == 4 for c in (0, 1))
