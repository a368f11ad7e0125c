"""Comparison systems.

* Prototypical networks are not a separate code path: :func:`pn_config`
  returns the prototype-mixture configuration with one prototype per class and
  no prototype memory.
* Post-hoc clustering re-clusters a single-prototype model's embeddings.
* k-nearest-neighbour classification in embedding space.
* A softmax cross-entropy head trained on top of the same trunk.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .datagen import TRAIN, VAL
from .episodic import EpisodeConfig, build_test_prototypes, embed
from .exceptions import ConfigurationError, StateError
from .metrics import mca
from .numerics import AdamState, EmbedNet, adam_step, net_forward, net_gradients, net_init
from .protobank import pairwise_sq_dists


def pn_config(cfg=None):
    """Return ``(episode_config, M_base, M_novel)`` for a prototypical network."""
    cfg = cfg or EpisodeConfig()
    return replace(cfg, alpha=0.0), 1, 1


def posthoc_protos(pn_net, dataset, M_base, M_novel, seed, support=None, tau=1.0):
    """Cluster a trained single-prototype model's embeddings into several prototypes."""
    return build_test_prototypes(pn_net, dataset, M_base, M_novel, seed, support=support, tau=tau, alpha=0.0)


def knn_classify(train_embs, train_labels, query_emb, k):
    """Predict by majority vote among the ``k`` nearest training embeddings.

    Returns ``(prediction, ranking)`` where ``ranking`` is a list of
    ``(class_id, count, mean_distance)`` ordered by count, then mean distance,
    then class id. Classes absent from the neighbourhood follow by class id.
    """
    ranked, detail = knn_rank(train_embs, train_labels, np.atleast_2d(query_emb), k, return_detail=True)
    return int(ranked[0, 0]), detail[0]


def knn_rank(train_embs, train_labels, queries, k, classes=None, return_detail=False):
    """Class rankings for every query row; see :func:`knn_classify`."""
    train_embs = np.atleast_2d(np.asarray(train_embs, dtype=np.float64))
    train_labels = np.asarray(train_labels)
    if len(train_labels) == 0:
        raise StateError("k-NN needs at least one training example")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    k = min(int(k), len(train_labels))
    classes = sorted(set(train_labels.tolist())) if classes is None else sorted(classes)
    d = np.sqrt(pairwise_sq_dists(queries, train_embs))
    # distance ties resolved on label then position so the result ignores training order
    out = np.empty((len(d), len(classes)), dtype=np.int64)
    details = []
    for i, row in enumerate(d):
        order = np.lexsort((train_labels, row))[:k]
        stats = {}
        for j in order:
            c = int(train_labels[j])
            cnt, tot = stats.get(c, (0, 0.0))
            stats[c] = (cnt + 1, tot + row[j])
        voted = sorted(
            ((c, cnt, tot / cnt) for c, (cnt, tot) in stats.items()), key=lambda t: (-t[1], t[2], t[0])
        )
        rest = [(c, 0, np.inf) for c in classes if c not in stats]
        ranking = voted + rest
        out[i] = [c for c, _, _ in ranking]
        details.append(ranking)
    return (out, details) if return_detail else out


@dataclass
class CEHead:
    """Linear softmax layer over embeddings for an ordered list of classes."""

    weight: np.ndarray
    bias: np.ndarray
    classes: list = field(default_factory=list)

    @classmethod
    def init(cls, emb_dim, classes, seed):
        layer = net_init([emb_dim, len(classes)], seed)
        return cls(layer.weights[0], layer.biases[0], list(classes))

    def as_layer(self):
        return EmbedNet([self.weight.shape[1], self.weight.shape[0]], [self.weight], [self.bias])

    def logits(self, embs):
        return embs @ self.weight.T + self.bias

    def proba(self, embs):
        z = self.logits(embs)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class CEConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 64
    batches_per_epoch: int = 50
    max_epochs: int = 50
    patience: int = 10


def sample_minibatch(pools, batch_size, rng, class_balanced):
    """Example indices for one minibatch.

    With ``class_balanced`` a class is drawn uniformly first and then an
    example uniformly within it; otherwise examples are drawn uniformly.
    """
    classes = list(pools)
    if class_balanced:
        picks = rng.integers(len(classes), size=batch_size)
        return np.array([pools[classes[p]][rng.integers(len(pools[classes[p]]))] for p in picks])
    everything = np.concatenate([pools[c] for c in classes])
    return everything[rng.integers(len(everything), size=batch_size)]


def ce_loss(net, head, X, y_cols):
    """Mean cross entropy and gradients for the trunk and the head."""
    emb, tape = net_forward(net, X)
    head_layer = head.as_layer()
    logits, head_tape = net_forward(head_layer, emb)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y_cols)
    loss = -float(logp[np.arange(n), y_cols].mean())
    g = np.exp(logp)
    g[np.arange(n), y_cols] -= 1.0
    g /= n
    head_grads = net_gradients(head_tape, g)
    trunk_grads = net_gradients(tape, g @ head.weight)
    return loss, trunk_grads, head_grads


def ce_train(net, head, dataset, class_balanced=True, hyper=None, seed=0, classes=None, extra_train=None):
    """Train trunk and head with softmax cross entropy and early stopping.

    ``classes`` defaults to the head's classes. ``extra_train`` maps class id
    to additional training indices (e.g. novel-class support examples when
    training on base and novel classes together).
    Returns ``(net, head, history)`` for the best validation epoch.
    """
    hyper = hyper or CEConfig()
    classes = list(head.classes) if classes is None else list(classes)
    col = {c: i for i, c in enumerate(head.classes)}
    pools = {}
    for c in classes:
        idx = dataset.indices(cls=c, split=TRAIN) if c in dataset.base_classes else np.zeros(0, dtype=np.int64)
        if extra_train and c in extra_train:
            idx = np.concatenate([idx, np.asarray(extra_train[c], dtype=np.int64)])
        if len(idx) == 0:
            raise StateError(f"class {c} has no training examples")
        pools[c] = idx
    val_idx = np.flatnonzero(np.isin(dataset.y, classes) & (dataset.split == VAL))

    rng = rngmod.stream(seed, "ce")
    net_opt = AdamState.for_net(net, learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay)
    head_layer = head.as_layer()
    head_opt = AdamState.for_net(head_layer, learning_rate=hyper.learning_rate, weight_decay=hyper.weight_decay)
    best, stale, history = None, 0, []
    for epoch in range(hyper.max_epochs):
        losses = []
        for _ in range(hyper.batches_per_epoch):
            idx = sample_minibatch(pools, hyper.batch_size, rng, class_balanced)
            y_cols = np.array([col[int(c)] for c in dataset.y[idx]])
            loss, g_net, g_head = ce_loss(net, head, dataset.X[idx], y_cols)
            net, net_opt = adam_step(net, g_net, net_opt)
            head_layer, head_opt = adam_step(head.as_layer(), g_head, head_opt)
            head = CEHead(head_layer.weights[0], head_layer.biases[0], head.classes)
            losses.append(loss)
        if len(val_idx):
            ranked = ce_rank(net, head, dataset.X[val_idx])
            val = mca(ranked, dataset.y[val_idx])
        else:
            val = -float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_mca": val})
        if best is None or val > best[0]:
            best, stale = (val, net.copy(), CEHead(head.weight.copy(), head.bias.copy(), head.classes)), 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
    return best[1], best[2], history


def ce_rank(net, head, X):
    logits = head.logits(embed(net, X))
    order = np.argsort(-logits, axis=1, kind="stable")
    return np.asarray(head.classes)[order]
