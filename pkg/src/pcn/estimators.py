"""scikit-learn compatible estimators.

``PrototypicalClusteringClassifier`` wraps episodic training and the
prototype-mixture classifier behind ``fit``/``predict``/``transform``. Setting
``n_prototypes=1`` and ``alpha=0`` turns it into a prototypical network.
New classes can be added after fitting from a handful of examples with
:meth:`PrototypicalClusteringClassifier.add_classes`, without retraining.
"""

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import rng as rngmod
from .baselines import CEConfig, CEHead, ce_train
from .datagen import TRAIN, VAL, Dataset
from .episodic import EpisodeConfig, embed, train
from .numerics import net_init
from .protobank import bank_from_embeddings, class_scores


def _holdout(X, codes, n_classes, fraction, seed):
    """Dataset with a per-class validation holdout of ``fraction``."""
    split = np.full(len(codes), TRAIN, dtype=np.int64)
    rng = rngmod.stream(seed, "split")
    for c in range(n_classes):
        idx = np.flatnonzero(codes == c)
        if len(idx) < 3 or fraction <= 0:
            continue
        n_val = min(len(idx) - 2, max(1, math.ceil(fraction * len(idx))))
        split[rng.permutation(idx)[:n_val]] = VAL
    if not np.any(split == VAL):
        raise ValueError("validation_fraction leaves no validation examples; add data or raise it")
    return Dataset(X, codes, split, n_classes, 0)


class PrototypicalClusteringClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Few-shot classifier with several learned prototypes per class.

    Parameters
    ----------
    hidden_dims : tuple of int
        Widths of the tanh hidden layers of the embedding network.
    embedding_dim : int
        Output dimension of the embedding.
    n_prototypes : int
        Prototypes per class seen during ``fit``.
    n_prototypes_novel : int
        Prototypes per class added through ``add_classes``.
    tau : float
        Temperature of the within-class responsibilities.
    alpha : float
        Weight of the previous prototype in the per-episode moving average.
    n_way, n_support, n_query, episodes_per_epoch : int
        Episode shape. ``n_way`` is reduced to the number of classes with
        enough training data when necessary.
    max_epochs, patience : int
        Early stopping on validation mean per-class accuracy.
    learning_rate, weight_decay : float
        Adam step size and L2 penalty.
    stop_grad_q : bool
        Treat responsibilities as constants when differentiating.
    validation_fraction : float
        Per-class share of ``fit`` data held out for early stopping.
    random_state : int
    """

    def __init__(self, hidden_dims=(64, 64), embedding_dim=16, n_prototypes=10, n_prototypes_novel=4, tau=1.0,
                 alpha=0.5, n_way=10, n_support=10, n_query=10, episodes_per_epoch=200, max_epochs=100,
                 patience=10, learning_rate=1e-4, weight_decay=1e-5, stop_grad_q=False,
                 validation_fraction=0.2, random_state=0):
        self.hidden_dims = hidden_dims
        self.embedding_dim = embedding_dim
        self.n_prototypes = n_prototypes
        self.n_prototypes_novel = n_prototypes_novel
        self.tau = tau
        self.alpha = alpha
        self.n_way = n_way
        self.n_support = n_support
        self.n_query = n_query
        self.episodes_per_epoch = episodes_per_epoch
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.stop_grad_q = stop_grad_q
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise ValueError("need at least two classes to fit")
        self.n_features_in_ = X.shape[1]
        data = _holdout(X, codes, n_classes, self.validation_fraction, self.random_state)

        counts = np.bincount(codes[data.split == TRAIN], minlength=n_classes)
        n_support = min(self.n_support, int(counts.max()) - 1)
        if n_support < 1:
            raise ValueError("every class has fewer than two training examples")
        eligible = int((counts >= n_support + 1).sum())
        n_way = min(self.n_way, eligible)
        if n_way < 2:
            raise ValueError("fewer than two classes have enough examples for an episode")
        cfg = EpisodeConfig(n_way, n_support, self.n_query, self.episodes_per_epoch, self.tau, self.alpha,
                            self.stop_grad_q)
        dims = [X.shape[1], *self.hidden_dims, self.embedding_dim]
        result = train(data, dims, cfg, self.n_prototypes, patience=self.patience, max_epochs=self.max_epochs,
                       seed=self.random_state, learning_rate=self.learning_rate, weight_decay=self.weight_decay)
        self.net_ = result.net
        self.history_ = result.history
        E = embed(self.net_, X)
        per_class = {c: E[codes == c] for c in range(n_classes)}
        self.bank_ = bank_from_embeddings(per_class, self.n_prototypes, self.random_state, self.tau, self.alpha)
        return self

    def add_classes(self, X, y):
        """Register new classes from a few labelled examples each."""
        check_is_fitted(self, "bank_")
        X, y = check_X_y(X, y, dtype=np.float64)
        new_labels = np.unique(y)
        clash = np.intersect1d(new_labels, self.classes_)
        if clash.size:
            raise ValueError(f"classes {clash.tolist()} are already known")
        E = embed(self.net_, X)
        start = len(self.classes_)
        per_class = {start + i: E[y == label] for i, label in enumerate(new_labels)}
        extra = bank_from_embeddings(per_class, self.n_prototypes_novel, self.random_state, self.tau, self.alpha)
        protos = dict(self.bank_.prototypes)
        protos.update(extra.prototypes)
        self.bank_ = type(self.bank_)(protos, self.tau, self.alpha, self.bank_.classes + extra.classes)
        self.classes_ = np.concatenate([self.classes_, new_labels])
        return self

    def transform(self, X):
        """Embed ``X`` with the trained network."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return embed(self.net_, X)

    def decision_function(self, X, tau=None):
        return class_scores(self.transform(X), self.bank_, tau)

    def predict_proba(self, X, tau=None):
        s = self.decision_function(X, tau)
        s = s - s.max(axis=1, keepdims=True)
        p = np.exp(s)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class CrossEntropyClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """The same embedding trunk trained with a softmax head and cross entropy."""

    def __init__(self, hidden_dims=(64, 64), embedding_dim=16, class_balanced=True, learning_rate=1e-3,
                 weight_decay=1e-5, batch_size=64, batches_per_epoch=50, max_epochs=50, patience=10,
                 validation_fraction=0.2, random_state=0):
        self.hidden_dims = hidden_dims
        self.embedding_dim = embedding_dim
        self.class_balanced = class_balanced
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        data = _holdout(X, codes, len(self.classes_), self.validation_fraction, self.random_state)
        init = rngmod.stream(self.random_state, "init")
        net = net_init([X.shape[1], *self.hidden_dims, self.embedding_dim], rngmod.child_seed(init))
        head = CEHead.init(self.embedding_dim, list(range(len(self.classes_))), rngmod.child_seed(init))
        hyper = CEConfig(self.learning_rate, self.weight_decay, self.batch_size, self.batches_per_epoch,
                         self.max_epochs, self.patience)
        self.net_, self.head_, self.history_ = ce_train(net, head, data, self.class_balanced, hyper,
                                                        self.random_state)
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        return embed(self.net_, check_array(X, dtype=np.float64))

    def decision_function(self, X):
        return self.head_.logits(self.transform(X))

    def predict_proba(self, X):
        return self.head_.proba(self.transform(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
