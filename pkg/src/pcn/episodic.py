"""Episodic training of the embedding network against prototype mixtures.

One episode draws ``n_way`` classes, a support and a query set per class,
refreshes the prototypes of those classes from the support embeddings with a
moving-average rule, and scores the queries against the refreshed prototypes.
The loss is differentiated by hand; gradients reach the support embeddings
through the fresh-estimate part of the moving average and the query
embeddings through the distances.
"""

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .datagen import TRAIN, VAL, atomic_write
from .exceptions import ConfigurationError, OptimizationError, SamplingError, StateError
from .metrics import mca
from .numerics import AdamState, adam_step, load_net, net_forward, net_gradients, net_init, save_net
from .protobank import (
    DEGENERATE_MASS,
    PrototypeBank,
    bank_from_embeddings,
    class_scores,
    load_bank,
    rank_classes,
    save_bank,
)

log = logging.getLogger(__name__)


@dataclass
class EpisodeConfig:
    n_way: int = 10
    n_support: int = 10
    n_query: int = 10
    episodes_per_epoch: int = 200
    tau_train: float = 1.0
    alpha: float = 0.5
    stop_grad_q: bool = False

    def __post_init__(self):
        if self.n_way < 1 or self.n_support < 1 or self.n_query < 1 or self.episodes_per_epoch < 1:
            raise ConfigurationError("n_way, n_support, n_query and episodes_per_epoch must be >= 1")
        if not self.tau_train > 0:
            raise ConfigurationError(f"tau_train must be > 0, got {self.tau_train}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class Episode:
    class_ids: list
    support: list
    query: list


def sample_episode(dataset, cfg, rng, classes=None):
    """Draw an episode from the training split.

    Only classes with at least ``n_support + 1`` training examples are
    eligible. A class too small for the full query set gets what remains.
    """
    classes = dataset.base_classes if classes is None else list(classes)
    pools = {c: dataset.indices(cls=c, split=TRAIN) for c in classes}
    eligible = [c for c in classes if len(pools[c]) >= cfg.n_support + 1]
    if len(eligible) < cfg.n_way:
        raise SamplingError(
            f"{len(eligible)} classes have >= {cfg.n_support + 1} training examples; need {cfg.n_way}"
        )
    chosen = rng.choice(np.asarray(eligible), size=cfg.n_way, replace=False)
    support, query = [], []
    for c in chosen:
        perm = rng.permutation(pools[int(c)])
        support.append(perm[: cfg.n_support])
        query.append(perm[cfg.n_support : cfg.n_support + cfg.n_query])
    return Episode([int(c) for c in chosen], support, query)


def _softmax(a):
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def episode_loss(net, bank, episode, cfg, X):
    """Loss, parameter gradients and refreshed bank for one episode.

    ``X`` holds the raw inputs that the episode indices refer to. The
    returned bank is a copy; classes outside the episode keep their
    prototypes untouched.
    """
    missing = [k for k in episode.class_ids if k not in bank]
    if missing:
        raise StateError(f"episode classes {missing} are not in the bank")
    tau, alpha, stop = cfg.tau_train, cfg.alpha, cfg.stop_grad_q

    n_sup = [len(s) for s in episode.support]
    n_qry = [len(q) for q in episode.query]
    rows = np.concatenate(list(episode.support) + list(episode.query)).astype(np.int64)
    emb, tape = net_forward(net, X[rows])
    s_off = np.concatenate([[0], np.cumsum(n_sup)])
    q_start = s_off[-1]
    Q = emb[q_start:]
    labels = np.repeat(np.arange(len(episode.class_ids)), n_qry)
    nq = len(labels)
    if nq == 0:
        raise SamplingError("episode has no query examples")

    new_bank = bank.copy()
    cache = []
    for j, k in enumerate(episode.class_ids):
        S = emb[s_off[j] : s_off[j + 1]]
        old = bank.prototypes[k]
        diff_s = S[:, None, :] - old[None, :, :]
        d_s = np.einsum("nzd,nzd->nz", diff_s, diff_s)
        q_s = _softmax(-d_s / tau)
        mass = q_s.sum(axis=0)
        ok = mass >= DEGENERATE_MASS
        means = np.zeros_like(old)
        means[ok] = (q_s[:, ok].T @ S) / mass[ok, None]
        mu = old.copy()
        mu[ok] = alpha * old[ok] + (1.0 - alpha) * means[ok]
        new_bank.prototypes[k] = mu
        cache.append((S, diff_s, q_s, mass, ok, means, mu))

    n_way = len(episode.class_ids)
    scores = np.empty((nq, n_way))
    qcache = []
    for j in range(n_way):
        mu = cache[j][6]
        diff_q = Q[:, None, :] - mu[None, :, :]
        d_q = np.einsum("nzd,nzd->nz", diff_q, diff_q)
        r = _softmax(-d_q / tau)
        scores[:, j] = (r * d_q).sum(axis=1)
        qcache.append((diff_q, d_q, r))

    neg = -scores
    m = neg.max(axis=1)
    lse = m + np.log(np.exp(neg - m[:, None]).sum(axis=1))
    per_query = scores[np.arange(nq), labels] + lse
    loss = float(per_query.mean())
    if not np.isfinite(loss):
        raise OptimizationError("episode loss is not finite")

    # backward
    p = _softmax(neg)
    g_scores = -p
    g_scores[np.arange(nq), labels] += 1.0
    g_scores /= nq

    g_emb = np.zeros_like(emb)
    g_Q = g_emb[q_start:]
    for j in range(n_way):
        diff_q, d_q, r = qcache[j]
        if stop:
            g_d = r * g_scores[:, j : j + 1]
        else:
            spread = (d_q - scores[:, j : j + 1]) / tau
            g_d = r * (1.0 - spread) * g_scores[:, j : j + 1]
        g_Q += 2.0 * np.einsum("nz,nzd->nd", g_d, diff_q)
        g_mu = -2.0 * np.einsum("nz,nzd->zd", g_d, diff_q)

        S, diff_s, q_s, mass, ok, means, _ = cache[j]
        g_means = np.zeros_like(g_mu)
        g_means[ok] = (1.0 - alpha) * g_mu[ok]
        safe_mass = np.where(ok, mass, 1.0)
        weighted = g_means / safe_mass[:, None]
        g_S = q_s @ weighted
        if not stop:
            # d means_z / d q_iz = (s_i - means_z) / mass_z
            g_q = np.einsum("zd,nzd->nz", weighted, S[:, None, :] - means[None, :, :])
            g_q[:, ~ok] = 0.0
            g_a = q_s * (g_q - (q_s * g_q).sum(axis=1, keepdims=True))
            g_S += 2.0 * np.einsum("nz,nzd->nd", -g_a / tau, diff_s)
        g_emb[s_off[j] : s_off[j + 1]] += g_S

    grads = net_gradients(tape, g_emb)
    return loss, grads, new_bank


def embed(net, X, batch_size=4096):
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return np.zeros((0, net.output_dim))
    parts = [net_forward(net, X[i : i + batch_size])[0] for i in range(0, len(X), batch_size)]
    return np.concatenate(parts)


def build_test_prototypes(net, dataset, M_base, M_novel, seed, support=None, tau=1.0, alpha=0.5,
                          base_classes=None):
    """Cluster each class's embedded examples into a frozen prototype bank.

    Base classes use their whole training split; novel classes use the
    indices given in ``support`` (class id -> indices), typically a fold's
    support sample. ``M`` is clamped to the number of examples per class.
    """
    base_classes = dataset.base_classes if base_classes is None else list(base_classes)
    support = support or {}
    per_class, M = {}, {}
    for c in base_classes:
        idx = dataset.indices(cls=c, split=TRAIN)
        if len(idx) == 0:
            raise StateError(f"class {c} has no training examples")
        per_class[c] = embed(net, dataset.X[idx])
        M[c] = M_base
    for c, idx in support.items():
        if len(idx) == 0:
            raise StateError(f"class {c} has no support examples")
        per_class[int(c)] = embed(net, dataset.X[np.asarray(idx)])
        M[int(c)] = M_novel
    return bank_from_embeddings(per_class, M, seed, tau=tau, alpha=alpha)


def predict_ranking(net, bank, X, tau=None):
    """Ranked class ids for each row of ``X`` (best first)."""
    scores = class_scores(embed(net, X), bank, tau)
    return rank_classes(scores, bank.classes)


@dataclass
class TrainResult:
    net: object
    bank: PrototypeBank
    history: list = field(default_factory=list)
    best_epoch: int = 0


def train(dataset, layer_dims, cfg, M_base, patience=10, max_epochs=100, seed=0, learning_rate=1e-4,
          weight_decay=1e-5, init_net=None):
    """Episodic training with per-epoch k-means reinitialisation and early stopping.

    Validation mean per-class accuracy over base classes decides the best
    epoch. The returned net is the best-validation snapshot and the bank is
    its k-means bank over the base training data.
    """
    if cfg.n_way < 2:
        raise ConfigurationError("training episodes need n_way >= 2")
    base = dataset.base_classes
    val_idx = np.flatnonzero(np.isin(dataset.y, base) & (dataset.split == VAL))
    if len(val_idx) == 0:
        raise StateError("dataset has no validation examples for the base classes")

    net = init_net.copy() if init_net is not None else net_init(
        layer_dims, rngmod.child_seed(rngmod.stream(seed, "init"))
    )
    opt = AdamState.for_net(net, learning_rate=learning_rate, weight_decay=weight_decay)
    ep_rng = rngmod.stream(seed, "episodes")
    train_idx = {c: dataset.indices(cls=c, split=TRAIN) for c in base}

    best = None
    history = []
    stale = 0
    for epoch in range(max_epochs):
        kseed = rngmod.child_seed(rngmod.stream(seed, "kmeans", epoch))
        per_class = {c: embed(net, dataset.X[train_idx[c]]) for c in base}
        bank = bank_from_embeddings(per_class, M_base, kseed, tau=cfg.tau_train, alpha=cfg.alpha)

        losses = []
        for _ in range(cfg.episodes_per_epoch):
            episode = sample_episode(dataset, cfg, ep_rng, base)
            loss, grads, bank = episode_loss(net, bank, episode, cfg, dataset.X)
            net, opt = adam_step(net, grads, opt)
            losses.append(loss)

        vseed = rngmod.child_seed(rngmod.stream(seed, "kmeans", epoch, 1))
        val_bank = build_test_prototypes(net, dataset, M_base, M_base, vseed, tau=cfg.tau_train,
                                         alpha=cfg.alpha, base_classes=base)
        ranked = predict_ranking(net, val_bank, dataset.X[val_idx])
        val_mca = mca(ranked, dataset.y[val_idx])
        train_loss = float(np.mean(losses))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_mca": val_mca})
        log.info("epoch %d loss %.4f val_mca %.4f", epoch, train_loss, val_mca)

        if best is None or val_mca > best[0]:
            best = (val_mca, net.copy(), val_bank, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                break

    return TrainResult(best[1], best[2], history, best[3])


def dumps_checkpoint(net, bank):
    buf = io.StringIO()
    save_net(net, buf)
    save_bank(bank, buf)
    return buf.getvalue()


def save_checkpoint(path, net, bank):
    atomic_write(path, dumps_checkpoint(net, bank))


def loads_checkpoint(text, tau=1.0, alpha=0.5):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    net, pos = load_net(lines)
    bank = load_bank(lines, pos, tau=tau, alpha=alpha)
    return net, bank


def load_checkpoint(path, tau=1.0, alpha=0.5):
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read(), tau, alpha)
