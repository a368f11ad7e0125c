"""Experiment protocol: training runs, low-shot evaluation and the sweeps.

Low-shot evaluation follows a fixed recipe per fold: base classes keep
prototypes clustered from their full training split, every novel class gets
prototypes from the fold's support sample, and the base test split plus the
fold's novel test examples are classified over all base and novel classes.
"""

import io
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rng as rngmod
from .baselines import CEConfig, CEHead, ce_rank, ce_train, knn_rank, pn_config
from .datagen import TEST, TRAIN, GenConfig, gen_synthetic, lowshot_folds, split_base_novel
from .episodic import EpisodeConfig, embed, train
from .exceptions import ConfigurationError
from .metrics import aggregate_folds, evaluate
from .numerics import net_init
from .protobank import bank_from_embeddings, class_scores, pairwise_sq_dists, rank_classes, responsibilities


def gen_config(rc):
    return GenConfig(
        n_classes=rc.n_classes,
        modes_per_class=rc.modes_per_class,
        ambient_dim=rc.ambient_dim,
        tail_exponent=rc.tail_exponent,
        head_count=rc.head_count,
        mode_separation=rc.mode_separation,
        noise_scale=rc.noise_scale,
        warp=rc.warp,
        seed=rc.seed,
    )


def make_dataset(rc):
    ds = gen_synthetic(gen_config(rc))
    return split_base_novel(ds, rc.n_base, rc.val_frac, seed=rc.seed)


def method_config(rc, method=None, alpha=None):
    """Episode config and cluster counts for ``pcn`` or ``pn``."""
    method = method or rc.method
    cfg = EpisodeConfig(
        n_way=rc.n_way,
        n_support=rc.n_support,
        n_query=rc.n_query,
        episodes_per_epoch=rc.episodes_per_epoch,
        tau_train=rc.tau_train,
        alpha=rc.alpha if alpha is None else alpha,
        stop_grad_q=rc.stop_grad_q,
    )
    if method == "pcn":
        return cfg, rc.M_base, rc.M_novel
    if method == "pn":
        pn_cfg, m_base, m_novel = pn_config(cfg)
        if alpha is not None:
            pn_cfg.alpha = alpha
        return pn_cfg, m_base, m_novel
    raise ConfigurationError(f"not an episodic method: {method!r}")


def train_model(dataset, rc, method=None, alpha=None):
    cfg, m_base, _ = method_config(rc, method, alpha)
    return train(
        dataset,
        rc.layer_dims,
        cfg,
        m_base,
        patience=rc.patience,
        max_epochs=rc.max_epochs,
        seed=rc.seed,
        learning_rate=rc.learning_rate,
        weight_decay=rc.weight_decay,
    )


def train_ce(dataset, rc, classes=None, extra_train=None, class_balanced=True):
    classes = dataset.base_classes if classes is None else sorted(classes)
    init = rngmod.stream(rc.seed, "init")
    net = net_init(rc.layer_dims, rngmod.child_seed(init))
    head = CEHead.init(rc.emb_dim, classes, rngmod.child_seed(init))
    hyper = CEConfig(
        learning_rate=rc.learning_rate,
        weight_decay=rc.weight_decay,
        batch_size=rc.batch_size,
        batches_per_epoch=rc.batches_per_epoch,
        max_epochs=rc.max_epochs,
        patience=rc.patience,
    )
    return ce_train(net, head, dataset, class_balanced, hyper, rc.seed, classes, extra_train)


def _threads():
    try:
        return max(1, int(os.environ.get("PCN_THREADS", "1")))
    except ValueError:
        return 1


def _map_folds(fn, folds):
    n = _threads()
    if n == 1 or len(folds) < 2:
        return [fn(f) for f in folds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, folds))


def _fold_test(dataset, fold, base):
    base_test = np.flatnonzero(np.isin(dataset.y, base) & (dataset.split == TEST))
    novel_test = [fold.test[c] for c in sorted(fold.test)]
    return np.concatenate([base_test, *novel_test]).astype(np.int64)


def prototype_lowshot(net, dataset, folds, M_base, M_novel, tau, seed, ks=(5, 10), return_folds=False):
    """Evaluate a prototype model over low-shot folds and aggregate."""
    base = dataset.base_classes
    base_embs = {c: embed(net, dataset.X[dataset.indices(cls=c, split=TRAIN)]) for c in base}
    emb_all = embed(net, dataset.X)

    def one(fold):
        per_class = dict(base_embs)
        M = {c: M_base for c in base}
        for c, idx in fold.support.items():
            per_class[c] = emb_all[idx]
            M[c] = M_novel
        bank = bank_from_embeddings(per_class, M, seed, tau=tau, alpha=0.0)
        test = _fold_test(dataset, fold, base)
        ranked = rank_classes(class_scores(emb_all[test], bank, tau), bank.classes)
        return evaluate(ranked, dataset.y[test], base, sorted(fold.support), ks)

    reports = _map_folds(one, folds)
    agg = aggregate_folds(reports)
    return (agg, reports) if return_folds else agg


def knn_lowshot(net, dataset, folds, k, ks=(5, 10)):
    """Nearest-neighbour evaluation using base training data plus fold support."""
    base = dataset.base_classes
    emb_all = embed(net, dataset.X)
    base_train = np.flatnonzero(np.isin(dataset.y, base) & (dataset.split == TRAIN))

    def one(fold):
        train_idx = np.concatenate([base_train, *[fold.support[c] for c in sorted(fold.support)]])
        test = _fold_test(dataset, fold, base)
        classes = sorted(base) + sorted(fold.support)
        ranked = knn_rank(emb_all[train_idx], dataset.y[train_idx], emb_all[test], k, classes)
        return evaluate(ranked, dataset.y[test], base, sorted(fold.support), ks)

    return aggregate_folds(_map_folds(one, folds))


def ce_lowshot(dataset, rc, folds, ks=(5, 10)):
    """Softmax head retrained per fold on base training data plus fold support."""
    base = dataset.base_classes
    reports = []
    for fold in folds:
        classes = sorted(base) + sorted(fold.support)
        net, head, _ = train_ce(dataset, rc, classes, extra_train=fold.support)
        test = _fold_test(dataset, fold, base)
        ranked = ce_rank(net, head, dataset.X[test])
        reports.append(evaluate(ranked, dataset.y[test], base, sorted(fold.support), ks))
    return aggregate_folds(reports)


def make_folds(dataset, rc, n_train=None, n_test=None, classes=None):
    return lowshot_folds(
        dataset,
        rc.n_train_shot if n_train is None else n_train,
        rc.n_test_shot if n_test is None else n_test,
        rc.folds,
        seed=rc.seed,
        classes=classes,
    )


def long_rows(prefix, report):
    """``prefix + (metric, mean, std)`` rows for every metric in ``report``."""
    return [(*prefix, k, v, report.std[k]) for k, v in report.values.items()]


def rows_csv(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def shot_sweep(net, dataset, rc, method, M_base, M_novel, shots=None):
    rows = []
    for shot in shots or rc.shot_grid:
        folds = make_folds(dataset, rc, n_train=shot)
        report = prototype_lowshot(net, dataset, folds, M_base, M_novel, rc.tau_train, rc.seed)
        rows.extend(long_rows((method, shot), report))
    return rows


def novel_count_sweep(net, dataset, rc, method, M_base, M_novel, counts=None, n_train=2, n_test=5):
    """Vary how many novel classes join the label space (largest novel classes first)."""
    ranked_novel = [c for c in dataset.size_ranking() if c in set(dataset.novel_classes)]
    counts = counts or rc.novel_grid or [len(ranked_novel)]
    rows = []
    for n in counts:
        if not 1 <= n <= len(ranked_novel):
            raise ConfigurationError(f"novel count {n} outside [1, {len(ranked_novel)}]")
        folds = make_folds(dataset, rc, n_train, n_test, classes=sorted(ranked_novel[:n]))
        report = prototype_lowshot(net, dataset, folds, M_base, M_novel, rc.tau_train, rc.seed)
        rows.extend(long_rows((method, n), report))
    return rows


def temperature_sweep(net, dataset, rc, deltas=None):
    """Evaluate at ``tau_test = tau_train + delta``; only the responsibilities see tau."""
    folds = make_folds(dataset, rc)
    rows = []
    for delta in deltas or rc.delta_tau_sweep:
        tau = rc.tau_train + delta
        if tau <= 0:
            raise ConfigurationError(f"tau_train + delta = {tau} must be > 0")
        report = prototype_lowshot(net, dataset, folds, rc.M_base, rc.M_novel, tau, rc.seed)
        for key in ("mca_base", "mca_novel"):
            rows.append((delta, key, report.values[key], report.std[key]))
    return rows


def alpha_ablation(dataset, rc, alphas=None):
    folds = make_folds(dataset, rc)
    rows = []
    for method in ("pcn", "pn"):
        for alpha in alphas or rc.alpha_list:
            _, m_base, m_novel = method_config(rc, method, alpha)
            result = train_model(dataset, rc, method, alpha)
            report = prototype_lowshot(result.net, dataset, folds, m_base, m_novel, rc.tau_train, rc.seed)
            rows.extend(long_rows((method, alpha), report))
    return rows


def posthoc_ablation(pn_net, dataset, rc, pcn_net=None, grid=((1, 1), (1, 4), (10, 4))):
    """Post-hoc clustering of a single-prototype model, optionally against a trained PCN."""
    folds = make_folds(dataset, rc)
    rows = []
    for m_base, m_novel in grid:
        report = prototype_lowshot(pn_net, dataset, folds, m_base, m_novel, rc.tau_train, rc.seed)
        rows.extend(long_rows(("pn", f"{m_base}/{m_novel}"), report))
    if pcn_net is not None:
        report = prototype_lowshot(pcn_net, dataset, folds, rc.M_base, rc.M_novel, rc.tau_train, rc.seed)
        rows.extend(long_rows(("pcn", f"{rc.M_base}/{rc.M_novel}"), report))
    return rows


def prototype_dump(net, dataset, rc):
    """Nearest training example of every prototype and test responsibilities.

    Uses the first low-shot fold for novel classes. Returns two CSV texts.
    """
    base = dataset.base_classes
    fold = make_folds(dataset, rc)[0]
    emb_all = embed(net, dataset.X)
    train_idx = np.flatnonzero(dataset.split == TRAIN)
    if dataset.novel_classes:
        base_train = np.flatnonzero(np.isin(dataset.y, base) & (dataset.split == TRAIN))
        train_idx = np.concatenate([base_train, *[fold.support[c] for c in sorted(fold.support)]])
    per_class = {c: emb_all[dataset.indices(cls=c, split=TRAIN)] for c in base}
    M = {c: rc.M_base for c in base}
    for c, idx in fold.support.items():
        per_class[c] = emb_all[idx]
        M[c] = rc.M_novel
    bank = bank_from_embeddings(per_class, M, rc.seed, tau=rc.tau_train, alpha=0.0)

    protos = io.StringIO()
    protos.write("class_id,z,nn_index,nn_label,nn_distance\n")
    for c in bank.classes:
        d = np.sqrt(pairwise_sq_dists(bank.prototypes[c], emb_all[train_idx]))
        for z, row in enumerate(d):
            j = int(np.argmin(row))
            protos.write(f"{c},{z},{train_idx[j]},{dataset.y[train_idx[j]]},{row[j]:.6f}\n")

    test = _fold_test(dataset, fold, base)
    ranked = rank_classes(class_scores(emb_all[test], bank), bank.classes)
    resp = io.StringIO()
    resp.write("index,label,predicted,responsibilities\n")
    for i, pred in zip(test, ranked[:, 0]):
        q = responsibilities(emb_all[i], bank.prototypes[int(pred)], bank.tau)
        resp.write(f"{i},{dataset.y[i]},{pred}," + " ".join(f"{v:.6f}" for v in q) + "\n")
    return protos.getvalue(), resp.getvalue()
