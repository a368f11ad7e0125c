"""Ranking-based evaluation metrics.

Every classifier in the package reports, per example, a ranking of class ids
(best first). All metrics here consume those rankings, so prototype models,
nearest neighbours and softmax heads are scored identically.
"""

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import MetricError

log = logging.getLogger(__name__)


def _prepare(ranked, labels, class_filter):
    ranked = np.asarray(ranked)
    labels = np.asarray(labels)
    if ranked.ndim != 2 or ranked.shape[0] != labels.shape[0]:
        raise MetricError(f"ranking shape {ranked.shape} does not match {labels.shape[0]} labels")
    if class_filter is not None:
        keep = np.isin(labels, np.asarray(list(class_filter)))
        ranked, labels = ranked[keep], labels[keep]
    return ranked, labels


def _hits(ranked, labels, k):
    k = max(1, min(int(k), ranked.shape[1]))
    return (ranked[:, :k] == labels[:, None]).any(axis=1)


def per_class_recall(ranked, labels, k=1, class_filter=None):
    """Per-class fraction of examples whose label is in the top ``k``.

    Classes in ``class_filter`` without any example are left out.
    """
    ranked, labels = _prepare(ranked, labels, class_filter)
    hits = _hits(ranked, labels, k) if len(labels) else np.zeros(0, dtype=bool)
    classes = sorted(set(labels.tolist()))
    return {c: float(hits[labels == c].mean()) for c in classes}


def _macro(ranked, labels, k, class_filter, return_excluded):
    if int(k) < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    per_class = per_class_recall(ranked, labels, k, class_filter)
    excluded = []
    if class_filter is not None:
        excluded = sorted(set(class_filter) - set(per_class))
        if excluded:
            log.info("classes without test examples excluded: %s", excluded)
    if not per_class:
        raise MetricError("no classes with test examples to average over")
    value = sum(per_class[c] for c in sorted(per_class)) / len(per_class)
    return (value, excluded) if return_excluded else value


def mca(ranked, labels, class_filter=None, return_excluded=False):
    """Mean per-class top-1 accuracy.

    ``class_filter`` restricts the average (and the examples) to the given
    classes while the ranking may still cover every class.
    """
    return _macro(ranked, labels, 1, class_filter, return_excluded)


def recall_at_k(ranked, labels, k, class_filter=None):
    """Fraction of examples whose true class is among the top ``k``."""
    if int(k) < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    ranked, labels = _prepare(ranked, labels, class_filter)
    if len(labels) == 0:
        raise MetricError("no examples to evaluate")
    return float(_hits(ranked, labels, k).mean())


def balanced_recall_at_k(ranked, labels, k, class_filter=None):
    """Recall@k per class, averaged with equal class weights."""
    return _macro(ranked, labels, k, class_filter, False)


@dataclass
class MetricsReport:
    values: dict
    std: dict = field(default_factory=dict)
    per_class_accuracy: dict = field(default_factory=dict)
    per_class_n: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    n_folds: int = 1

    @property
    def mca_combined(self):
        return self.values["mca_base+novel"]

    @property
    def mca_base(self):
        return self.values.get("mca_base")

    @property
    def mca_novel(self):
        return self.values.get("mca_novel")

    @property
    def recall_at(self):
        return {int(k.split("@")[1]): v for k, v in self.values.items() if k.startswith("recall@")
                and "_" not in k}

    @property
    def balanced_recall_at(self):
        return {int(k.split("@")[1]): v for k, v in self.values.items()
                if k.startswith("balanced_recall@") and k.count("_") == 1}


def evaluate(ranked, labels, base_classes, novel_classes=(), ks=(5, 10)):
    """Full report over base, novel and combined test examples."""
    base_classes = list(base_classes)
    novel_classes = list(novel_classes)
    groups = {"base+novel": base_classes + novel_classes, "base": base_classes, "novel": novel_classes}
    values = {}
    for name, classes in groups.items():
        if not classes:
            continue
        values[f"mca_{name}"] = mca(ranked, labels, classes)
        suffix = "" if name == "base+novel" else f"_{name}"
        for k in ks:
            values[f"recall@{k}{suffix}"] = recall_at_k(ranked, labels, k, classes)
            values[f"balanced_recall@{k}{suffix}"] = balanced_recall_at_k(ranked, labels, k, classes)
    per_class = per_class_recall(ranked, labels, 1, groups["base+novel"])
    labels = np.asarray(labels)
    counts = {c: int((labels == c).sum()) for c in per_class}
    partition = {c: "base" for c in base_classes}
    partition.update({c: "novel" for c in novel_classes})
    return MetricsReport(values, {k: 0.0 for k in values}, per_class, counts,
                         {c: partition[c] for c in per_class}, 1)


def _mean_std(xs):
    n = len(xs)
    total = 0.0
    for x in xs:
        total += x
    mean = total / n
    sq = 0.0
    for x in xs:
        sq += (x - mean) ** 2
    return mean, (sq / n) ** 0.5


def aggregate_folds(reports):
    """Mean and population standard deviation of each metric across folds."""
    if not reports:
        raise MetricError("no reports to aggregate")
    keys = list(reports[0].values)
    for r in reports[1:]:
        if set(r.values) != set(keys):
            raise MetricError("reports carry different metric keys")
    values, std = {}, {}
    for key in keys:
        values[key], std[key] = _mean_std([r.values[key] for r in reports])
    classes = sorted(set().union(*(r.per_class_accuracy for r in reports)))
    per_class, counts, partition = {}, {}, {}
    for c in classes:
        accs = [r.per_class_accuracy[c] for r in reports if c in r.per_class_accuracy]
        per_class[c] = _mean_std(accs)[0]
        counts[c] = sum(r.per_class_n.get(c, 0) for r in reports)
        partition[c] = next(r.partition[c] for r in reports if c in r.partition)
    return MetricsReport(values, std, per_class, counts, partition, sum(r.n_folds for r in reports))


def report_csv(report):
    buf = io.StringIO()
    buf.write("metric,mean,std\n")
    for key, val in report.values.items():
        buf.write(f"{key},{val:.6f},{report.std.get(key, 0.0):.6f}\n")
    return buf.getvalue()


def per_class_csv(report):
    buf = io.StringIO()
    buf.write("class_id,partition,n_test,accuracy\n")
    for c in sorted(report.per_class_accuracy):
        buf.write(f"{c},{report.partition.get(c, '')},{report.per_class_n.get(c, 0)},"
                  f"{report.per_class_accuracy[c]:.6f}\n")
    return buf.getvalue()
