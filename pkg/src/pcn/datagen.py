"""Synthetic long-tailed, multimodal datasets and the base/novel protocol.

Class ``c`` (0-based rank) receives ``floor(head_count * (c + 1) ** -tail_exponent)``
examples. Each class owns several Gaussian modes scattered around a class
anchor, so a single centroid is a poor summary of the class. An optional
smooth invertible warp bends the whole space.
"""

import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import rng as rngmod
from .exceptions import ConfigurationError, FoldError, ParseError, SplitError, UnsupportedVersionError

TRAIN, VAL, TEST = 0, 1, 2


@dataclass
class GenConfig:
    n_classes: int = 20
    modes_per_class: object = 3  # int, or one int per class
    ambient_dim: int = 16
    tail_exponent: float = 1.0
    head_count: int = 200
    mode_separation: float = 3.0
    noise_scale: float = 0.35
    warp: bool = True
    seed: int = 0
    anchor_scale: float = 1.0

    def modes(self):
        if np.ndim(self.modes_per_class) == 0:
            return [int(self.modes_per_class)] * self.n_classes
        modes = [int(m) for m in self.modes_per_class]
        if len(modes) != self.n_classes:
            raise ConfigurationError(f"modes_per_class has {len(modes)} entries for {self.n_classes} classes")
        return modes

    def class_sizes(self):
        return zipf_sizes(self.n_classes, self.head_count, self.tail_exponent)


def zipf_sizes(n_classes, head_count, tail_exponent):
    # the small offset keeps exact products like 200 * 5**-1 from flooring to 39
    return [
        int(math.floor(head_count * (c + 1) ** (-float(tail_exponent)) + 1e-9)) for c in range(n_classes)
    ]


@dataclass
class Dataset:
    """Labelled vectors with a base/novel partition and train/val/test membership.

    Novel-class examples carry split ``TRAIN`` in storage; which of them act as
    support or test is decided per fold by :func:`lowshot_folds`.
    """

    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    n_classes: int
    n_base: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.split.shape != (n,):
            raise ConfigurationError("labels and split must have one entry per example")
        if n and (self.y.min() < 0 or self.y.max() >= self.n_classes):
            raise ConfigurationError("labels must lie in [0, n_classes)")
        if not 0 <= self.n_base < self.n_classes or (self.n_base == 0 and self.n_classes < 1):
            raise ConfigurationError(f"n_base must lie in [0, {self.n_classes})")

    @property
    def dim(self):
        return self.X.shape[1]

    @property
    def class_sizes(self):
        return np.bincount(self.y, minlength=self.n_classes)

    def size_ranking(self):
        """Class ids by descending size, lower id first among equals."""
        sizes = self.class_sizes
        return sorted(range(self.n_classes), key=lambda c: (-sizes[c], c))

    @property
    def base_classes(self):
        if self.n_base == 0:
            return list(range(self.n_classes))
        return sorted(self.size_ranking()[: self.n_base])

    @property
    def novel_classes(self):
        if self.n_base == 0:
            return []
        return sorted(self.size_ranking()[self.n_base :])

    @property
    def partition(self):
        """Per class: ``"base"`` or ``"novel"``."""
        base = set(self.base_classes)
        return ["base" if c in base else "novel" for c in range(self.n_classes)]

    def indices(self, cls=None, split=None):
        mask = np.ones(len(self.y), dtype=bool)
        if cls is not None:
            mask &= self.y == cls
        if split is not None:
            mask &= self.split == split
        return np.flatnonzero(mask)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.n_base == other.n_base
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.split, other.split)
        )


def _ball(rng, n, dim, radius):
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / dim)
    return direction * r


def make_warp(dim, rng, strength=0.9):
    """A fixed two-layer map ``x -> x + (s / 2) * tanh(2 A x + b)`` with ``||A||_2 = 1``.

    The residual term of each layer has Lipschitz constant ``s < 1``, so the
    composition is smooth and invertible.
    """
    layers = []
    for _ in range(2):
        A = rng.standard_normal((dim, dim))
        A /= np.linalg.norm(A, 2)
        b = rng.standard_normal(dim)
        layers.append((A, b))

    def warp(X):
        for A, b in layers:
            X = X + strength * np.tanh(X @ A.T * 2.0 + b) / 2.0
        return X

    return warp


def gen_synthetic(cfg):
    """Generate a dataset from ``cfg``; deterministic in ``cfg.seed``."""
    if cfg.n_classes < 2:
        raise ConfigurationError("need at least 2 classes")
    if cfg.ambient_dim < 1:
        raise ConfigurationError("ambient_dim must be >= 1")
    if cfg.tail_exponent < 0:
        raise ConfigurationError("tail_exponent must be >= 0")
    if cfg.noise_scale < 0 or cfg.mode_separation < 0:
        raise ConfigurationError("noise_scale and mode_separation must be >= 0")
    modes = cfg.modes()
    if any(m < 1 for m in modes):
        raise ConfigurationError("every class needs at least one mode")
    if cfg.head_count < max(modes):
        raise ConfigurationError("head_count must be >= modes_per_class")
    sizes = cfg.class_sizes()
    small = [c for c, s in enumerate(sizes) if s < 1]
    if small:
        raise ConfigurationError(f"classes {small} would have no examples; lower tail_exponent")

    rng = rngmod.stream(cfg.seed, "data")
    D = cfg.ambient_dim
    anchors = rng.standard_normal((cfg.n_classes, D)) * cfg.anchor_scale
    X, y, mode_of = [], [], []
    centers = []
    for c, (n_c, g_c) in enumerate(zip(sizes, modes)):
        mu = anchors[c] + _ball(rng, g_c, D, cfg.mode_separation)
        centers.append(mu)
        # permuted round-robin keeps every mode populated when n_c >= g_c
        which = rng.permutation(np.arange(n_c) % g_c)
        X.append(mu[which] + cfg.noise_scale * rng.standard_normal((n_c, D)))
        y.append(np.full(n_c, c))
        mode_of.append(which)
    X = np.concatenate(X)
    if cfg.warp:
        X = make_warp(D, rng)(X)
    meta = {
        "modes_per_class": modes,
        "sizes": sizes,
        "mode_of_example": np.concatenate(mode_of),
        "mode_centers": centers,
    }
    return Dataset(X, np.concatenate(y), np.zeros(len(X), dtype=np.int64), cfg.n_classes, 0, meta)


def split_base_novel(dataset, n_base, val_frac=0.2, seed=0, min_holdout=5):
    """Mark the ``n_base`` largest classes as base and carve val/test from them.

    Each base class sends ``max(min_holdout, ceil(val_frac * size))`` examples
    to validation and the same number to test; the rest are training data.
    """
    if not 0 < n_base < dataset.n_classes:
        raise SplitError(f"n_base must lie in (0, {dataset.n_classes}), got {n_base}")
    out = Dataset(dataset.X, dataset.y, np.zeros(len(dataset.y), dtype=np.int64), dataset.n_classes, n_base,
                  dict(dataset.meta))
    rng = rngmod.stream(seed, "split")
    frac = Fraction(str(val_frac))
    for c in out.base_classes:
        idx = dataset.indices(cls=c)
        n_hold = max(min_holdout, math.ceil(frac * len(idx)))
        if 2 * n_hold + 1 > len(idx):
            raise SplitError(
                f"base class {c} has {len(idx)} examples; needs {2 * n_hold + 1} for val+test+train"
            )
        perm = rng.permutation(idx)
        out.split[perm[:n_hold]] = VAL
        out.split[perm[n_hold : 2 * n_hold]] = TEST
    return out


@dataclass
class Fold:
    """Per novel class: support indices and disjoint test indices."""

    support: dict
    test: dict


def lowshot_folds(dataset, n_train=5, n_test=5, folds=10, seed=0, classes=None):
    """Draw ``folds`` independent support/test samples for each novel class."""
    classes = dataset.novel_classes if classes is None else list(classes)
    pools = {}
    for c in classes:
        idx = dataset.indices(cls=c)
        if len(idx) < 2:
            raise FoldError(f"novel class {c} has {len(idx)} examples; need at least 2")
        pools[c] = idx
    out = []
    for f in range(folds):
        rng = rngmod.stream(seed, "folds", f)
        support, test = {}, {}
        for c in classes:
            idx = pools[c]
            n_s = min(n_train, len(idx) - 1)
            n_t = min(n_test, len(idx) - n_s)
            perm = rng.permutation(idx)
            support[c] = np.sort(perm[:n_s])
            test[c] = np.sort(perm[n_s : n_s + n_t])
        out.append(Fold(support, test))
    return out


def dumps_dataset(dataset):
    buf = io.StringIO()
    n, d = dataset.X.shape
    buf.write(f"pcn-dataset v1 {n} {d} {dataset.n_classes} {dataset.n_base}\n")
    buf.write("sizes " + " ".join(str(s) for s in dataset.class_sizes) + "\n")
    for x, label, sp in zip(dataset.X, dataset.y, dataset.split):
        buf.write(f"{label} {sp} " + " ".join("%.17g" % v for v in x) + "\n")
    return buf.getvalue()


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(dataset, path):
    atomic_write(path, dumps_dataset(dataset))


def loads_dataset(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    head = lines[0].split()
    if len(head) < 2 or head[0] != "pcn-dataset":
        raise ParseError("expected 'pcn-dataset' header", 1)
    if head[1] != "v1":
        raise UnsupportedVersionError(f"unsupported dataset version {head[1]!r}", 1)
    if len(head) != 6:
        raise ParseError("header must be 'pcn-dataset v1 <N> <D_in> <K> <K_base>'", 1)
    try:
        n, d, k, k_base = (int(t) for t in head[2:])
    except ValueError as exc:
        raise ParseError("header counts must be integers", 1) from exc
    if n < 0 or d < 1 or k < 1 or not 0 <= k_base < k:
        raise ParseError("header counts out of range", 1)
    if len(lines) < 2:
        raise ParseError("missing sizes line", 2)
    sizes_line = lines[1].split()
    if not sizes_line or sizes_line[0] != "sizes" or len(sizes_line) != k + 1:
        raise ParseError(f"expected 'sizes' followed by {k} integers", 2)
    try:
        sizes = [int(t) for t in sizes_line[1:]]
    except ValueError as exc:
        raise ParseError("sizes must be integers", 2) from exc
    if sum(sizes) != n:
        raise ParseError(f"sizes sum to {sum(sizes)} but header declares {n} examples", 2)

    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    split = np.empty(n, dtype=np.int64)
    for i in range(n):
        lineno = i + 3
        if i + 2 >= len(lines):
            raise ParseError(f"file truncated: expected {n} examples, found {i}", lineno)
        parts = lines[i + 2].split()
        if len(parts) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(parts)}", lineno)
        try:
            y[i] = int(parts[0])
            split[i] = int(parts[1])
            X[i] = [float(t) for t in parts[2:]]
        except ValueError as exc:
            raise ParseError(f"bad value: {exc}", lineno) from exc
        if not 0 <= y[i] < k:
            raise ParseError(f"label {y[i]} outside [0, {k})", lineno)
        if split[i] not in (TRAIN, VAL, TEST):
            raise ParseError(f"split must be 0, 1 or 2, got {split[i]}", lineno)
        if not np.all(np.isfinite(X[i])):
            raise ParseError("non-finite value", lineno)
    if len(lines) > n + 2:
        raise ParseError("trailing data after the declared examples", n + 3)
    if list(np.bincount(y, minlength=k)) != sizes:
        raise ParseError("per-class counts do not match the sizes line", 2)
    return Dataset(X, y, split, k, k_base)


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())
