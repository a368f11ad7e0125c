"""Per-class prototype mixtures and the math that operates on them.

A class ``k`` is represented by ``M_k`` prototypes. An embedding ``f`` is
softly assigned to the prototypes of each class,

    q(z | k, f) = softmax_z(-||f - mu_{z,k}||^2 / tau),

and scored against class ``k`` by the responsibility-weighted squared distance
``sum_z q(z | k, f) ||f - mu_{z,k}||^2``. A class posterior is the softmax of
the negated scores over classes (no temperature at the class level).
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError, ParseError, ShapeError, StateError, UnsupportedVersionError

DEGENERATE_MASS = 1e-12
KMEANS_MAX_ITER = 100


@dataclass
class PrototypeBank:
    """Prototype vectors for an ordered list of classes.

    Parameters
    ----------
    prototypes : dict
        Maps class id to an ``(M_k, D_emb)`` array.
    tau : float
        Temperature of the within-class responsibilities.
    alpha : float
        Memory weight of the moving-average prototype update.
    """

    prototypes: dict
    tau: float = 1.0
    alpha: float = 0.5
    classes: list = field(default=None)

    def __post_init__(self):
        if self.classes is None:
            self.classes = list(self.prototypes)
        self.classes = [int(c) for c in self.classes]
        self.prototypes = {
            int(c): np.atleast_2d(np.asarray(p, dtype=np.float64)) for c, p in self.prototypes.items()
        }
        if set(self.classes) != set(self.prototypes) or len(set(self.classes)) != len(self.classes):
            raise ConfigurationError("classes must list each prototype key exactly once")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        dims = {p.shape[1] for p in self.prototypes.values()}
        if len(dims) > 1:
            raise ShapeError(f"prototype dimensions disagree: {sorted(dims)}")
        for c, p in self.prototypes.items():
            if p.shape[0] < 1:
                raise ConfigurationError(f"class {c} has no prototypes")
            if not np.all(np.isfinite(p)):
                raise ConfigurationError(f"class {c} has non-finite prototypes")

    @property
    def dim(self):
        return next(iter(self.prototypes.values())).shape[1]

    def n_prototypes(self, k):
        return self.prototypes[k].shape[0]

    def __len__(self):
        return len(self.classes)

    def __contains__(self, k):
        return k in self.prototypes

    def copy(self):
        return PrototypeBank(
            {k: p.copy() for k, p in self.prototypes.items()}, self.tau, self.alpha, list(self.classes)
        )

    def subset(self, classes):
        missing = [k for k in classes if k not in self.prototypes]
        if missing:
            raise StateError(f"classes {missing} are not in the bank")
        return PrototypeBank({k: self.prototypes[k] for k in classes}, self.tau, self.alpha, list(classes))


def sq_dist(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)


def pairwise_sq_dists(A, B):
    """Squared distances between rows of ``A`` (N×D) and rows of ``B`` (M×D)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_tau(tau):
    if not tau > 0:
        raise ConfigurationError(f"tau must be > 0, got {tau}")


def responsibilities(emb, class_protos, tau):
    """Soft assignment of one embedding (or a batch) over a class's prototypes."""
    _check_tau(tau)
    protos = np.asarray(class_protos, dtype=np.float64)
    if protos.size == 0:
        raise StateError("empty prototype list")
    protos = np.atleast_2d(protos)
    emb = np.asarray(emb, dtype=np.float64)
    single = emb.ndim == 1
    d = pairwise_sq_dists(emb, protos)
    q = _softmax_rows(-d / tau)
    return q[0] if single else q


def class_scores(embs, bank, tau=None):
    """Logits ``-sum_z q d`` of every embedding against every bank class.

    Returns an ``(N, K)`` array whose columns follow ``bank.classes``.
    """
    if len(bank) == 0:
        raise StateError("empty prototype bank")
    tau = bank.tau if tau is None else tau
    _check_tau(tau)
    E = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    out = np.empty((E.shape[0], len(bank)))
    for j, k in enumerate(bank.classes):
        d = pairwise_sq_dists(E, bank.prototypes[k])
        q = _softmax_rows(-d / tau)
        out[:, j] = -(q * d).sum(axis=1)
    return out


def class_posterior(emb, bank, tau=None):
    """Posterior over ``bank.classes`` for one embedding or a batch."""
    emb = np.asarray(emb, dtype=np.float64)
    p = _softmax_rows(class_scores(emb, bank, tau))
    return p[0] if emb.ndim == 1 else p


def rank_classes(scores, classes):
    """Class ids sorted by descending score; ties go to the lower class id."""
    classes = np.asarray(classes)
    order = np.argsort(classes, kind="stable")
    s = np.asarray(scores)[:, order]
    idx = np.argsort(-s, axis=1, kind="stable")
    return classes[order][idx]


class KMeansResult(NamedTuple):
    centers: np.ndarray
    assignment: np.ndarray
    sse: float


def _kmeanspp(X, M, rng):
    n = X.shape[0]
    centers = np.empty((M, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, M):
        total = closest.sum()
        if total > 0:
            i = rng.choice(n, p=closest / total)
        else:
            i = rng.integers(n)
        centers[j] = X[i]
        closest = np.minimum(closest, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(points, M, seed, return_history=False):
    """Lloyd's algorithm with k-means++ seeding.

    Runs until the assignment stops changing or for 100 iterations. ``M`` is
    clamped to the number of points. Empty clusters are moved onto the point
    farthest from its current center; distance ties go to the lowest center.

    Returns ``(centers, assignment, sse)`` and, when ``return_history`` is set,
    additionally the SSE after every assignment step.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"points must be a 2-D array, got shape {X.shape}")
    n = X.shape[0]
    if n < 1:
        raise ConfigurationError("kmeans needs at least one point")
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    M = min(int(M), n)
    rng = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    centers = _kmeanspp(X, M, rng)

    history = []
    assignment = None
    for _ in range(KMEANS_MAX_ITER):
        d = pairwise_sq_dists(X, centers)
        new_assignment = np.argmin(d, axis=1)
        sse = float(d[np.arange(n), new_assignment].sum())
        history.append(sse)
        if assignment is not None and np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        centers = _update_centers(X, assignment, centers)
    else:
        # iteration cap reached: report the assignment matching the final centers
        d = pairwise_sq_dists(X, centers)
        assignment = np.argmin(d, axis=1)
        sse = float(d[np.arange(n), assignment].sum())
        history.append(sse)

    result = KMeansResult(centers, assignment, sse)
    if return_history:
        return result, history
    return result


def _update_centers(X, assignment, old_centers):
    M = old_centers.shape[0]
    counts = np.bincount(assignment, minlength=M)
    sums = np.zeros_like(old_centers)
    np.add.at(sums, assignment, X)
    centers = old_centers.copy()
    filled = counts > 0
    centers[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        own = ((X - centers[assignment]) ** 2).sum(axis=1)
        taken = set()
        for j in empty:
            # stable order: farthest first, lower index on ties
            for i in np.argsort(-own, kind="stable"):
                if i not in taken:
                    taken.add(i)
                    break
            centers[j] = X[i]
            own[i] = 0.0
    return centers


def ema_update(old_protos, support_embs, q_per_example, alpha):
    """Blend old prototypes with responsibility-weighted support means.

    ``q_per_example`` is ``(n_support, M)``. A prototype whose total
    responsibility mass is below 1e-12 keeps its old value.
    """
    old = np.atleast_2d(np.asarray(old_protos, dtype=np.float64))
    S = np.atleast_2d(np.asarray(support_embs, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_per_example, dtype=np.float64))
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    if S.shape[0] < 1:
        raise ShapeError("at least one support example is required")
    if q.shape != (S.shape[0], old.shape[0]) or S.shape[1] != old.shape[1]:
        raise ShapeError(
            f"shapes disagree: protos {old.shape}, support {S.shape}, responsibilities {q.shape}"
        )
    mass = q.sum(axis=0)
    new = old.copy()
    ok = mass >= DEGENERATE_MASS
    if np.any(ok):
        means = (q[:, ok].T @ S) / mass[ok, None]
        new[ok] = alpha * old[ok] + (1.0 - alpha) * means
    return new


class LinearFormWitness(NamedTuple):
    """Terms of ``-sum_z q d(f, mu_z) = constant + w.f - b``."""

    w: np.ndarray
    b: float
    constant: float

    def value(self, emb):
        return self.constant + float(self.w @ emb) - self.b


def linear_form(emb, class_protos, q):
    """Rewrite the responsibility-weighted distance as an affine function of ``emb``.

    With ``q`` held fixed, ``w = 2 sum_z q_z mu_z`` acts as an example-specific
    prototype and ``b = sum_z q_z ||mu_z||^2`` as its bias.
    """
    emb = np.asarray(emb, dtype=np.float64)
    protos = np.atleast_2d(np.asarray(class_protos, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (protos.shape[0],):
        raise ShapeError(f"{q.shape[0] if q.ndim else 0} responsibilities for {protos.shape[0]} prototypes")
    if emb.shape != (protos.shape[1],):
        raise ShapeError(f"embedding shape {emb.shape} does not match prototypes {protos.shape}")
    w = 2.0 * (q @ protos)
    b = float(q @ np.einsum("zd,zd->z", protos, protos))
    constant = -float(emb @ emb)
    return LinearFormWitness(w, b, constant)


def reinit_epoch(bank, per_class_embeddings, M_config, seed):
    """Replace every class's prototypes with k-means centers of its embeddings."""
    missing = [k for k in bank.classes if k not in per_class_embeddings]
    if missing:
        raise StateError(f"no embeddings for bank classes {missing}")
    protos = {}
    for j, k in enumerate(bank.classes):
        E = np.atleast_2d(per_class_embeddings[k])
        M = M_config[k] if isinstance(M_config, dict) else int(M_config)
        protos[k] = kmeans(E, min(M, E.shape[0]), _class_seed(seed, k)).centers
    return PrototypeBank(protos, bank.tau, bank.alpha, list(bank.classes))


def _class_seed(seed, k):
    ss = np.random.SeedSequence([int(seed) & ((1 << 64) - 1), int(k)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def bank_from_embeddings(per_class_embeddings, M_config, seed, tau=1.0, alpha=0.5):
    """Build a fresh bank by clustering each class's embeddings."""
    classes = list(per_class_embeddings)
    for k in classes:
        if np.atleast_2d(per_class_embeddings[k]).shape[0] == 0:
            raise StateError(f"class {k} has no examples")
    dim = np.atleast_2d(per_class_embeddings[classes[0]]).shape[1]
    seed_bank = PrototypeBank({k: np.zeros((1, dim)) for k in classes}, tau, alpha, classes)
    return reinit_epoch(seed_bank, per_class_embeddings, M_config, seed)


def save_bank(bank, fh):
    fh.write(f"pcn-bank v1 {bank.dim}\n")
    for k in bank.classes:
        for z, mu in enumerate(bank.prototypes[k]):
            fh.write(f"{k} {z} " + " ".join("%.17g" % v for v in mu) + "\n")


def load_bank(lines, start=0, tau=1.0, alpha=0.5):
    """Parse a ``pcn-bank v1`` block; reads to the end of ``lines``."""
    if start >= len(lines):
        raise ParseError("missing pcn-bank header", start + 1)
    head = lines[start].split()
    if len(head) != 3 or head[0] != "pcn-bank":
        raise ParseError("expected 'pcn-bank v1 <D_emb>' header", start + 1)
    if head[1] != "v1":
        raise UnsupportedVersionError(f"unsupported pcn-bank version {head[1]!r}", start + 1)
    try:
        dim = int(head[2])
    except ValueError as exc:
        raise ParseError("bad embedding dimension", start + 1) from exc
    rows = {}
    for lineno in range(start + 1, len(lines)):
        line = lines[lineno]
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != dim + 2:
            raise ParseError(f"expected {dim + 2} fields, got {len(parts)}", lineno + 1)
        try:
            k, z = int(parts[0]), int(parts[1])
            vec = np.array([float(t) for t in parts[2:]])
        except ValueError as exc:
            raise ParseError(f"bad value: {exc}", lineno + 1) from exc
        if not np.all(np.isfinite(vec)):
            raise ParseError("non-finite prototype value", lineno + 1)
        protos = rows.setdefault(k, [])
        if z != len(protos):
            raise ParseError(f"class {k}: expected prototype index {len(protos)}, got {z}", lineno + 1)
        protos.append(vec)
    if not rows:
        raise ParseError("bank has no prototypes", len(lines))
    return PrototypeBank({k: np.stack(v) for k, v in rows.items()}, tau, alpha, list(rows))
