"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see
the lines as they are produced; they are also collected into the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

from oracles import (
    best_two_partition,
    central_differences,
    flat_params,
    max_relative_error,
    pn_episode_loss,
    pn_posterior,
    ref_episode_loss,
    ref_forward,
    sqd,
    with_params,
)
from pcn import cli, harness
from pcn.config import RunConfig
from pcn.episodic import Episode, EpisodeConfig, episode_loss
from pcn.metrics import balanced_recall_at_k, mca, recall_at_k
from pcn.numerics import net_forward, net_init
from pcn.protobank import PrototypeBank, class_posterior, ema_update, kmeans, linear_form, responsibilities


def _random_episode(rng, n_way, D_in, n_s, n_q):
    X = rng.normal(size=(n_way * (n_s + n_q), D_in))
    block = n_s + n_q
    support = [np.arange(j * block, j * block + n_s) for j in range(n_way)]
    query = [np.arange(j * block + n_s, (j + 1) * block) for j in range(n_way)]
    return X, Episode(list(range(n_way)), support, query)


# 1 ---------------------------------------------------------------------------


def test_criterion_01_pn_equivalence(acceptance):
    start = time.perf_counter()
    worst_post = worst_loss = 0.0
    for i in range(100):
        rng = np.random.default_rng([1, i])
        D_in, D = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        n_way = int(rng.integers(2, 6))
        net = net_init([D_in, int(rng.integers(3, 8)), D], 10_000 + i)
        bank = PrototypeBank({k: rng.normal(size=(1, D)) for k in range(n_way)}, tau=float(rng.uniform(0.2, 5)),
                             alpha=0.0)

        x = rng.normal(size=D_in)
        emb_ref = ref_forward(net, x[None])[0]
        emb, _ = net_forward(net, x[None])
        got = class_posterior(emb[0], bank)
        want = pn_posterior(emb_ref, [bank.prototypes[k][0] for k in range(n_way)])
        worst_post = max(worst_post, float(np.max(np.abs(got - np.array(want)))))

        n_s, n_q = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        X, ep = _random_episode(rng, n_way, D_in, n_s, n_q)
        cfg = EpisodeConfig(n_way, n_s, n_q, 1, bank.tau, 0.0, bool(i % 2))
        loss, _, _ = episode_loss(net, bank, ep, cfg, X)
        E = ref_forward(net, X)
        want_loss = pn_episode_loss([E[s] for s in ep.support], [E[q] for q in ep.query])
        worst_loss = max(worst_loss, abs(loss - want_loss))
    elapsed = time.perf_counter() - start
    ok = worst_post <= 1e-10 and worst_loss <= 1e-10 and elapsed < 10
    acceptance(1, "PN equivalence", ok,
               f"max |posterior diff| {worst_post:.2e}, max |loss diff| {worst_loss:.2e}, {elapsed:.1f}s")


# 2 ---------------------------------------------------------------------------


def _gradient_case(i, stop):
    rng = np.random.default_rng([2, i])
    n_way = int(rng.integers(2, 4))
    D_in, D = int(rng.integers(2, 5)), int(rng.integers(2, 9))
    net = net_init([D_in, int(rng.integers(3, 6)), D], 20_000 + i)
    n_s, n_q = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    X, ep = _random_episode(rng, n_way, D_in, n_s, n_q)
    M = int(rng.integers(1, 4))
    old = [rng.normal(scale=0.7, size=(M, D)) for _ in range(n_way)]
    tau, alpha = float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.0, 0.9))
    bank = PrototypeBank(dict(enumerate(old)), tau, alpha)
    cfg = EpisodeConfig(n_way, n_s, n_q, 1, tau, alpha, stop)
    _, grads, _ = episode_loss(net, bank, ep, cfg, X)
    analytic = np.concatenate([g.ravel() for g in grads.parameters()])

    def ref(vec, frozen=None, record=None):
        E = ref_forward(with_params(net, vec), X)
        sup = [E[s] for s in ep.support]
        qry = [E[q] for q in ep.query]
        return ref_episode_loss(sup, qry, old, tau, alpha, frozen, record)[0]

    base = flat_params(net)
    record = {}
    ref(base, record=record)
    # with stop-gradient the responsibilities are frozen at the base point
    frozen = record if stop else None
    numeric = central_differences(lambda v: ref(v, frozen), base, step=1e-5)
    return max_relative_error(analytic, numeric)


def test_criterion_02_gradients(acceptance):
    start = time.perf_counter()
    worst = {False: 0.0, True: 0.0}
    for stop in (False, True):
        for i in range(20):
            worst[stop] = max(worst[stop], _gradient_case(i, stop))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    acceptance(2, "episode-loss gradients", ok,
               f"max rel err {worst[False]:.2e} (full), {worst[True]:.2e} (stop_grad_q), {elapsed:.1f}s")


# 3 ---------------------------------------------------------------------------


def test_criterion_03_linear_form(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        D, M = int(rng.integers(1, 9)), int(rng.integers(1, 6))
        emb = rng.normal(size=D)
        protos = rng.normal(scale=2.0, size=(M, D))
        tau = float(np.exp(rng.uniform(-3, 3)))
        q = responsibilities(emb, protos, tau)
        lhs = -sum(qz * sqd(emb, mu) for qz, mu in zip(q, protos))
        worst = max(worst, abs(lhs - linear_form(emb, protos, q).value(emb)))
    elapsed = time.perf_counter() - start
    acceptance(3, "linear-form identity", worst <= 1e-8 and elapsed < 5, f"max |diff| {worst:.2e}, {elapsed:.2f}s")


# 4 ---------------------------------------------------------------------------


def test_criterion_04_temperature_limits(acceptance):
    rng = np.random.default_rng(4)
    worst_cold = worst_hot = 0.0
    done = 0
    while done < 100:
        D, M = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        emb = rng.uniform(-0.5, 0.5, size=D)
        protos = rng.uniform(-0.5, 0.5, size=(M, D))
        d = np.sort([sqd(emb, p) for p in protos])
        if d[1] - d[0] < 1e-4:
            continue  # the cold limit needs a unique nearest prototype
        nearest = int(np.argmin([sqd(emb, p) for p in protos]))
        worst_cold = max(worst_cold, 1.0 - responsibilities(emb, protos, 1e-6)[nearest])
        worst_hot = max(worst_hot, float(np.max(np.abs(responsibilities(emb, protos, 1e6) - 1.0 / M))))
        done += 1
    ok = worst_cold <= 1e-6 and worst_hot < 1e-6
    acceptance(4, "temperature limits", ok,
               f"tau=1e-6 missing mass {worst_cold:.2e}, tau=1e6 max deviation {worst_hot:.2e}")


# 5 ---------------------------------------------------------------------------


def test_criterion_05_kmeans(acceptance):
    rng = np.random.default_rng(5)
    increases = 0
    for i in range(100):
        n, D = int(rng.integers(1, 80)), int(rng.integers(1, 6))
        M = int(rng.integers(1, 10))
        centers = rng.normal(scale=3, size=(4, D))
        pts = centers[rng.integers(0, 4, size=n)] + rng.normal(size=(n, D))
        _, history = kmeans(pts, M, seed=i, return_history=True)
        increases += sum(b > a * (1 + 1e-12) + 1e-12 for a, b in zip(history, history[1:]))

    rect = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    best_sse, best_centers = best_two_partition(rect)
    want = sorted(map(tuple, best_centers))
    rect_ok = True
    for seed in range(20):
        res = kmeans(rect, 2, seed)
        rect_ok &= sorted(map(tuple, res.centers)) == want and math.isclose(res.sse, best_sse)
    ok = increases == 0 and rect_ok
    acceptance(5, "k-means", ok,
               f"{increases} SSE increases over 100 instances; rectangle optimum {np.array(want).tolist()} recovered for 20 seeds: "
               f"{rect_ok}")


# 6 ---------------------------------------------------------------------------


def test_criterion_06_ema_rules(acceptance):
    rng = np.random.default_rng(6)
    identity_ok = mean_ok = True
    for _ in range(50):
        M, D, n = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 6))
        old = rng.normal(size=(M, D))
        S = rng.normal(size=(n, D))
        q = rng.dirichlet(np.ones(M), size=n)
        identity_ok &= np.array_equal(ema_update(old, S, q, 1.0), old)
        got = ema_update(old, S, q, 0.0)
        for z in range(M):
            mass = sum(q[i, z] for i in range(n))
            want = [sum(q[i, z] * S[i, d] for i in range(n)) / mass for d in range(D)]
            mean_ok &= np.allclose(got[z], want, rtol=1e-12, atol=1e-12)
    midpoint = ema_update([[0.0, 0.0]], [[2.0, 2.0]], [[1.0]], 0.5)
    midpoint_ok = np.array_equal(midpoint, [[1.0, 1.0]])

    adversarial = [
        np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        np.array([[1.0, 5e-324, 0.0], [1.0, 0.0, 5e-324]]),
        np.array([[1.0 - 1e-13, 1e-13, 0.0]]),
        np.array([[1.0, 1e-300, 1e-300], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
        np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]]),
    ]
    degenerate_ok = True
    for q in adversarial:
        old = rng.normal(size=(3, 4))
        S = rng.normal(scale=1e150, size=(q.shape[0], 4))
        new = ema_update(old, S, q, 0.3)
        light = q.sum(axis=0) < 1e-12
        degenerate_ok &= bool(np.all(np.isfinite(new))) and np.array_equal(new[light], old[light])
    ok = identity_ok and mean_ok and midpoint_ok and degenerate_ok
    acceptance(6, "EMA rules", ok,
               f"alpha=1 identity {identity_ok}, alpha=0 mean {mean_ok}, midpoint {midpoint.tolist()}, "
               f"degenerate mass finite {degenerate_ok}")


# 7 ---------------------------------------------------------------------------

# Each fixture: (n_classes, ranked predictions, labels, hand-computed values).
# Hand values are Fractions: mca, then recall@k and balanced recall@k for k = 1..n_classes.
METRIC_FIXTURES = [
    (
        2,
        [[0, 1]] * 3 + [[1, 0]] + [[1, 0]] + [[0, 1]],
        [0, 0, 0, 0, 1, 1],
        {"mca": Fraction(5, 8), "recall": [Fraction(4, 6), 1], "balanced": [Fraction(5, 8), 1]},
    ),
    (
        6,
        [[2, 0, 1, 3, 4, 5], [0, 1, 2, 3, 4, 5], [0, 2, 1, 3, 4, 5]],
        [2, 5, 2],
        {
            "mca": Fraction(1, 4),
            "recall": [Fraction(1, 3), Fraction(2, 3), Fraction(2, 3), Fraction(2, 3), Fraction(2, 3), 1],
            "balanced": [Fraction(1, 4), Fraction(1, 2), Fraction(1, 2), Fraction(1, 2), Fraction(1, 2), 1],
        },
    ),
    (
        2,
        [[0, 1]] * 10 + [[0, 1]],
        [0] * 10 + [1],
        {"mca": Fraction(1, 2), "recall": [Fraction(10, 11), 1], "balanced": [Fraction(1, 2), 1]},
    ),
    (
        3,
        [[0, 1, 2], [1, 0, 2], [2, 1, 0]],
        [0, 1, 2],
        {"mca": Fraction(1), "recall": [1, 1, 1], "balanced": [1, 1, 1]},
    ),
    (
        3,
        [[1, 2, 0], [2, 0, 1], [0, 1, 2], [1, 0, 2], [2, 1, 0]],
        [0, 0, 1, 1, 2],
        {
            "mca": Fraction(1, 2),
            "recall": [Fraction(2, 5), Fraction(4, 5), 1],
            "balanced": [Fraction(1, 2), Fraction(5, 6), 1],
        },
    ),
]


def test_criterion_07_metrics(acceptance):
    exact = monotone = full = bal_is_mca = True
    for n_classes, ranked, labels, hand in METRIC_FIXTURES:
        ranked = np.array(ranked)
        labels = np.array(labels)
        exact &= mca(ranked, labels) == float(hand["mca"])
        prev = -1.0
        for k in range(1, n_classes + 1):
            r = recall_at_k(ranked, labels, k)
            exact &= r == float(hand["recall"][k - 1])
            exact &= balanced_recall_at_k(ranked, labels, k) == float(hand["balanced"][k - 1])
            monotone &= r >= prev
            prev = r
        full &= recall_at_k(ranked, labels, n_classes) == 1.0
        bal_is_mca &= balanced_recall_at_k(ranked, labels, 1) == mca(ranked, labels)
    ok = exact and monotone and full and bal_is_mca
    acceptance(7, "metrics oracle", ok,
               f"exact match {exact}, monotone in k {monotone}, recall@K=1 {full}, balanced@1=mca {bal_is_mca}")


# 8 and 9 ---------------------------------------------------------------------

SEEDS = range(5)


def _experiment_config(seed, modes):
    # 5-way 5-shot episodes: with head_count 200 and tail exponent 1, only nine
    # base classes have the 11 training examples a 10-shot episode would need.
    return RunConfig(
        seed=seed, n_classes=20, n_base=15, modes_per_class=modes, tail_exponent=1.0, head_count=200, warp=True,
        n_way=5, n_support=5, n_query=5, episodes_per_epoch=50, M_base=10, M_novel=4, alpha=0.5,
        learning_rate=1e-3, max_epochs=30, patience=5, n_train_shot=5, n_test_shot=5, folds=10,
    ).validate()


@pytest.fixture(scope="module")
def directional_runs():
    start = time.perf_counter()
    runs = {}
    for modes in (3, 1):
        for seed in SEEDS:
            rc = _experiment_config(seed, modes)
            ds = harness.make_dataset(rc)
            folds = harness.make_folds(ds, rc)
            for method in ("pcn", "pn"):
                _, m_base, m_novel = harness.method_config(rc, method)
                result = harness.train_model(ds, rc, method)
                report = harness.prototype_lowshot(result.net, ds, folds, m_base, m_novel, rc.tau_train, rc.seed)
                runs[modes, seed, method] = (rc, ds, folds, result.net, report)
    return runs, time.perf_counter() - start


def _mean(runs, modes, method, key):
    return float(np.mean([runs[modes, s, method][4].values[key] for s in SEEDS]))


def test_criterion_08_directional(acceptance, directional_runs):
    runs, elapsed = directional_runs
    pcn_multi, pn_multi = _mean(runs, 3, "pcn", "mca_novel"), _mean(runs, 3, "pn", "mca_novel")
    pcn_uni, pn_uni = _mean(runs, 1, "pcn", "mca_novel"), _mean(runs, 1, "pn", "mca_novel")
    gap = abs(pcn_uni - pn_uni)
    ok = pcn_multi >= pn_multi and gap <= 0.05 and elapsed < 600
    acceptance(8, "directional novel-class analog", ok,
               f"multimodal mca_novel PCN {pcn_multi:.4f} vs PN {pn_multi:.4f}; unimodal PCN {pcn_uni:.4f} "
               f"vs PN {pn_uni:.4f} (|diff| {gap:.4f}); {elapsed:.0f}s")


def test_criterion_09_posthoc(acceptance, directional_runs):
    runs, _ = directional_runs
    pcn = _mean(runs, 3, "pcn", "mca_base+novel")
    posthoc = {}
    for m_base, m_novel in ((1, 4), (10, 4)):
        vals = []
        for seed in SEEDS:
            rc, ds, folds, pn_net, _ = runs[3, seed, "pn"]
            report = harness.prototype_lowshot(pn_net, ds, folds, m_base, m_novel, rc.tau_train, rc.seed)
            vals.append(report.values["mca_base+novel"])
        posthoc[f"{m_base}/{m_novel}"] = float(np.mean(vals))
    ok = all(v <= pcn for v in posthoc.values())
    detail = ", ".join(f"PN post-hoc {k} {v:.4f}" for k, v in posthoc.items())
    acceptance(9, "post-hoc clustering analog", ok, f"PCN mca_base+novel {pcn:.4f}; {detail}")


# 10 --------------------------------------------------------------------------


def _pipeline(out_dir):
    common = ["--seed", "11", "--head-count", "200", "--n-way", "5", "--n-support", "3", "--n-query", "3",
              "--episodes-per-epoch", "10", "--max-epochs", "2", "--hidden-dims", "16", "--emb-dim", "4",
              "--ambient-dim", "6", "--folds", "3", "--out-dir", str(out_dir)]
    data = str(out_dir / "data.txt")
    ckpt = str(out_dir / "model.ckpt")
    codes = [
        cli.main(["gen", *common, "--out", data]),
        cli.main(["train", *common, "--dataset", data, "--checkpoint", ckpt]),
        cli.main(["lowshot", *common, "--dataset", data, "--checkpoint", ckpt, "--sweep", "shot",
                  "--shot-grid", "1,2"]),
    ]
    outputs = {p.name: p.read_bytes() for p in sorted(out_dir.iterdir()) if p.suffix in (".csv", ".txt", ".ckpt")}
    return codes, outputs


def test_criterion_10_determinism(acceptance, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, out_a = _pipeline(tmp_path / "a")
    codes_b, out_b = _pipeline(tmp_path / "b")
    csvs = sorted(n for n in out_a if n.endswith(".csv"))
    same = out_a.keys() == out_b.keys() and all(out_a[n] == out_b[n] for n in out_a)
    ok = codes_a == codes_b == [0, 0, 0] and same and len(csvs) >= 4
    acceptance(10, "determinism", ok, f"exit codes {codes_a}/{codes_b}; byte-identical {same} over {csvs}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
