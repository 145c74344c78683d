"""Brute-force scalar oracles for the metric definitions."""
import numpy as np

from atdfuse.metrics import accuracy_f1, mae, mse, recall_at_k


def oracle_mae(y, p):
    total = 0.0
    for a, b in zip(y, p):
        total += abs(a - b)
    return total / len(y)


def oracle_mse(y, p):
    total = 0.0
    for a, b in zip(y, p):
        total += (a - b) * (a - b)
    return total / len(y)


def oracle_f1(y, p, n_classes):
    correct = sum(1 for a, b in zip(y, p) if a == b)
    f1s = []
    for c in range(n_classes):
        tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return correct, f1s


def oracle_recall(sim, truth, k):
    hits = 0
    for row, t in zip(sim, truth):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += t in order[:k]
    return hits, len(truth)



def run_metric_oracles(n_instances=1000, seed=0):
    """Largest float deviation and count mismatches over random small cases."""
    rng = np.random.default_rng(seed)
    worst, count_mismatch, monotone_violations = 0.0, 0, 0
    for _ in range(n_instances):
        n = int(rng.integers(1, 15))
        y, p = rng.normal(size=n), rng.normal(size=n)
        worst = max(worst, abs(mae(y, p) - oracle_mae(y.tolist(), p.tolist())),
                    abs(mse(y, p) - oracle_mse(y.tolist(), p.tolist())))

        c = int(rng.integers(2, 5))
        yt, yp = rng.integers(0, c, n), rng.integers(0, c, n)
        rep = accuracy_f1(yt, yp, n_classes=c)
        correct, f1s = oracle_f1(yt.tolist(), yp.tolist(), c)
        count_mismatch += round(rep.accuracy * n) != correct
        worst = max(worst, abs(rep.accuracy - correct / n),
                    abs(rep.macro_f1 - sum(f1s) / c),
                    max(abs(a - b) for a, b in zip(rep.per_class_f1, f1s)))

        nq, ng = int(rng.integers(1, 8)), int(rng.integers(10, 16))
        # coarse values so ties actually occur
        sim = rng.integers(0, 4, (nq, ng)).astype(float)
        truth = rng.integers(0, ng, nq)
        rs = []
        for k in (1, 5, 10):
            hits, total = oracle_recall(sim.tolist(), truth.tolist(), k)
            got = recall_at_k(sim, truth, k)
            count_mismatch += round(got * total / 100.0) != hits
            worst = max(worst, abs(got - 100.0 * hits / total))
            rs.append(got)
        monotone_violations += not (rs[0] <= rs[1] <= rs[2])
    return worst, count_mismatch, monotone_violations
