from __future__ import annotations

import math

import numpy as np
import pytest

from moskit.errors import ConfigError, DomainError
from moskit.metrics import (
    MetricReport,
    composite_score,
    evaluate,
    fractional_ranks,
    kendall_tau_b,
    mse,
    pearson_lcc,
    spearman_srcc,
    system_level,
)


# brute-force oracles, kept deliberately independent of the implementations
def naive_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    return cov / math.sqrt(vx * vy)


def naive_ranks(x):
    return [1 + sum(1 for v in x if v < xi) + (sum(1 for v in x if v == xi) - 1) / 2.0 for xi in x]


def naive_srcc(x, y):
    return naive_pearson(naive_ranks(x), naive_ranks(y))


def naive_ktau_b(x, y):
    c = d = tx = ty = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                c += 1
            else:
                d += 1
    return (c - d) / math.sqrt((c + d + tx) * (c + d + ty))


class TestMse:
    def test_zero_at_equal(self):
        assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand_case(self):
        assert abs(mse([1.0, 2.0], [2.0, 4.0]) - 2.5) < 1e-15

    def test_joint_permutation_invariance(self, rng):
        p = rng.normal(size=12)
        l = rng.normal(size=12)
        perm = rng.permutation(12)
        assert abs(mse(p, l) - mse(p[perm], l[perm])) < 1e-15


class TestPearson:
    def test_perfect_linear(self):
        x = np.array([1.0, 2.0, 3.0])
        assert abs(pearson_lcc(x, 2 * x + 1) - 1.0) < 1e-12

    def test_negated(self):
        x = np.array([1.0, 2.0, 3.0])
        assert abs(pearson_lcc(x, -x) + 1.0) < 1e-12

    def test_hand_case(self):
        assert abs(pearson_lcc([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) < 1e-12

    def test_constant_vector_rejected(self):
        with pytest.raises(DomainError):
            pearson_lcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_affine_invariance(self, rng):
        x = rng.normal(size=10)
        y = rng.normal(size=10)
        assert abs(pearson_lcc(x, y) - pearson_lcc(3.0 * x + 7.0, y)) < 1e-12


class TestSpearman:
    def test_monotone_transform_gives_one(self):
        x = np.array([0.3, 1.7, 0.9, 2.4])
        assert abs(spearman_srcc(x, np.exp(x)) - 1.0) < 1e-12

    def test_hand_ranked_case(self):
        assert abs(spearman_srcc([1, 2, 3], [3, 1, 2]) + 0.5) < 1e-12

    def test_tied_entries_get_average_rank(self):
        assert fractional_ranks([1.0, 1.0, 2.0]).tolist() == [1.5, 1.5, 3.0]

    def test_matches_bruteforce_with_ties(self, rng):
        for _ in range(25):
            x = rng.integers(0, 5, size=10).astype(float)
            y = rng.integers(0, 5, size=10).astype(float)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert abs(spearman_srcc(x, y) - naive_srcc(list(x), list(y))) < 1e-12

    def test_monotone_invariance(self, rng):
        x = rng.normal(size=9)
        y = rng.normal(size=9)
        assert abs(spearman_srcc(x, y) - spearman_srcc(np.exp(x), y)) < 1e-12


class TestKendall:
    def test_identical_orderings(self):
        assert kendall_tau_b([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed_orderings(self):
        assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0

    def test_matches_pair_counting_with_ties(self, rng):
        for _ in range(50):
            x = rng.integers(0, 6, size=10).astype(float)
            y = rng.integers(0, 6, size=10).astype(float)
            if len(set(x)) < 2 or len(set(y)) < 2:
                continue
            assert kendall_tau_b(x, y) == naive_ktau_b(list(x), list(y))

    def test_all_tied_rejected(self):
        with pytest.raises(DomainError):
            kendall_tau_b([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_sign_agrees_with_srcc_at_extremes(self, rng):
        for _ in range(20):
            x = rng.permutation(6).astype(float)
            y = rng.permutation(6).astype(float)
            kt = kendall_tau_b(x, y)
            if abs(kt) == 1.0:
                assert np.sign(spearman_srcc(x, y)) == np.sign(kt)


class TestSystemLevel:
    def test_one_utterance_per_system_is_identity(self, rng):
        preds = rng.normal(size=(5, 4))
        labels = rng.normal(size=(5, 4))
        ids = [f"s{i}" for i in range(5)]
        sp, sl, order = system_level(preds, labels, ids)
        assert order == sorted(ids)
        idx = np.argsort(ids)
        assert np.array_equal(sp, preds[idx])
        assert np.array_equal(sl, labels[idx])

    def test_hand_averaging(self):
        preds = np.array([[1, 1, 1, 1], [3, 3, 3, 3], [2, 4, 6, 8], [4, 6, 8, 10]], float)
        labels = preds + 1.0
        sp, sl, order = system_level(preds, labels, ["a", "a", "b", "b"])
        assert order == ["a", "b"]
        assert np.max(np.abs(sp[0] - [2, 2, 2, 2])) < 1e-12
        assert np.max(np.abs(sp[1] - [3, 5, 7, 9])) < 1e-12
        assert np.max(np.abs(sl[0] - [3, 3, 3, 3])) < 1e-12

    def test_permutation_within_system(self, rng):
        preds = rng.normal(size=(6, 4))
        labels = rng.normal(size=(6, 4))
        ids = ["a", "a", "a", "b", "b", "b"]
        sp1, _, _ = system_level(preds, labels, ids)
        perm = [2, 0, 1, 5, 3, 4]  # shuffles inside each system only
        sp2, _, _ = system_level(preds[perm], labels[perm], [ids[i] for i in perm])
        assert np.max(np.abs(sp1 - sp2)) < 1e-12


class TestComposite:
    def test_constant(self):
        assert composite_score([2.0, 2.0, 2.0, 2.0]) == 2.0

    def test_mean(self):
        assert composite_score([1.0, 3.0, 5.0, 7.0]) == 4.0

    def test_wrong_arity(self):
        with pytest.raises(ConfigError):
            composite_score([1.0, 2.0, 3.0])


class TestEvaluate:
    def _synthetic(self, rng, n_systems=3, per_system=4):
        ids = []
        for s in range(n_systems):
            ids += [f"sys{s}"] * per_system
        labels = rng.uniform(1, 10, size=(len(ids), 4))
        return labels, ids

    def test_perfect_predictions(self, rng):
        labels, ids = self._synthetic(rng)
        report = evaluate(labels, labels, ids)
        for axis in ("pq", "pc", "ce", "cu", "composite"):
            for level in ("utterance", "system"):
                assert report.get(axis, level, "mse") == 0.0
                for metric in ("lcc", "srcc", "ktau"):
                    assert abs(report.get(axis, level, metric) - 1.0) < 1e-12

    def test_serialization_round_trip(self, rng):
        labels, ids = self._synthetic(rng)
        preds = labels + rng.normal(0, 0.5, labels.shape)
        report = evaluate(preds, labels, ids)
        again = MetricReport.from_json(report.to_json())
        assert again.cells == report.cells  # bit-exact through repr floats

    def test_degenerate_cells_marked_undefined(self, rng):
        labels, ids = self._synthetic(rng)
        preds = np.full_like(labels, 5.0)  # constant predictions
        report = evaluate(preds, labels, ids)
        assert report.get("pq", "utterance", "lcc") is None
        assert report.get("pq", "utterance", "mse") is not None
        text = report.to_text()
        assert "undef" in text and "nan" not in text.lower()

    def test_matches_bruteforce_oracles(self, rng):
        labels, ids = self._synthetic(rng, n_systems=4, per_system=5)
        preds = labels + rng.normal(0, 1.0, labels.shape)
        report = evaluate(preds, labels, ids)
        p0, l0 = list(preds[:, 0]), list(labels[:, 0])
        assert abs(report.get("pq", "utterance", "lcc") - naive_pearson(p0, l0)) < 1e-12
        assert abs(report.get("pq", "utterance", "srcc") - naive_srcc(p0, l0)) < 1e-12
        assert report.get("pq", "utterance", "ktau") == naive_ktau_b(p0, l0)
        assert (
            abs(
                report.get("pq", "utterance", "mse")
                - sum((a - b) ** 2 for a, b in zip(p0, l0)) / len(p0)
            )
            < 1e-12
        )
        # system level against hand-grouped means
        sys_p, sys_l = {}, {}
        for i, sid in enumerate(ids):
            sys_p.setdefault(sid, []).append(preds[i, 0])
            sys_l.setdefault(sid, []).append(labels[i, 0])
        mp = [sum(v) / len(v) for _, v in sorted(sys_p.items())]
        ml = [sum(v) / len(v) for _, v in sorted(sys_l.items())]
        assert abs(report.get("pq", "system", "lcc") - naive_pearson(mp, ml)) < 1e-12

    def test_composite_feeds_same_metrics(self, rng):
        labels, ids = self._synthetic(rng)
        preds = labels + rng.normal(0, 0.3, labels.shape)
        report = evaluate(preds, labels, ids)
        comp_p = preds.mean(axis=1)
        comp_l = labels.mean(axis=1)
        assert abs(
            report.get("composite", "utterance", "srcc") - naive_srcc(list(comp_p), list(comp_l))
        ) < 1e-12
