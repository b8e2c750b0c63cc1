import numpy as np
import pytest

from mct.metrics import (ConfusionMatrix, MetricsError, aa, absent_classes, kappa, oa, palette, read_ppm,
                         render_map, summary, write_csv, write_json, write_ppm)
from oracles import brute_metrics


def test_accumulate():
    cm = ConfusionMatrix(3).accumulate(1, 1)
    assert cm.counts[0, 0] == 1
    cm.accumulate(2, 1)
    assert cm.counts[1, 0] == 1 and cm.total == 2
    with pytest.raises(MetricsError):
        cm.accumulate(0, 2)
    with pytest.raises(MetricsError):
        cm.accumulate(1, 4)


def test_hand_case():
    cm = ConfusionMatrix(2, [[40, 10], [20, 30]])
    assert oa(cm) == pytest.approx(0.70, abs=1e-15)
    assert aa(cm) == pytest.approx(0.70, abs=1e-15)
    assert kappa(cm) == pytest.approx(0.40, abs=1e-15)


def test_perfect_and_constant_predictor():
    cm = ConfusionMatrix(3, np.diag([5, 7, 2]))
    assert oa(cm) == aa(cm) == kappa(cm) == 1.0
    constant = ConfusionMatrix(2, [[50, 0], [50, 0]])
    assert kappa(constant) == pytest.approx(0.0, abs=1e-15)


def test_degenerate_kappa_warns():
    with pytest.warns(RuntimeWarning, match="degenerate"):
        assert kappa(ConfusionMatrix(2, [[9, 0], [0, 0]])) == 0.0


def test_empty_matrix_errors():
    with pytest.raises(MetricsError):
        oa(ConfusionMatrix(2))


def test_absent_class_excluded_from_aa():
    cm = ConfusionMatrix(3, [[3, 1, 0], [0, 0, 0], [0, 0, 2]])
    assert absent_classes(cm) == [2]
    assert aa(cm) == pytest.approx((0.75 + 1.0) / 2)
    s = summary(cm)
    assert s["per_class"][1] is None and s["n"] == 6


def test_random_matrices_match_brute_force_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 200))
        truth = rng.integers(1, c + 1, n)
        pred = np.where(rng.random(n) < 0.6, truth, rng.integers(1, c + 1, n))
        cm = ConfusionMatrix(c).update(truth, pred)
        o, a, k = brute_metrics(truth.tolist(), pred.tolist(), c)
        assert abs(oa(cm) - o) <= 1e-12
        assert abs(aa(cm) - a) <= 1e-12
        if not np.isclose((cm.counts.sum(1) * cm.counts.sum(0)).sum(), n * n):
            assert abs(kappa(cm) - k) <= 1e-12
            assert kappa(cm) <= oa(cm) + 1e-12


def test_class_permutation_invariance():
    rng = np.random.default_rng(1)
    truth = rng.integers(1, 5, 300)
    pred = np.where(rng.random(300) < 0.5, truth, rng.integers(1, 5, 300))
    perm = np.array([0, 3, 1, 4, 2])  # relabel 1..4, keep 0 fixed
    a = ConfusionMatrix(4).update(truth, pred)
    b = ConfusionMatrix(4).update(perm[truth], perm[pred])
    for f in (oa, aa, kappa):
        assert f(a) == pytest.approx(f(b), abs=1e-12)


def test_merge_is_commutative_and_associative(rng):
    mats = [ConfusionMatrix(3, rng.integers(0, 9, (3, 3))) for _ in range(3)]
    ab_c = mats[0].merge(mats[1]).merge(mats[2]).counts
    a_bc = mats[0].merge(mats[1].merge(mats[2])).counts
    np.testing.assert_array_equal(ab_c, a_bc)
    np.testing.assert_array_equal(mats[0].merge(mats[1]).counts, mats[1].merge(mats[0]).counts)


def test_json_and_csv(tmp_path):
    s = summary(ConfusionMatrix(2, [[40, 10], [20, 30]]))
    write_json(s, tmp_path / "m.json")
    write_csv(s, tmp_path / "m.csv")
    assert '"kappa"' in (tmp_path / "m.json").read_text()
    assert (tmp_path / "m.csv").read_text().splitlines()[1].startswith("oa,0.7")


def test_palette_distinct_and_black_background():
    p = palette(20)
    assert p.shape == (21, 3) and (p[0] == 0).all()
    assert len({tuple(row) for row in p[1:]}) == 20
    np.testing.assert_array_equal(palette(20), p)


def test_render_and_ppm(tmp_path):
    pred = np.array([[1, 2, 3], [3, 2, 1]])
    mask = np.array([[1, 0, 1], [1, 1, 0]])
    img = render_map(pred, 3, mask, mode="labeled")
    assert img.shape == (2, 3, 3)
    assert (img[0, 1] == 0).all() and (img[1, 2] == 0).all()
    full = render_map(pred, 3, mode="full")
    assert (full[0, 1] == palette(3)[2]).all()
    write_ppm(img, tmp_path / "a.ppm")
    write_ppm(render_map(pred, 3, mask, mode="labeled"), tmp_path / "b.ppm")
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    with pytest.raises(MetricsError):
        render_map(pred, 3, mode="labeled")
