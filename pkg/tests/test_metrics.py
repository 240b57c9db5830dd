import itertools
import json
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from musemask.errors import RegionError, ShapeError
from musemask.metrics import (
    EvalReport,
    class_area_w1,
    class_fractions,
    diversity_score,
    finite_psnr,
    mask_accuracy,
    psnr,
    region_psnr,
    wasserstein_1d,
)
from musemask.semantic_maps import NUM_CLASSES, SemanticMap


def quantile_w1(u, v):
    """Integral over q of |F_u^-1(q) - F_v^-1(q)|, evaluated piecewise between
    the merged step breakpoints of both quantile functions."""
    u, v = np.sort(u), np.sort(v)
    cuts = sorted(set([i / len(u) for i in range(len(u) + 1)] + [j / len(v) for j in range(len(v) + 1)]))
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = (lo + hi) / 2
        total += (hi - lo) * abs(u[int(mid * len(u))] - v[int(mid * len(v))])
    return total


def quantile_class_w1(set_a, set_b):
    fa, fb = class_fractions(set_a), class_fractions(set_b)
    return float(np.mean([quantile_w1(fa[:, c], fb[:, c]) for c in range(NUM_CLASSES)]))


def loop_psnr(a, b, max_val):
    sq = 0.0
    flat_a, flat_b = np.ravel(a), np.ravel(b)
    for x, y in zip(flat_a, flat_b):
        sq += (float(x) - float(y)) ** 2
    mse = sq / len(flat_a)
    return math.inf if mse == 0 else 10 * math.log10(max_val**2 / mse)


# trivial examples


def test_mask_accuracy_examples():
    a = np.array([[1, 2], [3, 4]], np.uint8)
    assert mask_accuracy(SemanticMap(a), SemanticMap(a)) == 1.0
    assert mask_accuracy(a, (a + 1) % NUM_CLASSES) == 0.0
    b = a.copy()
    b[0] = 0
    assert mask_accuracy(a, b) == 0.5
    with pytest.raises(ShapeError):
        mask_accuracy(a, a[:1])


def test_psnr_examples():
    assert psnr([0, 0], [10, 0], 255) == pytest.approx(31.14, abs=0.01)
    assert psnr([0, 0], [10, 0], 255) == pytest.approx(10 * math.log10(255**2 / 50), abs=1e-12)
    assert psnr([3, 4], [3, 4]) == math.inf
    assert finite_psnr(math.inf) == 100.0
    with pytest.raises(ShapeError):
        psnr([1, 2], [1, 2, 3])


def test_region_psnr_examples(rng):
    a = rng.integers(0, 256, (6, 6, 3))
    b = rng.integers(0, 256, (6, 6, 3))
    assert region_psnr(a, b, np.ones((6, 6), bool)) == psnr(a, b)
    region = np.zeros((6, 6), bool)
    region[:3] = True
    c = a.copy()
    c[3:] = b[3:]
    assert region_psnr(a, c, region) == math.inf
    with pytest.raises(RegionError):
        region_psnr(a, b, np.zeros((6, 6), bool))


def test_class_area_w1_examples():
    labels = np.zeros((10, 10), np.uint8)
    labels[:2] = 1
    other = np.zeros((10, 10), np.uint8)
    other[:3] = 1
    # class 1: 0.2 vs 0.3, background 0.8 vs 0.7 moves with it
    expected = (0.1 + 0.1) / NUM_CLASSES
    assert class_area_w1([labels], [other]) == pytest.approx(expected, abs=1e-12)
    assert class_area_w1([labels, other], [labels, other]) == 0.0
    with pytest.raises(ValueError):
        class_area_w1([], [labels])


def test_single_class_fraction_difference():
    # only one column differs: 0.1 / C
    fa = np.zeros((1, NUM_CLASSES))
    fb = np.zeros((1, NUM_CLASSES))
    fa[0, 3], fb[0, 3] = 0.2, 0.3
    from musemask.metrics import fraction_w1

    assert fraction_w1(fa, fb) == pytest.approx(0.1 / NUM_CLASSES, abs=1e-15)


def test_diversity_examples():
    a = np.zeros((4, 4), np.uint8)
    b = np.ones((4, 4), np.uint8)
    assert diversity_score([a, a.copy()]) == 0.0
    region = np.zeros((4, 4), bool)
    region[1:3, 1:3] = True
    assert diversity_score([a, b], region) == 1.0
    with pytest.raises(ValueError):
        diversity_score([a])


# independent oracles


def test_psnr_matches_loop_oracle(rng):
    for _ in range(20):
        a = rng.integers(0, 256, (5, 7, 3))
        b = rng.integers(0, 256, (5, 7, 3))
        assert psnr(a, b) == pytest.approx(loop_psnr(a, b, 255), abs=1e-9)
        region = rng.random((5, 7)) < 0.5
        region[0, 0] = True
        assert region_psnr(a, b, region) == pytest.approx(loop_psnr(a[region], b[region], 255), abs=1e-9)


def test_diversity_three_maps_brute_force(rng):
    maps = [rng.integers(0, 3, (8, 8)) for _ in range(3)]
    region = rng.random((8, 8)) < 0.6
    pairs = []
    for i, j in itertools.combinations(range(3), 2):
        pairs.append(sum(maps[i][y, x] != maps[j][y, x] for y in range(8) for x in range(8) if region[y, x]) / region.sum())
    assert diversity_score(maps, region) == pytest.approx(sum(pairs) / 3, abs=1e-12)


@pytest.mark.parametrize("na,nb", [(5, 5), (7, 3), (1, 9), (20, 13)])
def test_class_area_w1_matches_quantile_oracle(rng, na, nb):
    set_a = [SemanticMap(rng.integers(0, NUM_CLASSES, (12, 12)).astype(np.uint8)) for _ in range(na)]
    set_b = [SemanticMap(rng.choice(4, (12, 12)).astype(np.uint8)) for _ in range(nb)]
    assert abs(class_area_w1(set_a, set_b) - quantile_class_w1(set_a, set_b)) <= 1e-9


def test_wasserstein_matches_scipy(rng):
    for _ in range(20):
        u, v = rng.random(rng.integers(1, 30)), rng.random(rng.integers(1, 30))
        assert wasserstein_1d(u, v) == pytest.approx(scipy.stats.wasserstein_distance(u, v), abs=1e-12)


# invariants

maps_pair = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: st.tuples(arrays(np.uint8, s, elements=st.integers(0, NUM_CLASSES - 1)),
                        arrays(np.uint8, s, elements=st.integers(0, NUM_CLASSES - 1))))


@given(maps_pair)
def test_mask_accuracy_properties(pair):
    a, b = pair
    acc = mask_accuracy(a, b)
    assert acc == mask_accuracy(b, a)
    assert 0.0 <= acc <= 1.0
    assert (acc == 1.0) == bool(np.array_equal(a, b))


label_sets = st.lists(arrays(np.uint8, (4, 4), elements=st.integers(0, NUM_CLASSES - 1)), min_size=1, max_size=5)


@given(label_sets, label_sets)
def test_class_area_w1_pseudometric(a, b):
    d = class_area_w1(a, b)
    assert d >= 0
    assert d == pytest.approx(class_area_w1(b, a), abs=1e-12)
    assert class_area_w1(a, a) == 0.0


@given(st.tuples(st.integers(1, 5), st.integers(1, 5)).flatmap(
    lambda s: st.tuples(arrays(np.int64, s, elements=st.integers(0, 255)), arrays(np.int64, s, elements=st.integers(0, 255)))))
def test_region_psnr_all_ones_is_psnr(pair):
    a, b = pair
    assert region_psnr(a, b, np.ones(a.shape, bool)) == psnr(a, b)


# report


def test_eval_report_round_trip_and_validation():
    rep = EvalReport({"b": 1.5, "a": 0.25}, 3, "abc", 7, {"proxy": "class_area_w1"})
    text = rep.to_json()
    assert list(json.loads(text)["metrics"]) == ["a", "b"]
    assert EvalReport.from_json(text) == rep
    with pytest.raises(ValueError):
        EvalReport({"a": math.inf}, 1, "x", 0)
    with pytest.raises(ValueError):
        EvalReport({"a": 1.0}, 0, "x", 0)
