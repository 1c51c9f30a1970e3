import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridspot.anchors import (AnchorSet, cluster_medians, kmeans_anchors, read_anchors,
                              write_anchors)
from gridspot.errors import ParseError, ValidationError
from gridspot.geometry import shape_iou


def two_cluster_shapes():
    """Two shape families whose component-wise medians are exactly the centres."""
    small, large = np.array([0.04, 0.06]), np.array([0.20, 0.10])
    offsets = np.array([-0.1, -0.05, 0.0, 0.05, 0.1])
    rows = [c * (1 + np.array([dx, dy])) for c in (small, large) for dx in offsets for dy in offsets]
    return np.array(rows), np.stack([small, large])


def random_shapes(n, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(8, 32, (n, 2)) / 416 * rng.uniform(0.7, 1.3, (n, 1))


@pytest.mark.parametrize("seed", [0, 1, 2, 7])
def test_two_clusters_recovered_exactly(seed):
    shapes, truth = two_cluster_shapes()
    got = kmeans_anchors(shapes, B=2, seed=seed)
    assert np.array_equal(got.priors, truth)


def test_history_non_decreasing_and_b5_beats_b2():
    shapes = random_shapes(1000, 0)
    a2 = kmeans_anchors(shapes, B=2, seed=0)
    a5 = kmeans_anchors(shapes, B=5, seed=0)
    for a in (a2, a5):
        assert all(y >= x for x, y in zip(a.history, a.history[1:]))
    assert a5.mean_iou >= a2.mean_iou


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_history_monotone_property(seed, B):
    shapes = random_shapes(60, seed)
    a = kmeans_anchors(shapes, B=B, seed=seed)
    assert all(y >= x for x, y in zip(a.history, a.history[1:]))
    assert a.mean_iou >= a.history[-1] - 1e-12
    areas = a.priors[:, 0] * a.priors[:, 1]
    assert np.all(np.diff(areas) >= 0)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_priors_are_medians_or_better(seed):
    shapes = random_shapes(80, seed)
    a = kmeans_anchors(shapes, B=4, seed=seed)
    assign = shape_iou(shapes, a.priors).argmax(axis=1)
    for k, median in enumerate(cluster_medians(shapes, a)):
        if median is None:
            continue
        members = shapes[assign == k]
        if np.array_equal(median, a.priors[k]):
            continue
        pair = shape_iou(members, np.stack([a.priors[k], median]))
        assert pair[:, 0].sum() > pair[:, 1].sum()


def test_deterministic_given_seed():
    shapes = random_shapes(300, 4)
    a, b = kmeans_anchors(shapes, 5, seed=9), kmeans_anchors(shapes, 5, seed=9)
    assert np.array_equal(a.priors, b.priors) and a.history == b.history


def test_bad_inputs():
    with pytest.raises(ValidationError):
        kmeans_anchors(np.array([[0.1, 0.1]]), B=2)
    with pytest.raises(ValidationError):
        kmeans_anchors(np.array([[0.1, 0.0], [0.2, 0.2]]), B=1)
    with pytest.raises(ValidationError):
        AnchorSet(np.array([[1.5, 0.2]]))


def test_file_roundtrip(tmp_path):
    a = kmeans_anchors(random_shapes(200, 1), 5, seed=0)
    write_anchors(tmp_path / "a.txt", a)
    back = read_anchors(tmp_path / "a.txt")
    assert np.abs(back.priors - a.priors).max() <= 5e-7
    (tmp_path / "bad.txt").write_text("0.1 0.2\n0.1\n")
    with pytest.raises(ParseError, match="line 2"):
        read_anchors(tmp_path / "bad.txt")
