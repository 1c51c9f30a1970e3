import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridspot.anchors import AnchorSet
from gridspot.errors import ConfigError, ValidationError
from gridspot.geometry import CenterBox, CornerBox, corner_to_center, iou
from gridspot.inference import (Detection, decode, detect_image, detect_tiled, format_detections,
                                lift_box, nms, plan_tiles, read_detections, unlift_box)
from gridspot.network.model import Network, tiny16

FIVE = AnchorSet(np.array([[0.02, 0.03], [0.04, 0.04], [0.06, 0.05], [0.08, 0.07], [0.1, 0.12]]))


def det(x0, y0, x1, y1, score, c=0, W=100, H=100):
    return Detection(c, score, corner_to_center(CornerBox(x0, y0, x1, y1), W, H))


def corners(d, W=100, H=100):
    return d.corners(W, H)


# -- decode -----------------------------------------------------------------------------

def test_decode_cell_center_and_prior_size():
    pred = np.full((26, 26, 5, 6), -1000.0)
    pred[3, 7, 1, :4] = 0.0
    pred[3, 7, 1, 4:] = 1000.0
    (d,) = decode(pred, FIVE, 0.25)
    assert d.box.x == pytest.approx(7.5 / 26) and d.box.y == pytest.approx(3.5 / 26)
    assert d.box.w == pytest.approx(0.04) and d.box.h == pytest.approx(0.04)
    assert d.score == 1.0


def test_decode_suppressed_objectness_gives_nothing():
    pred = np.zeros((26, 26, 5, 6))
    pred[..., 4] = -1000.0
    assert decode(pred, FIVE, 1e-12) == []


def test_decode_threshold_and_shape_check():
    rng = np.random.default_rng(0)
    pred = rng.standard_normal((4, 4, 5, 6))
    low, high = decode(pred, FIVE, 0.1), decode(pred, FIVE, 0.4)
    assert len(high) < len(low)
    assert all(d.score >= 0.4 for d in high)
    with pytest.raises(ValidationError):
        decode(np.zeros((4, 4, 3, 6)), FIVE, 0.5)


# -- nms --------------------------------------------------------------------------------

def test_nms_hand_example():
    a = det(0, 0, 10, 10, 0.9)
    b = det(0, 0, 10, 16, 0.8)          # IoU 100/160 = 0.625
    assert iou(corners(a), corners(b)) == pytest.approx(0.625)
    assert nms([b, a], 0.45) == [a]


def test_nms_keeps_disjoint_and_other_classes():
    a, b = det(0, 0, 10, 10, 0.9), det(50, 50, 60, 60, 0.5)
    c = det(0, 0, 10, 10, 0.7, c=1)
    assert nms([b, c, a], 0.45) == [a, c, b]


def test_nms_tie_order():
    a, b = det(30, 0, 40, 10, 0.5), det(0, 0, 10, 10, 0.5)
    assert nms([a, b], 0.45) == [b, a]


def brute_force_nms(dets, thr):
    """The unique subset S with: d in S iff no earlier same-class member of S overlaps d above thr."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.x, dets[i].box.y))
    rank = {i: r for r, i in enumerate(order)}
    ov = [[iou(corners(a), corners(b)) for b in dets] for a in dets]
    solutions = []
    for bits in itertools.product((False, True), repeat=len(dets)):
        chosen = {i for i, keep in enumerate(bits) if keep}
        ok = all((i in chosen) == (not any(rank[j] < rank[i] and dets[j].class_id == dets[i].class_id
                                            and ov[i][j] > thr for j in chosen))
                 for i in range(len(dets)))
        if ok:
            solutions.append(chosen)
    assert len(solutions) == 1
    return [dets[i] for i in sorted(solutions[0], key=rank.get)]


@st.composite
def detection_sets(draw):
    n = draw(st.integers(0, 10))
    out = []
    for _ in range(n):
        x0, y0 = draw(st.integers(0, 60)), draw(st.integers(0, 60))
        w, h = draw(st.integers(4, 40)), draw(st.integers(4, 40))
        score = draw(st.sampled_from([0.3, 0.5, 0.5, 0.7, 0.9, 0.95]))
        out.append(det(x0, y0, min(x0 + w, 100), min(y0 + h, 100), score, c=draw(st.integers(0, 1))))
    return out


@given(detection_sets(), st.sampled_from([0.3, 0.45, 0.6]))
def test_nms_matches_brute_force_and_is_idempotent(dets, thr):
    kept = nms(dets, thr)
    assert kept == brute_force_nms(dets, thr)
    assert nms(kept, thr) == kept
    assert all(any(k is d for d in dets) for k in kept)


def test_nms_rejects_nan():
    d = Detection(0, 0.5, CenterBox(0.5, 0.5, 0.1, 0.1))
    object.__setattr__(d, "score", float("nan"))
    with pytest.raises(ValidationError):
        nms([d])


# -- tiling -----------------------------------------------------------------------------

def test_plan_examples():
    p = plan_tiles(1000, 1000, 416, 96)
    assert (p.xs, p.ys, len(p)) == ((0, 320, 584), (0, 320, 584), 9)
    assert plan_tiles(416, 416, 416, 96).offsets == [(0, 0)]
    p = plan_tiles(417, 416, 416, 96)
    assert p.offsets == [(0, 0), (1, 0)]
    assert plan_tiles(200, 300, 416, 64).offsets == [(0, 0)]


def test_plan_rejects_bad_overlap():
    for overlap in (416, 500, -1):
        with pytest.raises(ConfigError):
            plan_tiles(1000, 1000, 416, overlap)


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(32, 512), st.floats(0, 0.9))
def test_plan_coverage_and_margin(w, h, tile, frac):
    overlap = int(tile * frac)
    p = plan_tiles(w, h, tile, overlap)
    for offsets, dim in ((p.xs, w), (p.ys, h)):
        assert offsets[0] == 0
        assert all(o + min(tile, dim) <= dim for o in offsets)
        assert all(b - a <= tile - overlap for a, b in zip(offsets, offsets[1:]))
        assert offsets[-1] + tile >= dim
        # any point at least overlap/2 from the border sits overlap/2 inside some tile
        for q in np.linspace(overlap / 2, dim - overlap / 2, 37) if dim > overlap else []:
            assert any(q - o >= overlap / 2 - 1e-9 and min(o + tile, dim) - q >= overlap / 2 - 1e-9
                       for o in offsets)


@given(st.integers(417, 3000), st.integers(417, 3000), st.integers(0, 200))
def test_owned_regions_partition_the_image(w, h, overlap):
    p = plan_tiles(w, h, 416, overlap)
    rng = np.random.default_rng(w * h + overlap)
    for x, y in rng.uniform(0, [w, h], (50, 2)):
        owners = []
        for o in p.offsets:
            x0, y0, x1, y1 = p.owned_region(*o)
            if x0 <= x < x1 and y0 <= y < y1:
                owners.append(o)
                # owned points are inside the tile's window
                wx0, wy0, wx1, wy1 = p.window(*o)
                assert wx0 <= x <= wx1 and wy0 <= y <= wy1
        assert len(owners) == 1


@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.1), st.floats(0.01, 0.1),
       st.integers(0, 500), st.integers(0, 500))
def test_lift_unlift_identity(x, y, w, h, ox, oy):
    box = CenterBox(x, y, w, h)
    lifted = lift_box(box, (ox, oy), 416, 416, 1000, 1000)
    back = unlift_box(lifted, (ox, oy), 416, 416, 1000, 1000)
    assert np.abs(back.as_array() - box.as_array()).max() < 1e-9


# -- end to end with an untrained network ----------------------------------------------------

@pytest.fixture(scope="module")
def small_net():
    return Network(tiny16(64), FIVE, seed=3, dtype=np.float32)


CONF = 0.2      # an untrained head scores around sigma(0)


def test_single_tile_equals_whole_image(small_net):
    px = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
    whole = detect_image(small_net, px, CONF, 0.45)
    tiled = detect_tiled(small_net, px, plan_tiles(64, 64, 64, 16), CONF, 0.45)
    assert whole and whole == tiled


def test_blank_image_with_silent_head(small_net):
    net = small_net.copy()
    head = net.layers[-1]
    head.params["bias"] = head.params["bias"].copy()
    head.params["bias"].reshape(5, 6)[:, 4] = -50.0
    head.params["weight"] = np.zeros_like(head.params["weight"])
    blank = np.zeros((3, 150, 130), np.float32)
    assert detect_tiled(net, blank, plan_tiles(130, 150, 64, 16)) == []


def test_tiled_threads_match_serial(small_net):
    px = np.random.default_rng(1).random((3, 100, 120)).astype(np.float32)
    plan = plan_tiles(120, 100, 64, 16)
    assert detect_tiled(small_net, px, plan, CONF, threads=1) == detect_tiled(small_net, px, plan, CONF, threads=3)


def test_tiled_boxes_lie_in_source_image(small_net):
    px = np.random.default_rng(2).random((3, 100, 120)).astype(np.float32)
    dets = detect_tiled(small_net, px, plan_tiles(120, 100, 64, 16), CONF, ownership=False)
    assert dets
    for d in dets:
        c = d.corners(120, 100)
        assert 0 <= c.x_min < c.x_max <= 120 + 1e-9 and 0 <= c.y_min < c.y_max <= 100 + 1e-9


def test_plan_must_match_image(small_net):
    with pytest.raises(ConfigError):
        detect_tiled(small_net, np.zeros((3, 64, 64), np.float32), plan_tiles(100, 100, 64, 16))


class BlobNet:
    """Stands in for a perfect detector: every bright blob becomes one anchor-0 prediction."""

    def __init__(self, input_size=416, threshold=0.74):
        self.input_size, self.anchors, self.threshold = input_size, FIVE, threshold

    def predict(self, batch):
        s = self.input_size // 16
        out = np.full((len(batch), s, s, 5, 6), -30.0)
        for n, img in enumerate(batch):
            for x0, y0, x1, y1 in blobs(img.min(axis=0) > self.threshold):
                cx, cy = (x0 + x1) / 2 / self.input_size * s, (y0 + y1) / 2 / self.input_size * s
                j, i = int(cx), int(cy)
                fx, fy = np.clip([cx - j, cy - i], 1e-6, 1 - 1e-6)
                pw, ph = FIVE.priors[0]
                out[n, i, j, 0] = [np.log(fx / (1 - fx)), np.log(fy / (1 - fy)),
                                   np.log((x1 - x0) / self.input_size / pw),
                                   np.log((y1 - y0) / self.input_size / ph), 30.0, 30.0]
        return out


def blobs(mask):
    """Bounding boxes (x0, y0, x1, y1) of the 8-connected components of ``mask``."""
    seen = np.zeros_like(mask)
    h, w = mask.shape
    boxes = []
    for y, x in np.argwhere(mask):
        if seen[y, x]:
            continue
        seen[y, x] = True
        stack, ys, xs = [(y, x)], [], []
        while stack:
            cy, cx = stack.pop()
            ys.append(cy)
            xs.append(cx)
            for ny in range(max(cy - 1, 0), min(cy + 2, h)):
                for nx in range(max(cx - 1, 0), min(cx + 2, w)):
                    if mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
        boxes.append((min(xs), min(ys), max(xs) + 1, max(ys) + 1))
    return boxes


def test_tiled_scene_one_detection_per_object():
    from gridspot.synth import SceneSpec, generate_synthetic_scene
    scene = generate_synthetic_scene(SceneSpec(1000, 1000), 12, count=40)
    plan = plan_tiles(1000, 1000, 416, 96)
    dets = detect_tiled(BlobNet(), scene.pixels, plan)
    assert len(dets) == 40
    for b in scene.corner_boxes:
        assert max(iou(d.corners(1000, 1000), b) for d in dets) >= 0.9
    # objects that straddle a tile edge show up truncated in that tile; NMS alone keeps some of them
    assert len(detect_tiled(BlobNet(), scene.pixels, plan, ownership=False)) > 40


def test_detection_file_roundtrip(tmp_path):
    dets = [det(10, 20, 30, 45, 0.875), det(0, 0, 5, 5, 0.25)]
    text = format_detections("scene.png", dets, 100, 100, ["aircraft"])
    assert text.splitlines()[0] == "scene.png aircraft 0.875000 10.00 20.00 30.00 45.00"
    path = tmp_path / "d.txt"
    path.write_text(text)
    recs = read_detections(path)
    assert [r.score for r in recs] == [0.875, 0.25]
    assert recs[0].box == CornerBox(10, 20, 30, 45)
    path.write_text("scene.png aircraft 0.5 1 2 3\n")
    with pytest.raises(ValidationError, match="line 1"):
        read_detections(path)


def test_detection_score_range():
    with pytest.raises(ValidationError):
        Detection(0, 1.5, CenterBox(0.5, 0.5, 0.1, 0.1))
