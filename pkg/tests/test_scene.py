import json
import math

import numpy as np
import pytest

from bevhead.geometry import Box7, iou_bev_matrix
from bevhead.scene import (
    BevGrid,
    Frame,
    FrameFormatError,
    GroundTruth,
    SceneConfig,
    box_point_count,
    expected_point_count,
    generate_frames,
    generate_scene,
    load_frames,
    point_count_map,
    rasterize_features,
    sample_box_points,
    save_frames,
)


@pytest.fixture(scope="module")
def frames():
    return generate_frames(SceneConfig(), seed=3, count=40)


def test_zero_objects_gives_ground_only():
    fr = generate_scene(SceneConfig(min_boxes=0, max_boxes=0), seed=1)
    assert fr.gts == []
    assert len(fr.points) == SceneConfig().n_ground
    assert np.all(np.abs(fr.points[:, 2]) < 1.0)


def test_deterministic():
    cfg = SceneConfig()
    assert generate_scene(cfg, 7, 4) == generate_scene(cfg, 7, 4)
    assert generate_scene(cfg, 7, 4) != generate_scene(cfg, 8, 4)


def test_frames_respect_invariants(frames):
    cfg = SceneConfig()
    for fr in frames:
        assert cfg.min_boxes <= len(fr.gts) <= cfg.max_boxes
        p = fr.points
        assert np.all((p[:, 0] >= 0) & (p[:, 0] < 64) & (p[:, 1] >= 0) & (p[:, 1] < 64))
        assert np.all((fr.classes >= 0) & (fr.classes < cfg.num_classes))
        if len(fr.gts) > 1:
            m = iou_bev_matrix(fr.box_array(), fr.box_array())
            np.fill_diagonal(m, 0.0)
            assert m.max() == 0.0


def test_point_budget_inverse_square():
    cfg = SceneConfig(base_rate=400 * 10**2, min_pts=8, max_pts=400)
    assert expected_point_count(cfg, 10.0) == pytest.approx(400.0)
    assert expected_point_count(cfg, 40.0) == pytest.approx(25.0)
    assert box_point_count(cfg, 40.0) == 25
    assert box_point_count(cfg, 200.0) == 8
    assert box_point_count(cfg, 1.0) == 400


def test_visible_face_gets_more_points():
    rng = np.random.default_rng(0)
    sensor = np.array([0.0, 0.0, 2.0])
    wins = 0
    for _ in range(100):
        r, phi = rng.uniform(8, 40), rng.uniform(0.1, 1.4)
        b = Box7(r * math.cos(phi), r * math.sin(phi), 0.8, rng.uniform(3.5, 5), rng.uniform(1.6, 2.1), 1.6,
                 rng.uniform(-math.pi, math.pi))
        pts = sample_box_points(b, 200, sensor, rng)
        to_sensor = sensor[:2] - np.array([b.x, b.y])
        side = (pts[:, :2] - np.array([b.x, b.y])) @ to_sensor
        wins += int((side > 0).sum() > (side < 0).sum())
    assert wins >= 95


def test_range_falloff_of_median_count():
    cfg = SceneConfig(x_range=(0, 80), y_range=(0, 80), surface_noise=0.0)
    buckets = {0: [], 1: [], 2: []}
    for fr in generate_frames(cfg, seed=2, count=60):
        for g in fr.gts:
            b = g.box
            rng_ = math.hypot(b.x, b.y)
            u = (fr.points[:, 0] - b.x) * math.cos(b.theta) + (fr.points[:, 1] - b.y) * math.sin(b.theta)
            v = -(fr.points[:, 0] - b.x) * math.sin(b.theta) + (fr.points[:, 1] - b.y) * math.cos(b.theta)
            n = int(((np.abs(u) <= b.l / 2 + 1e-9) & (np.abs(v) <= b.w / 2 + 1e-9) & (fr.points[:, 2] > 0.2)).sum())
            buckets[0 if rng_ < 30 else 1 if rng_ < 50 else 2].append(n)
    med = [np.median(buckets[k]) for k in range(3)]
    assert all(len(buckets[k]) > 5 for k in range(3))
    assert med[0] >= med[1] >= med[2]


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(min_boxes=5, max_boxes=2)
    with pytest.raises(ValueError):
        SceneConfig(class_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        BevGrid(cell=0.0)
    with pytest.raises(ValueError):
        BevGrid(H=4)


# -- features


def test_rasterize_empty_frame():
    grid = BevGrid(cell=1.0, H=8, W=8)
    fm = rasterize_features(Frame(0, np.zeros((0, 4))), grid, channels=6)
    assert np.all(fm.data[:5] == 0)
    px, py = grid.pixel_centers()
    assert np.allclose(fm.data[5], np.hypot(px, py) / 50.0)


def test_rasterize_single_and_pair():
    grid = BevGrid(cell=1.0, H=8, W=8)
    fm = rasterize_features(Frame(0, [[2.5, 3.5, 1.0, 0.4]]), grid, channels=6)
    assert fm.data[0, 2, 3] == pytest.approx(0.6931, abs=1e-4)
    assert np.count_nonzero(fm.data[0]) == 1
    fm = rasterize_features(Frame(0, [[2.5, 3.5, 1.0, 0.2], [2.7, 3.1, 3.0, 0.6]]), grid, channels=6)
    assert fm.data[1, 2, 3] == pytest.approx(2.0)
    assert fm.data[2, 2, 3] == pytest.approx(3.0)
    assert fm.data[3, 2, 3] == pytest.approx(0.4)
    assert fm.data[4, 2, 3] == 1.0


def test_rasterize_extra_channels_and_drop_count():
    grid = BevGrid(cell=1.0, H=8, W=8)
    fm = rasterize_features(Frame(0, [[2.5, 3.5, 1.0, 0.4], [50, 50, 0, 0]]), grid, channels=16)
    assert fm.data.shape == (16, 8, 8)
    assert fm.dropped == 1
    assert np.all(np.isfinite(fm.data))
    # channel 6 is the 3x3 mean of channel 0
    assert fm.data[6, 2, 3] == pytest.approx(math.log(2) / 9)
    assert fm.data[6, 3, 4] == pytest.approx(math.log(2) / 9)
    with pytest.raises(ValueError):
        rasterize_features(Frame(0, []), grid, channels=4)


def test_point_count_map():
    grid = BevGrid(cell=1.0, H=8, W=8)
    m = point_count_map(Frame(0, [[0.5, 0.5, 0, 0], [0.6, 0.2, 0, 0], [-1, 0, 0, 0]]), grid)
    assert m[0, 0] == 2 and m.sum() == 2


# -- files


def test_round_trip(tmp_path, frames):
    path = tmp_path / "f.jsonl"
    save_frames(frames[:10], path)
    assert load_frames(path) == frames[:10]


def test_empty_file(tmp_path):
    path = tmp_path / "e.jsonl"
    save_frames([], path)
    assert path.read_bytes() == b""
    assert load_frames(path) == []


def _record(**box):
    b = dict(cls=0, x=1.0, y=1.0, z=0.5, l=2.0, w=1.0, h=1.0, theta=0.0)
    b.update(box)
    return {"frame_id": 17, "points": [[1, 1, 0, 0.5]], "boxes": [b]}


def test_rejects_negative_extent(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(_record()) + "\n" + json.dumps(_record(l=-1)) + "\n")
    with pytest.raises(FrameFormatError) as err:
        load_frames(path)
    msg = str(err.value)
    assert "'l'" in msg and "17" in msg and "line 2" in msg


@pytest.mark.parametrize(
    "line, needle",
    [
        ("{not json", "line 1"),
        (json.dumps({"frame_id": 1, "points": []}), "'boxes'"),
        (json.dumps({"frame_id": 1, "points": [[1, 2]], "boxes": []}), "points[0]"),
        (json.dumps(_record(theta="north")), "theta"),
        (json.dumps(_record(cls=5)), "cls"),
    ],
)
def test_malformed_lines(tmp_path, line, needle):
    path = tmp_path / "bad.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(FrameFormatError, match="line 1") as err:
        load_frames(path, num_classes=3)
    assert needle in str(err.value)


def test_frame_equality():
    a = Frame(1, [[0, 0, 0, 0]], [GroundTruth(0, Box7(1, 1, 1, 1, 1, 1, 0))])
    b = Frame(1, [[0, 0, 0, 0]], [GroundTruth(0, Box7(1, 1, 1, 1, 1, 1, 0))])
    assert a == b
    assert a != Frame(2, [[0, 0, 0, 0]], a.gts)
