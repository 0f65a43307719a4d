import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevhead.assign import (
    GROUPS,
    AttributeGroup,
    Phase,
    SwitchState,
    assign_baseline,
    assign_dar_dynamic,
    assign_dar_static,
    assign_dar_switch,
    assign_multipos,
    candidate_pixels,
    center_pixel,
    decode_attributes,
    encode_box_targets,
    encode_center_offset,
    gaussian_radius,
    parse_groups,
    point_richness,
    switch_update,
)
from bevhead.geometry import Box7
from bevhead.scene import BevGrid, Frame, GroundTruth, SceneConfig, generate_frames

from invariants import check_frame, check_switch_monotone

XY, Z, LWH, THETA = AttributeGroup.XY, AttributeGroup.Z, AttributeGroup.LWH, AttributeGroup.THETA
G1 = BevGrid(cell=1.0, H=16, W=16)


def gt(x=6.2, y=6.7, l=4.0, w=2.0, theta=0.0, cls=0):
    return GroundTruth(cls, Box7(x, y, 0.8, l, w, 1.6, theta))


# -- encoding


def test_center_pixel_examples():
    assert center_pixel(Box7(3.2, 1.5, 0, 1, 1, 1, 0), G1) == (3, 1)
    assert center_pixel(Box7(3.0, 1.5, 0, 1, 1, 1, 0), G1) == (3, 1)
    waymo = BevGrid(origin_x=-75.2, origin_y=-75.2, cell=0.1, H=1504, W=1504)
    assert center_pixel(Box7(10.37, 0.0, 0, 1, 1, 1, 0), waymo)[0] == 855
    assert center_pixel(Box7(-1.0, 1.5, 0, 1, 1, 1, 0), G1) is None


def test_center_offset_examples():
    b = Box7(3.2, 1.5, 0, 1, 1, 1, 0)
    assert encode_center_offset(b, (3, 1), G1)[0] == pytest.approx(-0.3)
    assert encode_center_offset(b, (4, 1), G1)[0] == pytest.approx(-1.3)
    assert encode_center_offset(Box7(3.5, 1.5, 0, 1, 1, 1, 0), (3, 1), G1) == (0.0, 0.0)


def test_box_targets():
    t = encode_box_targets(Box7(3.5, 1.5, 0.2, 1, 1, 1, 0), (3, 1), G1)
    assert np.allclose(t[LWH], 0.0)
    assert np.allclose(t[THETA], [0, 1])
    assert t[Z][0] == 0.2
    t = encode_box_targets(Box7(3.5, 1.5, 0.2, 1, 1, 1, math.pi / 2), (3, 1), G1)
    assert np.allclose(t[THETA], [1, 0])


@given(st.floats(0.5, 15.5), st.floats(0.5, 15.5), st.floats(0.2, 5), st.floats(0.2, 5), st.floats(-3.1, 3.1),
       st.integers(-2, 2), st.integers(-2, 2))
def test_decode_inverts_encode(x, y, l, w, theta, di, dj):
    b = Box7(x, y, 0.3, l, w, 1.2, theta)
    c = center_pixel(b, G1)
    pix = (c[0] + di, c[1] + dj)
    t = encode_box_targets(b, pix, G1)
    back = decode_attributes(t[XY], t[Z], t[LWH], t[THETA], pix, G1)
    assert np.allclose(back.as_array(), b.as_array(), atol=1e-9)


def test_parse_groups():
    assert parse_groups("xy, theta") == {XY, THETA}
    with pytest.raises(ValueError):
        parse_groups("xy,size")


def test_gaussian_radius_positive_and_min_radius():
    assert gaussian_radius(8, 4) > 0
    plan = assign_baseline(Frame(0, [], [gt(l=0.6, w=0.6)]), G1)
    heat = plan.heatmap[0]
    assert heat[plan.centers[0]] == 1.0
    assert np.count_nonzero(heat) == 25


# -- baseline and multipos


def test_baseline_examples():
    p = assign_baseline(Frame(0, [], [gt()]), G1)
    assert all(len(p.groups[g]) == 1 for g in GROUPS)
    p = assign_baseline(Frame(0, []), G1)
    assert all(len(p.groups[g]) == 0 for g in GROUPS) and not p.heatmap.any()
    p = assign_baseline(Frame(0, [], [gt(), gt(x=12.2, y=3.3, l=1.0, w=0.8, cls=1)]), G1)
    assert all(len(p.groups[g]) == 2 for g in GROUPS)


def test_baseline_shared_center_keeps_larger_box():
    small, big = gt(l=1.0, w=1.0, cls=1), gt(x=6.4, l=4.0, w=2.0)
    p = assign_baseline(Frame(0, [], [small, big]), G1)
    assert p.groups[LWH].gt.tolist() == [1]
    assert np.allclose(p.groups[LWH].target[0], np.log([4.0, 2.0, 1.6]))
    assert p.heatmap[0].max() == 1.0 and p.heatmap[1].max() == 1.0


def test_baseline_skips_offgrid():
    p = assign_baseline(Frame(0, [], [gt(x=40.0)]), G1)
    assert p.skipped == 1 and len(p.groups[XY]) == 0


def test_multipos_examples():
    p = assign_multipos(Frame(0, [], [gt(x=6.5, y=6.5, l=5, w=5)]), G1, radius=1)
    assert all(len(p.groups[g]) == 9 for g in GROUPS)
    p = assign_multipos(Frame(0, [], [gt(x=6.5, y=6.5, l=0.8, w=0.8)]), G1, radius=1)
    assert all(len(p.groups[g]) == 1 for g in GROUPS)
    f = Frame(0, [], [gt(), gt(x=12.2, y=3.3, l=1.0, w=0.8, cls=1)])
    assert assign_multipos(f, G1, radius=0).equals(assign_baseline(f, G1))
    with pytest.raises(ValueError):
        assign_multipos(f, G1, radius=-1)


# -- decoupled static


def test_point_richness_examples():
    grid = BevGrid(cell=1.0, H=8, W=8)
    f = Frame(0, [[3.5, 3.5, 0, 0]] * 10)
    assert point_richness(f, gt().box, [(3, 3)], grid).tolist() == [10.0]
    f = Frame(0, [[2.5, 3.5, 0, 0], [4.5, 3.5, 0, 0], [3.5, 2.5, 0, 0], [3.5, 4.5, 0, 0]])
    assert point_richness(f, gt().box, [(3, 3)], grid).tolist() == [2.0]


def test_static_n1_equals_baseline():
    for f in generate_frames(SceneConfig(), 0, 5):
        grid = BevGrid()
        assert assign_dar_static(f, grid, {XY, Z, LWH, THETA}, n=1).equals(assign_baseline(f, grid))


def test_static_decouples_groups():
    f = generate_frames(SceneConfig(), 1, 1)[0]
    p = assign_dar_static(f, BevGrid(), {XY}, n=4)
    for g, c in enumerate(p.centers):
        if c is None:
            continue
        assert 1 <= len(p.groups[XY].for_gt(g)) <= 4
        for grp in (Z, LWH, THETA):
            assert p.groups[grp].for_gt(g) == [c]
    w = p.groups[XY].weight
    assert np.allclose([w[p.groups[XY].gt == g].sum() for g in np.unique(p.groups[XY].gt)], 1.0)


def test_static_tie_break_lexicographic():
    # no points: all candidates tie, the lowest pixels after the center win
    f = Frame(0, [], [gt(x=6.5, y=6.5, l=4, w=4)])
    p = assign_dar_static(f, G1, {XY}, n=3)
    pool = [q for q in candidate_pixels(f.gts[0].box, G1) if q != (6, 6)]
    assert p.groups[XY].for_gt(0) == sorted([(6, 6)] + pool[:2])


def test_static_shortfall_recorded():
    f = Frame(0, [], [gt(x=6.5, y=6.5, l=0.9, w=0.9)])
    p = assign_dar_static(f, G1, {XY}, n=4)
    assert len(p.groups[XY]) == 1 and p.shortfall == 1


def test_static_requires_xy():
    with pytest.raises(ValueError):
        assign_dar_static(Frame(0, [], [gt()]), G1, {THETA}, n=2)


# -- dynamic and switch


def test_dynamic_top_k():
    f = Frame(0, [], [gt(x=6.5, y=6.5, l=4, w=4)])
    pool = candidate_pixels(f.gts[0].box, G1)
    q = {p: 0.1 for p in pool}
    q.update({(6, 6): 0.75, (5, 6): 0.70, (7, 7): 0.65, (4, 4): 0.30})
    p = assign_dar_dynamic(f, G1, {XY}, k=3, sample_quality={0: q})
    assert p.groups[XY].for_gt(0) == sorted([(6, 6), (5, 6), (7, 7)])
    flat = {pp: 0.5 for pp in pool}
    p = assign_dar_dynamic(f, G1, {XY}, k=2, sample_quality={0: flat})
    assert p.groups[XY].for_gt(0) == pool[:2]
    p = assign_dar_dynamic(f, G1, {XY, Z, LWH, THETA}, k=1, sample_quality={0: q})
    assert p.equals(assign_baseline(f, G1))


def test_dynamic_needs_quality():
    with pytest.raises(ValueError):
        assign_dar_dynamic(Frame(0, [], [gt()]), G1)


def test_switch_update_examples():
    s = switch_update(SwitchState(ema_center_iou=0.59, ema_decay=0.9, iou_th=0.6), 0.8)
    assert s.ema_center_iou == pytest.approx(0.611)
    assert s.phase is Phase.DYNAMIC
    s = switch_update(s, 0.0)
    assert s.phase is Phase.DYNAMIC
    assert check_switch_monotone([0.3] * 200) == "S" * 200
    with pytest.raises(ValueError):
        switch_update(SwitchState(), 1.5)


@given(st.lists(st.floats(0, 1), max_size=60), st.floats(0, 1), st.floats(0, 1))
def test_switch_monotone_property(ms, th, decay):
    check_switch_monotone(ms, th, decay)


def test_switch_delegates():
    f = generate_frames(SceneConfig(), 2, 1)[0]
    grid = BevGrid()
    assert assign_dar_switch(f, grid, {XY}, SwitchState(k=4)).equals(assign_dar_static(f, grid, {XY}, 4))
    q = lambda g, pool: [1.0 / (1 + k) for k in range(len(pool))]  # noqa: E731
    assert assign_dar_switch(f, grid, {XY}, SwitchState(phase=Phase.DYNAMIC, k=3), q).equals(
        assign_dar_dynamic(f, grid, {XY}, 3, q)
    )


def test_invariants_on_generated_frames():
    grid = BevGrid()
    for n, f in enumerate(generate_frames(SceneConfig(), 5, 10)):
        check_frame(f, grid, seed=n)
