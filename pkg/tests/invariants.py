"""Structural checks on assignment plans shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

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
    switch_update,
)

XY = AttributeGroup.XY


def random_quality(seed):
    rng = np.random.default_rng(seed)
    cache = {}

    def q(g, pool):
        if g not in cache:
            cache[g] = {p: float(v) for p, v in zip(pool, rng.random(len(pool)))}
        return [cache[g][p] for p in pool]

    return q


def check_plan_basics(plan, frame, grid):
    for grp in GROUPS:
        gs = plan.groups[grp]
        assert np.all((gs.i >= 0) & (gs.i < grid.H) & (gs.j >= 0) & (gs.j < grid.W))
        for g in np.unique(gs.gt):
            pix = gs.for_gt(int(g))
            assert len(pix) == len(set(pix))
        assert np.all((gs.weight > 0) & (gs.weight <= 1))


def check_decoupled(plan, frame, grid, dar_groups, count):
    """Non-enabled groups: one center sample per GT.  Enabled: min(count, pool) samples, long-range offsets."""
    check_plan_basics(plan, frame, grid)
    for grp in GROUPS:
        gs = plan.groups[grp]
        for g, c in enumerate(plan.centers):
            if c is None:
                continue
            pix = gs.for_gt(g)
            if grp not in dar_groups:
                assert pix == [c], (grp, g, pix, c)
                continue
            pool = candidate_pixels(frame.gts[g].box, grid)
            assert len(pix) == min(count, len(pool))
            assert set(pix) <= set(pool)
    xy = plan.groups[XY]
    for k, (g, p) in enumerate(zip(xy.gt, xy.pixels())):
        if p != plan.centers[g]:
            assert np.max(np.abs(xy.target[k])) > 0.5
        else:
            assert np.max(np.abs(xy.target[k])) <= 0.5


def check_frame(frame, grid, seed, n=4, dar_groups=frozenset({XY})):
    base = assign_baseline(frame, grid)
    check_decoupled(base, frame, grid, frozenset(), 1)
    assert assign_multipos(frame, grid, radius=0).equals(base)
    static = assign_dar_static(frame, grid, dar_groups, n)
    check_decoupled(static, frame, grid, dar_groups, n)
    q = random_quality(seed)
    dyn = assign_dar_dynamic(frame, grid, dar_groups, n, q)
    check_decoupled(dyn, frame, grid, dar_groups, n)
    # the switch keeps the sample count: static n and dynamic k=n agree per GT
    assert static.samples_per_gt(XY) == dyn.samples_per_gt(XY)
    st = SwitchState(k=n)
    assert assign_dar_switch(frame, grid, dar_groups, st).equals(static)
    assert assign_dar_switch(frame, grid, dar_groups, SwitchState(phase=Phase.DYNAMIC, k=n), q).equals(dyn)


def check_switch_monotone(measurements, iou_th=0.6, decay=0.9):
    st = SwitchState(iou_th=iou_th, ema_decay=decay)
    phases = []
    for m in measurements:
        st = switch_update(st, m)
        phases.append(st.phase)
    seq = "".join("S" if p is Phase.STATIC else "D" for p in phases)
    assert "DS" not in seq
    return seq
