import numpy as np
import pytest

from stad.assignment import PyramidLevel, PyramidSpec, assign_fcos_targets, match_proposals
from stad.geometry import Box, Detection, iou


def random_scene(rng, n_max=4, size=64):
    n = int(rng.integers(1, n_max + 1))
    wh = rng.uniform(2, 40, size=(n, 2))
    xy = rng.uniform(0, 1, size=(n, 2)) * (size - wh)
    return np.concatenate([xy, xy + wh], axis=1)


def test_no_gt_all_negative():
    t = assign_fcos_targets([])
    assert t.num_positive == 0
    assert len(t.actorness) == 16 * 16 + 8 * 8 + 4 * 4


def test_centered_gt_on_p3():
    # location (4*3 + 2, 4*3 + 2) = (14, 14); a 12x12 box centred there has max distance 6
    t = assign_fcos_targets([Box(8, 8, 20, 20)])
    k = 3 * 16 + 3
    assert t.actorness[k] == 1
    assert np.allclose(t.regression[k], 6.0)
    assert t.centerness[k] == 1.0
    assert set(np.flatnonzero(t.actorness)) <= set(range(t.level_slices[0].start, t.level_slices[0].stop))


def test_nested_gts_take_smaller_box():
    # the outer box also owns P4 locations, so the fallback never fires
    outer, inner = Box(2, 2, 30, 30), Box(10, 10, 22, 22)
    t = assign_fcos_targets([outer, inner])
    alone = [assign_fcos_targets([b]).actorness for b in (outer, inner)]
    shared = np.flatnonzero(alone[0] * alone[1])
    assert len(shared) > 0
    assert np.all(t.gt_index[shared] == 1)
    only_outer = np.flatnonzero(alone[0] * (1 - alone[1]))
    assert len(only_outer) > 0 and np.all(t.gt_index[only_outer] == 0)


def test_fully_shadowed_box_keeps_one_location():
    outer, inner = Box(4, 4, 28, 28), Box(10, 10, 22, 22)
    t = assign_fcos_targets([outer, inner])
    assert np.count_nonzero(t.gt_index == 0) >= 1
    assert np.count_nonzero(t.gt_index == 1) >= 1


def test_round_trip_and_coverage():
    rng = np.random.default_rng(0)
    for _ in range(100):
        gts = random_scene(rng)
        t = assign_fcos_targets(gts)
        pos = t.actorness > 0
        dec = t.decode()[pos]
        assert np.abs(dec - gts[t.gt_index[pos]]).max() <= 1e-9
        assert set(t.gt_index[pos]) == set(range(len(gts)))
        assert np.all(t.regression[~pos] == 0)


def test_tiny_gt_falls_back_to_finest_level():
    t = assign_fcos_targets([Box(30.2, 30.2, 30.9, 30.9)])
    k = np.flatnonzero(t.actorness)
    assert len(k) == 1 and k[0] < t.level_slices[0].stop


def test_pyramid_validation():
    with pytest.raises(ValueError):
        PyramidSpec((PyramidLevel("a", 8, (0, 16)), PyramidLevel("b", 4, (16, np.inf))))
    with pytest.raises(ValueError):
        PyramidSpec((PyramidLevel("a", 4, (0, 16)), PyramidLevel("b", 8, (20, np.inf))))


def test_match_identical_and_disjoint():
    gt = [(Box(0, 0, 10, 10), np.array([1, 0, 1]))]
    pos, ign = match_proposals([Detection(Box(0, 0, 10, 10), 0.9), Detection(Box(40, 40, 50, 50), 0.9)], gt)
    assert [p[0] for p in pos] == [0] and np.array_equal(pos[0][1], [1, 0, 1])
    assert ign == {1}


def test_match_prefers_higher_iou():
    # proposal (0,0,10,10); gt1 = (0,0,10,6) -> 60/100; gt2 = (0,0,11,5)-> 50/(100+5)... pick widths for 0.55
    prop = Box(0, 0, 10, 10)
    g1 = Box(0, 0, 10, 6)
    g2 = Box(0, 0, 10, 5.5)
    assert iou(prop, g1) == pytest.approx(0.6)
    assert iou(prop, g2) == pytest.approx(0.55)
    pos, _ = match_proposals([prop], [(g2, np.array([0, 1])), (g1, np.array([1, 0]))])
    assert np.array_equal(pos[0][1], [1, 0])


def test_match_partition_and_threshold():
    rng = np.random.default_rng(1)
    for _ in range(200):
        props = random_scene(rng, 6)
        gts = random_scene(rng, 3)
        labels = rng.integers(0, 2, size=(len(gts), 4))
        pos, ign = match_proposals([Box(*p) for p in props], [(Box(*g), l) for g, l in zip(gts, labels)])
        pos_idx = {p[0] for p in pos}
        assert pos_idx | ign == set(range(len(props))) and not pos_idx & ign
        for i in range(len(props)):
            best = max(iou(Box(*props[i]), Box(*g)) for g in gts)
            assert (i in pos_idx) == (best >= 0.5)
