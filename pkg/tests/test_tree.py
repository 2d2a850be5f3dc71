import json
import math

import numpy as np
import pytest

from dirfmm import tree


def circle_points(K, ppw=20.0):
    radius = 0.45 * K
    n = int(round(2 * np.pi * radius * ppw))
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return radius * np.column_stack([np.cos(t), np.sin(t)])


def brute_distance(a, b):
    # independent of tree.box_distance: work from corner bounds
    gaps = []
    for ax in range(2):
        lo_a, hi_a = a.center[ax] - a.width / 2, a.center[ax] + a.width / 2
        lo_b, hi_b = b.center[ax] - b.width / 2, b.center[ax] + b.width / 2
        gaps.append(max(0.0, lo_a - hi_b, lo_b - hi_a))
    return math.hypot(*gaps)


def subtree_point_count(box):
    if box.is_leaf:
        return 0 if box.point_indices is None else box.point_indices.size
    return sum(subtree_point_count(c) for c in box.children)


class TestConfig:
    @pytest.mark.parametrize("K", [3.0, 2.0, 0.5, 12.0, -4.0])
    def test_bad_K(self, K):
        with pytest.raises(ValueError):
            tree.TreeConfig(K=K)

    def test_bad_np_eps(self):
        with pytest.raises(ValueError):
            tree.TreeConfig(K=16.0, Np=0)
        with pytest.raises(ValueError):
            tree.TreeConfig(K=16.0, eps=0.0)

    @pytest.mark.parametrize("K", [4.0, 8.0, 128.0, 512.0])
    def test_good_K(self, K):
        assert tree.TreeConfig(K=K).K == K


class TestBuild:
    def test_single_point_chain(self):
        root = tree.build_tree(np.array([[0.3, 0.3]]), tree.TreeConfig(K=4.0))
        widths = [level[0].width for level in tree.levels(root)]
        assert widths == [4.0, 2.0, 1.0, 0.5]
        assert all(len(level) == 1 for level in tree.levels(root))
        leaf = tree.leaves(root)[0]
        assert leaf.regime == "low" and leaf.width == 0.5
        assert leaf.point_indices.tolist() == [0]

    def test_points_in_one_unit_square(self):
        rng = np.random.default_rng(42)
        pts = rng.uniform(0.0, 1.0, (300, 2)) + np.array([2.0, 3.0])
        root = tree.build_tree(pts, tree.TreeConfig(K=16.0))
        for leaf in tree.leaves(root):
            assert leaf.regime == "low"
            assert leaf.point_indices.size <= 50
        # a width-1 box holds all 300 points
        unit = [
            b
            for b in tree.iter_boxes(root)
            if b.width == 1.0 and subtree_point_count(b) == 300
        ]
        assert len(unit) == 1

    def test_partition_is_exact(self):
        pts = circle_points(16.0)
        root = tree.build_tree(pts, tree.TreeConfig(K=16.0))
        got = np.concatenate([l.point_indices for l in tree.leaves(root)])
        assert np.array_equal(np.sort(got), np.arange(len(pts)))

    def test_outside_point_rejected_with_index(self):
        pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [8.1, 0.0]])
        with pytest.raises(ValueError, match="point 3"):
            tree.build_tree(pts, tree.TreeConfig(K=16.0))

    def test_high_boxes_always_subdivided(self):
        root = tree.build_tree(circle_points(16.0), tree.TreeConfig(K=16.0))
        for b in tree.iter_boxes(root):
            if b.regime == "high":
                assert b.children and b.point_indices is None

    def test_low_subdivision_iff_overfull(self):
        root = tree.build_tree(circle_points(16.0), tree.TreeConfig(K=16.0))
        for b in tree.iter_boxes(root):
            if b.regime == "low":
                if b.is_leaf:
                    assert b.point_indices.size <= 50
                else:
                    assert subtree_point_count(b) > 50

    def test_deterministic_rebuild(self):
        pts = circle_points(16.0)
        r1 = tree.build_tree(pts, tree.TreeConfig(K=16.0))
        r2 = tree.build_tree(pts, tree.TreeConfig(K=16.0))
        b1, b2 = list(tree.iter_boxes(r1)), list(tree.iter_boxes(r2))
        assert len(b1) == len(b2)
        for a, b in zip(b1, b2):
            assert a.center == b.center and a.index == b.index
            assert [n.index for n in a.near_list] == [n.index for n in b.near_list]
            assert [e.box.index for e in a.interaction_list] == [
                e.box.index for e in b.interaction_list
            ]


@pytest.fixture(scope="module")
def k16():
    pts = circle_points(16.0)
    return tree.build_tree(pts, tree.TreeConfig(K=16.0))


class TestLists:
    def test_near_and_interaction_vs_bruteforce(self, k16):
        for level in tree.levels(k16):
            w = level[0].width
            thresh = w * w if w >= 1.0 else 0.0
            for b in level:
                near = {a.index for a in level if brute_distance(a, b) <= thresh}
                assert {a.index for a in b.near_list} == near
                if b.parent is None:
                    continue
                parent_near = {
                    c.index for pn in b.parent.near_list for c in pn.children
                }
                got = {e.box.index for e in b.interaction_list}
                assert got == parent_near - near

    def test_interaction_symmetry(self, k16):
        pairs = set()
        for b in tree.iter_boxes(k16):
            for e in b.interaction_list:
                pairs.add((b.index, e.box.index))
        assert pairs == {(j, i) for (i, j) in pairs}

    def test_high_entries_have_valid_wedges(self, k16):
        for b in tree.iter_boxes(k16):
            if b.regime != "high":
                continue
            w = b.width
            count = tree.direction_count(w)
            angle = 2.0 * np.pi / count
            for e in b.interaction_list:
                assert tree.box_distance(b, e.box) > w * w
                assert e.dir_tgt == tree.wedge_of(b, e.box)
                assert e.dir_src == tree.wedge_of(e.box, b)
                # center of the partner lies in the claimed wedge
                theta = math.atan2(
                    e.box.center[1] - b.center[1], e.box.center[0] - b.center[0]
                ) % (2.0 * np.pi)
                j = e.dir_tgt
                assert j * angle - 1e-12 <= theta <= (j + 1) * angle + 1e-12

    def test_low_entries_have_no_wedges(self, k16):
        seen = 0
        for b in tree.iter_boxes(k16):
            if b.regime == "low":
                for e in b.interaction_list:
                    assert e.dir_src is None and e.dir_tgt is None
                    seen += 1
        assert seen > 0

    def test_unit_boxes_are_coupled(self, k16):
        # every populated w=1 box sees at least one other box
        for b in tree.iter_boxes(k16):
            if b.width == 1.0:
                others = [a for a in b.near_list if a is not b]
                assert others or b.interaction_list

    def test_interaction_empty_above_sqrtK(self):
        root = tree.build_tree(circle_points(64.0), tree.TreeConfig(K=64.0))
        wmax = tree.max_directional_width(64.0)
        assert wmax == 8.0
        for b in tree.iter_boxes(root):
            if b.width > wmax:
                assert b.interaction_list == []

    def test_self_in_near_list(self, k16):
        for b in tree.iter_boxes(k16):
            assert b in b.near_list


class TestDirections:
    def test_counts_and_angles(self):
        sets = tree.build_direction_sets(16.0)
        assert sorted(sets) == [1.0, 2.0, 4.0]
        for w, ds in sets.items():
            assert ds.count == 16 * int(w)
            assert ds.count * ds.wedge_angle == pytest.approx(2.0 * np.pi, rel=1e-15)
            assert ds.wedge_angle <= 1.0 / (math.sqrt(2.0) * w)
            assert np.allclose(np.linalg.norm(ds.directions, axis=1), 1.0)
            th = (np.arange(ds.count) + 0.5) * ds.wedge_angle
            assert np.allclose(ds.directions[:, 0], np.cos(th))

    def test_parent_map_refinement(self):
        sets = tree.build_direction_sets(64.0)
        assert sets[1.0].parent_map is None
        for w in (2.0, 4.0, 8.0):
            pm = sets[w].parent_map
            assert pm is not None and len(pm) == sets[w].count
            assert np.array_equal(pm, np.arange(sets[w].count) // 2)
            counts = np.bincount(pm, minlength=sets[w / 2].count)
            assert np.all(counts == 2)  # exact 2-to-1 refinement

    def test_parent_containment_by_ray_sampling(self):
        sets = tree.build_direction_sets(16.0)
        for w in (2.0, 4.0):
            fine, coarse = sets[w], sets[w / 2.0]
            for j in range(fine.count):
                jc = int(fine.parent_map[j])
                # 100 rays through the wedge interior
                th = (j + (np.arange(100) + 0.5) / 100.0) * fine.wedge_angle
                assert np.all(np.floor(th / coarse.wedge_angle).astype(int) == jc)
                # boundary angles nest exactly in exact arithmetic
                assert j * fine.wedge_angle >= jc * coarse.wedge_angle
                assert (j + 1) * fine.wedge_angle <= (jc + 1) * coarse.wedge_angle

    def test_max_directional_width(self):
        assert tree.max_directional_width(16.0) == 4.0
        assert tree.max_directional_width(64.0) == 8.0
        assert tree.max_directional_width(128.0) == 8.0
        assert tree.max_directional_width(256.0) == 16.0
        assert tree.max_directional_width(512.0) == 16.0


def _box(cx, cy, w):
    return tree.QuadBox(level=0, center=(cx, cy), width=w)


class TestWedgeOf:
    def test_angle_zero(self):
        assert tree.wedge_of(_box(0, 0, 1.0), _box(3.0, 0.0, 1.0)) == 0

    def test_boundary_tie_breaks_to_lower_index(self):
        # pi/2 and pi are exact wedge boundaries of the 16-wedge set
        assert tree.wedge_of(_box(0, 0, 1.0), _box(0.0, 3.0, 1.0)) == 3
        assert tree.wedge_of(_box(0, 0, 1.0), _box(-3.0, 0.0, 1.0)) == 7

    def test_generic_angles(self):
        angle = 2.0 * np.pi / 16
        for j in range(16):
            th = (j + 0.37) * angle
            other = _box(5.0 * math.cos(th), 5.0 * math.sin(th), 1.0)
            assert tree.wedge_of(_box(0, 0, 1.0), other) == j

    def test_near_pair_rejected(self):
        with pytest.raises(ValueError, match="near"):
            tree.wedge_of(_box(0, 0, 2.0), _box(4.0, 0.0, 2.0))  # dist 2 < w^2

    def test_low_regime_rejected(self):
        with pytest.raises(ValueError, match="high"):
            tree.wedge_of(_box(0, 0, 0.5), _box(3.0, 0.0, 0.5))


class TestStats:
    def test_stats_shape_and_json(self):
        root = tree.build_tree(circle_points(16.0), tree.TreeConfig(K=16.0))
        stats = tree.tree_stats(root)
        json.dumps(stats)
        assert stats["levels"][0]["width"] == 16.0
        assert stats["total_boxes"] == sum(d["boxes"] for d in stats["levels"])
        assert stats["levels"][-1]["points_in_leaves"] > 0
        regimes = [d["regime"] for d in stats["levels"]]
        assert regimes == sorted(regimes, key=lambda r: r != "high")
