"""Adaptive quadtree over the size-K computational square.

Boxes of width >= 1 wavelength form the high-frequency regime: every
non-empty one is subdivided (no adaptivity), and its near field is the set
of same-level boxes within box-to-box distance w^2.  Boxes of width < 1
form the low-frequency regime: a box is subdivided only while it holds
more than Np points, and its near field is the touching same-level boxes.
Leaves therefore always sit in the low regime.

The interaction list of B collects the same-level children of B's parent's
near field that are not near B themselves; in the high regime each entry
carries the directional wedge indices under which the pair interacts.
Empty boxes are pruned everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

# Leaves stop splitting below this width even when overfull (pathological
# point clustering); the near-field direct sum still handles such leaves.
MIN_LEAF_WIDTH = 2.0**-30


@dataclass
class TreeConfig:
    """Domain size K (power of two, >= 4), leaf capacity, target accuracy."""

    K: float
    Np: int = 50
    eps: float = 1e-4

    def __post_init__(self) -> None:
        l2 = math.log2(self.K)
        if self.K < 4 or l2 != int(l2):
            raise ValueError(f"K must be a power of two >= 4, got {self.K}")
        if self.Np < 1:
            raise ValueError("Np must be >= 1")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")


class InteractionEntry(NamedTuple):
    box: "QuadBox"
    # wedge of the source box containing this box's center, and vice versa;
    # None in the low regime
    dir_src: int | None
    dir_tgt: int | None


@dataclass(eq=False)
class QuadBox:
    level: int
    center: tuple[float, float]
    width: float
    index: int = -1  # global id, deterministic construction order
    parent: "QuadBox | None" = None
    children: list["QuadBox"] = field(default_factory=list)
    point_indices: np.ndarray | None = None  # leaves only
    near_list: list["QuadBox"] = field(default_factory=list)
    interaction_list: list[InteractionEntry] = field(default_factory=list)

    @property
    def regime(self) -> str:
        return "high" if self.width >= 1.0 else "low"

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __repr__(self) -> str:
        return (
            f"QuadBox(level={self.level}, center={self.center}, "
            f"width={self.width}, regime={self.regime})"
        )


def box_distance(a: QuadBox, b: QuadBox) -> float:
    """Euclidean distance between the two (closed) squares; 0 if touching."""
    dx = abs(a.center[0] - b.center[0]) - 0.5 * (a.width + b.width)
    dy = abs(a.center[1] - b.center[1]) - 0.5 * (a.width + b.width)
    return math.hypot(max(dx, 0.0), max(dy, 0.0))


def _near_threshold(width: float) -> float:
    return width * width if width >= 1.0 else 0.0


def build_tree(points: np.ndarray, cfg: TreeConfig) -> QuadBox:
    """Build the pruned quadtree and populate near/interaction lists.

    ``points`` has shape (N, 2) with all rows inside [-K/2, K/2]^2; a point
    outside raises ValueError naming the first offending row.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must have shape (N, 2)")
    half = cfg.K / 2.0
    bad = np.nonzero(~np.all(np.abs(pts) <= half, axis=1))[0]
    if bad.size:
        raise ValueError(f"point {bad[0]} lies outside [-{half}, {half}]^2")

    root = QuadBox(level=0, center=(0.0, 0.0), width=float(cfg.K))
    counter = [0]

    def assign(box: QuadBox, idx: np.ndarray) -> None:
        box.index = counter[0]
        counter[0] += 1
        w = box.width
        overfull = idx.size > cfg.Np
        if (w >= 1.0 or overfull) and w > MIN_LEAF_WIDTH and idx.size:
            cx, cy = box.center
            x, y = pts[idx, 0], pts[idx, 1]
            right = x >= cx
            upper = y >= cy
            quads = [  # fixed order: SW, SE, NW, NE
                (~right & ~upper, (cx - w / 4, cy - w / 4)),
                (right & ~upper, (cx + w / 4, cy - w / 4)),
                (~right & upper, (cx - w / 4, cy + w / 4)),
                (right & upper, (cx + w / 4, cy + w / 4)),
            ]
            for mask, ctr in quads:
                sub = idx[mask]
                if sub.size:
                    child = QuadBox(
                        level=box.level + 1, center=ctr, width=w / 2, parent=box
                    )
                    box.children.append(child)
                    assign(child, sub)
        else:
            box.point_indices = idx

    assign(root, np.arange(len(pts), dtype=np.intp))
    _build_lists(root, cfg)
    return root


def _build_lists(root: QuadBox, cfg: TreeConfig) -> None:
    root.near_list = [root]
    wmax = max_directional_width(cfg.K)
    for level in list(levels(root))[1:]:
        for b in level:
            w = b.width
            thresh = _near_threshold(w)
            near: list[QuadBox] = []
            inter: list[InteractionEntry] = []
            for pn in b.parent.near_list:
                for c in pn.children:
                    if box_distance(b, c) <= thresh:
                        near.append(c)
                    elif w >= 1.0 and w <= wmax:
                        inter.append(
                            InteractionEntry(c, wedge_of(c, b), wedge_of(b, c))
                        )
                    elif w < 1.0:
                        inter.append(InteractionEntry(c, None, None))
                    else:
                        # widths above sqrt(K) are all mutually near
                        raise AssertionError(
                            f"non-near pair at width {w} > sqrt(K)"
                        )
            near.sort(key=lambda x: x.index)
            inter.sort(key=lambda e: e.box.index)
            b.near_list = near
            b.interaction_list = inter


def levels(root: QuadBox) -> Iterator[list[QuadBox]]:
    """Boxes grouped by level, root first, construction order within a level."""
    current = [root]
    while current:
        yield current
        current = [c for b in current for c in b.children]


def iter_boxes(root: QuadBox) -> Iterator[QuadBox]:
    for level in levels(root):
        yield from level


def leaves(root: QuadBox) -> list[QuadBox]:
    return [b for b in iter_boxes(root) if b.is_leaf]


# ---------------------------------------------------------------------------
# directional wedges


@dataclass(frozen=True)
class DirectionSet:
    """Wedge decomposition of the far field for boxes of one width.

    ``count`` is the smallest power of two with wedge angle 2*pi/count at
    most 1/(sqrt(2)*width); since 2*pi*sqrt(2) is in (8, 16] that is
    exactly 16*width.  Wedge j spans [j*angle, (j+1)*angle) and its center
    direction is at (j + 1/2)*angle.  ``parent_map[j] = j // 2`` sends each
    wedge into the unique containing wedge of the half-width set.
    """

    width: float
    count: int
    wedge_angle: float
    directions: np.ndarray  # (count, 2) unit vectors
    parent_map: np.ndarray | None  # None at width 1


def direction_count(width: float) -> int:
    return 2 ** math.ceil(math.log2(2.0 * math.pi * math.sqrt(2.0) * width))


def _direction_set(width: float) -> DirectionSet:
    count = direction_count(width)
    angle = 2.0 * np.pi / count
    theta = (np.arange(count) + 0.5) * angle
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    pmap = None if width == 1.0 else np.arange(count) // 2
    return DirectionSet(width, count, angle, dirs, pmap)


def max_directional_width(K: float) -> float:
    """Largest box width <= sqrt(K); interaction lists above it are empty."""
    return 2.0 ** math.floor(math.log2(math.sqrt(K)))


def build_direction_sets(K: float) -> dict[float, DirectionSet]:
    """DirectionSet per width in {1, 2, 4, ..., <= sqrt(K)}."""
    TreeConfig(K)  # validate
    out: dict[float, DirectionSet] = {}
    w = 1.0
    while w <= max_directional_width(K):
        out[w] = _direction_set(w)
        w *= 2.0
    return out


def wedge_of(box: QuadBox, other: QuadBox) -> int:
    """Index of the wedge of ``box`` containing ``other``'s center.

    ``other`` must lie outside the near field of ``box`` (both high
    regime).  A center exactly on a wedge boundary goes to the lower of
    the two adjacent indices.
    """
    w = box.width
    if w < 1.0:
        raise ValueError("wedge_of applies to high-regime boxes only")
    if box_distance(box, other) <= w * w:
        raise ValueError("wedge_of called for a near-field pair")
    count = direction_count(w)
    angle = 2.0 * np.pi / count
    theta = math.atan2(
        other.center[1] - box.center[1], other.center[0] - box.center[0]
    )
    if theta < 0.0:
        theta += 2.0 * np.pi
    q = theta / angle
    j = int(q)
    if q == j and j > 0:
        j -= 1
    return min(j, count - 1)


# ---------------------------------------------------------------------------
# statistics


def tree_stats(root: QuadBox) -> dict:
    """Per-level box counts and list sizes, JSON-ready (CLI --stats)."""
    out: list[dict] = []
    for level in levels(root):
        boxes = level
        n_leaf = sum(1 for b in boxes if b.is_leaf)
        n_pts = sum(
            int(b.point_indices.size) for b in boxes if b.point_indices is not None
        )
        isizes = [len(b.interaction_list) for b in boxes]
        nsizes = [len(b.near_list) for b in boxes]
        out.append(
            {
                "level": boxes[0].level,
                "width": boxes[0].width,
                "regime": boxes[0].regime,
                "boxes": len(boxes),
                "leaves": n_leaf,
                "points_in_leaves": n_pts,
                "near_total": int(sum(nsizes)),
                "near_max": int(max(nsizes)),
                "interaction_total": int(sum(isizes)),
                "interaction_max": int(max(isizes)),
            }
        )
    return {
        "levels": out,
        "total_boxes": sum(d["boxes"] for d in out),
        "total_leaves": sum(d["leaves"] for d in out),
    }
