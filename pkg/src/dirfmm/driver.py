"""Fast N-body evaluation of u_i = sum_{j != i} g(x_i, x_j) q_j.

`evaluate` runs the five-phase sweep over a quadtree: build the tree, merge
outgoing data upward through the low regime, build directional outgoing
expansions upward through the high regime, translate and push incoming data
downward through the high regime (per width: every M2L, then every L2L), and
finish downward through the low regime with delivery at the leaves plus the
direct near field.  `direct_evaluate` is the exact reference summation,
`estimate_error` the sampled relative deviation between the two, and
`benchmark` the scaling harness over a family of domain sizes.

Accumulation discipline: every incoming slot and every potential row is
written by exactly one task, so results are bit-identical for any `threads`
setting; threads only split the per-phase box loops.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import translate, tree
from .kernel import kernel_matrix
from .lowrank import RepTable, build_rep_table
from .translate import DataStore

__all__ = [
    "NBodyProblem",
    "NBodyResult",
    "evaluate",
    "direct_evaluate",
    "estimate_error",
    "benchmark",
    "format_benchmark",
]

PHASES = ("tree", "up_low", "up_high", "down_high", "down_low", "near")


@dataclass(frozen=True)
class NBodyProblem:
    """N point charges in [-K/2, K/2]^2 with a target accuracy.

    Points must be pairwise distinct: the kernel is singular at zero
    distance, and the near-field diagonal skip must only ever drop true
    self-pairs.  `seed` names the problem's own random stream (sampling in
    `estimate_error` when no generator is passed).
    """

    points: np.ndarray
    charges: np.ndarray
    K: float
    eps: float
    seed: int = 0

    def __post_init__(self) -> None:
        tree.TreeConfig(self.K, eps=self.eps)  # validates K and eps
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        q = np.ascontiguousarray(self.charges, dtype=np.complex128)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must have shape (N, 2)")
        if q.shape != (pts.shape[0],):
            raise ValueError(
                f"need one charge per point, got {q.shape} for {pts.shape[0]} points"
            )
        if pts.shape[0]:
            half = self.K / 2.0
            bad = np.nonzero(~np.all(np.abs(pts) <= half, axis=1))[0]
            if bad.size:
                raise ValueError(
                    f"point {bad[0]} lies outside [-{half}, {half}]^2"
                )
            if np.unique(pts, axis=0).shape[0] != pts.shape[0]:
                raise ValueError("points must be pairwise distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "charges", q)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class NBodyResult:
    potentials: np.ndarray  # (N,) complex128, aligned with problem.points
    timings: dict  # seconds per phase, plus "total"
    stats: dict  # tree shape, rep ranks, N


def _check_reps(problem: NBodyProblem, reps: RepTable) -> None:
    if reps.K != problem.K or reps.eps != problem.eps:
        raise ValueError(
            f"rep table was built for (K={reps.K}, eps={reps.eps}) but the "
            f"problem has (K={problem.K}, eps={problem.eps})"
        )
    if reps.profile != "production":
        raise ValueError(
            f"evaluation needs a production-profile rep table, got {reps.profile!r}"
        )


def _nonempty(box: tree.QuadBox) -> bool:
    return not box.is_leaf or (
        box.point_indices is not None and box.point_indices.size > 0
    )


def _descendant_leaves(box: tree.QuadBox) -> list[tree.QuadBox]:
    if box.is_leaf:
        return [box]
    out: list[tree.QuadBox] = []
    for c in box.children:
        out.extend(_descendant_leaves(c))
    return out


def _near_pairs(root: tree.QuadBox) -> list[tuple[tree.QuadBox, list[tree.QuadBox]]]:
    """Directed near-field work: (target leaf, ordered source leaves).

    Same-width touching leaves come straight from the near lists.  When a
    near neighbour is subdivided instead, interaction lists (which only pair
    equal widths) never separate this leaf from the neighbour's descendants,
    so every descendant leaf is paired directly -- in both directions, since
    the deeper leaf's own near list cannot see a coarser box.
    """
    srcs: dict[int, list[tree.QuadBox]] = defaultdict(list)
    by_index: dict[int, tree.QuadBox] = {}
    for leaf in tree.leaves(root):
        if not _nonempty(leaf):
            continue
        by_index[leaf.index] = leaf
        for nb in leaf.near_list:
            if nb.is_leaf:
                srcs[leaf.index].append(nb)
            else:
                for deep in _descendant_leaves(nb):
                    srcs[leaf.index].append(deep)
                    srcs[deep.index].append(leaf)
                    by_index[deep.index] = deep
    return [(by_index[i], srcs[i]) for i in sorted(srcs)]


def _needed_wedges(
    by_width: dict[float, list[tree.QuadBox]], high_dir: list[float]
) -> dict[int, list[int]]:
    """Outgoing wedges that are actually consumed, per box index.

    Interaction entries demand the source wedge they translate from; a
    parent building wedge `ell` reads every child at wedge `ell // 2`.
    Propagating demand from the top directional width down skips the many
    wedges no translation ever touches.
    """
    needed: dict[int, set[int]] = defaultdict(set)
    for w in high_dir:
        for b in by_width[w]:
            for entry in b.interaction_list:
                needed[entry.box.index].add(entry.dir_src)
    for w in reversed(high_dir):
        if w <= 1.0:
            continue  # children are low-regime, single non-directional slot
        for b in by_width[w]:
            cells = {ell // 2 for ell in needed[b.index]}
            for c in b.children:
                needed[c.index].update(cells)
    return {i: sorted(s) for i, s in needed.items()}


class _Sweep:
    """State for one fast evaluation over a built tree."""

    def __init__(self, problem, reps, root, threads, fast):
        self.pts = problem.points
        self.q = problem.charges
        self.reps = reps
        self.root = root
        self.fast = fast
        self.threads = threads
        self.data = DataStore()
        self.pot = np.zeros(problem.n, dtype=np.complex128)

        self.by_width: dict[float, list[tree.QuadBox]] = defaultdict(list)
        for b in tree.iter_boxes(root):
            self.by_width[b.width].append(b)
        wmax = tree.max_directional_width(problem.K)
        self.low_widths = sorted(w for w in self.by_width if w < 1.0)
        self.high_dir = sorted(w for w in self.by_width if 1.0 <= w <= wmax)
        self.bases = {
            w: translate.low_freq_basis(w, problem.eps) for w in self.low_widths
        }
        self.needed = _needed_wedges(self.by_width, self.high_dir)

    def _run(self, fn, items, pool) -> None:
        items = list(items)
        if pool is None or len(items) < 2:
            for it in items:
                fn(it)
            return
        nchunk = min(len(items), 4 * self.threads)
        chunks = [items[i::nchunk] for i in range(nchunk)]

        def run_chunk(chunk):
            for it in chunk:
                fn(it)

        list(pool.map(run_chunk, chunks))

    # -- phases ------------------------------------------------------------

    def up_low(self, pool) -> None:
        def do_leaf(leaf):
            translate.leaf_s2m(
                leaf, self.pts, self.q, self.data, self.bases[leaf.width], self.fast
            )

        self._run(do_leaf, (b for b in tree.leaves(self.root) if _nonempty(b)), pool)
        for w in self.low_widths:

            def do_merge(b, w=w):
                translate.m2m_low(
                    b, self.data, self.bases[w], self.bases[w / 2], self.fast
                )

            self._run(do_merge, (b for b in self.by_width[w] if not b.is_leaf), pool)

    def up_high(self, pool) -> None:
        for w in self.high_dir:
            lb = self.bases.get(w / 2)

            def do_box(b, lb=lb):
                for ell in self.needed.get(b.index, ()):
                    translate.m2m_high(
                        b, ell, self.reps, self.data, low_basis=lb, fast=self.fast
                    )

            self._run(do_box, (b for b in self.by_width[w] if _nonempty(b)), pool)

    def down_high(self, pool) -> None:
        for w in reversed(self.high_dir):
            lb = self.bases.get(w / 2)

            def do_m2l(b):
                for entry in b.interaction_list:
                    translate.m2l_high(entry.box, b, self.reps, self.data, self.fast)

            def do_l2l(b, lb=lb):
                for ell in self.data.in_wedges(b):
                    translate.l2l_high(
                        b, ell, self.reps, self.data, low_basis=lb, fast=self.fast
                    )

            self._run(do_m2l, self.by_width[w], pool)
            self._run(do_l2l, self.by_width[w], pool)

    def down_low(self, pool) -> None:
        for w in reversed(self.low_widths):

            def do_m2l(b, w=w):
                for entry in b.interaction_list:
                    translate.m2l_low(entry.box, b, self.data, self.bases[w], self.fast)

            def do_push(b, w=w):
                if not self.data.has_in(b, None):
                    return  # no far field ever reached this subtree
                if b.is_leaf:
                    translate.leaf_l2t(
                        b, self.pts, self.data, self.bases[w], self.pot, self.fast
                    )
                else:
                    translate.l2l_low(
                        b, self.data, self.bases[w], self.bases[w / 2], self.fast
                    )

            self._run(do_m2l, self.by_width[w], pool)
            self._run(do_push, (b for b in self.by_width[w] if _nonempty(b)), pool)

    def near(self, pool) -> None:
        pairs = _near_pairs(self.root)

        def do_target(item):
            target, sources = item
            for src in sources:
                translate.near_field_direct(
                    target, src, self.pts, self.q, self.pot, self.fast
                )

        self._run(do_target, pairs, pool)


def evaluate(
    problem: NBodyProblem,
    reps: RepTable,
    *,
    threads: int = 1,
    fast: bool = False,
) -> NBodyResult:
    """Run the full fast summation; returns potentials, timings, and stats."""
    _check_reps(problem, reps)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    timings = dict.fromkeys(PHASES, 0.0)
    if problem.n == 0:
        timings["total"] = 0.0
        return NBodyResult(
            np.zeros(0, dtype=np.complex128), timings, {"N": 0, "tree": None}
        )

    t_start = time.perf_counter()
    cfg = tree.TreeConfig(problem.K, eps=problem.eps)
    root = tree.build_tree(problem.points, cfg)
    sweep = _Sweep(problem, reps, root, threads, fast)
    timings["tree"] = time.perf_counter() - t_start

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for phase in PHASES[1:]:
            t0 = time.perf_counter()
            getattr(sweep, phase)(pool)
            timings[phase] = time.perf_counter() - t0
    finally:
        if pool is not None:
            pool.shutdown()
    timings["total"] = time.perf_counter() - t_start

    stats = {
        "N": problem.n,
        "tree": tree.tree_stats(root),
        "rep_ranks": {str(w): reps.rank(w) for w in reps.widths},
    }
    return NBodyResult(sweep.pot, timings, stats)


def direct_evaluate(problem: NBodyProblem, targets) -> np.ndarray:
    """Exact sums u_i = sum_{j != i} g(x_i, x_j) q_j at the given indices.

    Each component is reduced with `math.fsum`, so the result is correctly
    rounded and independent of summation order -- the reference the fast
    path is judged against.  The products g*q are formed from separate real
    multiplies and adds (never the fused complex-multiply kernel), so a
    scalar reimplementation of the same sum reproduces every bit.
    """
    idx = np.asarray(targets, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("targets must be a one-dimensional index list")
    n = problem.n
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"target index out of range for {n} points")
    pts, q = problem.points, problem.charges
    qr, qi = q.real.copy(), q.imag.copy()
    out = np.empty(idx.size, dtype=np.complex128)
    for k, t in enumerate(idx):
        g = kernel_matrix(pts[t : t + 1], pts, zero_diagonal=True)[0]
        gr, gi = g.real, g.imag
        re = gr * qr - gi * qi
        im = gr * qi + gi * qr
        out[k] = complex(math.fsum(re.tolist()), math.fsum(im.tolist()))
    return out


def _sampled_error(u_ref: np.ndarray, u_approx: np.ndarray) -> float:
    denom = float(np.sum(np.abs(u_ref) ** 2))
    if denom == 0.0:
        raise ValueError(
            "error estimate undefined: sampled reference potentials are all zero"
        )
    return math.sqrt(float(np.sum(np.abs(u_ref - u_approx) ** 2)) / denom)


def estimate_error(
    problem: NBodyProblem,
    result: NBodyResult,
    sample_size: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Relative l2 deviation sqrt(sum |u - u_a|^2 / sum |u|^2) on a sample.

    The reference u comes from `direct_evaluate` on `sample_size` targets
    drawn without replacement.  Raises if every sampled reference potential
    is zero (the ratio is undefined there).
    """
    n = problem.n
    if not 0 < sample_size <= n:
        raise ValueError(f"sample_size must lie in [1, {n}], got {sample_size}")
    if len(result.potentials) != n:
        raise ValueError("result does not match problem size")
    if rng is None:
        rng = np.random.default_rng(problem.seed)
    idx = np.sort(rng.choice(n, size=sample_size, replace=False))
    u = direct_evaluate(problem, idx)
    return _sampled_error(u, np.asarray(result.potentials)[idx])


# ---------------------------------------------------------------------------
# scaling benchmark

FULL_DIRECT_MAX_K = 512.0


def benchmark(
    geometry,
    Ks,
    eps: float,
    ppw: float = 20.0,
    seed: int = 0,
    *,
    threads: int = 1,
    fast: bool = False,
    full_direct: bool = False,
    sample_size: int = 200,
    reps=None,
) -> dict:
    """Time the fast and direct evaluations over a family of domain sizes.

    `geometry` is a curve name ("circle", "airfoil", "kite") sampled at
    `ppw` points per wavelength, or a precomputed (N, 2) point array (then
    `ppw` is ignored).  Charges are standard complex normal.  T_d is
    extrapolated from `sample_size` direct targets unless `full_direct` is
    set, which times the complete direct sum (refused above K = 512).
    Per-K rows are seeded independently, so a row does not depend on which
    other K values run alongside it.  A prebuilt `reps` table (K and eps
    must match every row) skips table construction and reports T_rep = 0.
    """
    name = geometry if isinstance(geometry, str) else "custom"
    if full_direct and any(float(K) > FULL_DIRECT_MAX_K for K in Ks):
        raise ValueError(
            f"full direct comparison is limited to K <= {FULL_DIRECT_MAX_K}"
        )
    rows = []
    for K in Ks:
        K = float(K)
        rng = np.random.default_rng([seed, int(K)])
        if isinstance(geometry, str):
            from . import bie  # deferred: bie drives evaluate() in turn

            pts = bie.random_curve_points(geometry, K, ppw, rng)
        else:
            pts = np.asarray(geometry, dtype=np.float64)
        n = len(pts)
        q = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        problem = NBodyProblem(pts, q, K, eps, seed=seed)

        if reps is not None:
            if reps.K != K or reps.eps != eps:
                raise ValueError(
                    f"rep table holds K={reps.K:g}, eps={reps.eps:g}; "
                    f"this run needs K={K:g}, eps={eps:g}"
                )
            table, t_rep = reps, 0.0
        else:
            t0 = time.perf_counter()
            table = build_rep_table(K, eps, seed, fast=fast)
            t_rep = time.perf_counter() - t0

        t0 = time.perf_counter()
        result = evaluate(problem, table, threads=threads, fast=fast)
        t_a = time.perf_counter() - t0

        size = min(sample_size, n)
        idx = np.sort(rng.choice(n, size=size, replace=False))
        t0 = time.perf_counter()
        u_sample = direct_evaluate(problem, idx)
        t_sample = time.perf_counter() - t0
        eps_a = _sampled_error(u_sample, result.potentials[idx])

        row = {
            "K": K,
            "N": n,
            "T_rep": t_rep,
            "T_a": t_a,
            "eps_a": eps_a,
            "phase_timings": result.timings,
            "tree_stats": result.stats["tree"],
        }
        if full_direct:
            t0 = time.perf_counter()
            u_full = direct_evaluate(problem, np.arange(n))
            row["T_d"] = time.perf_counter() - t0
            row["T_d_extrapolated"] = False
            row["eps_a_full"] = _sampled_error(u_full, result.potentials)
        else:
            row["T_d"] = t_sample * n / size
            row["T_d_extrapolated"] = True
        row["speedup"] = row["T_d"] / t_a if t_a > 0 else math.inf
        rows.append(row)
    return {
        "geometry": name,
        "eps": eps,
        "ppw": ppw,
        "seed": seed,
        "threads": threads,
        "rows": rows,
    }


def format_benchmark(report: dict) -> str:
    """Human-readable table for a `benchmark` report."""
    lines = [
        f"geometry={report['geometry']}  eps={report['eps']:g}  "
        f"ppw={report['ppw']:g}  seed={report['seed']}",
        f"{'K':>6} {'N':>9} {'T_a [s]':>10} {'T_d [s]':>11} "
        f"{'speedup':>9} {'eps_a':>10}",
    ]
    extrapolated = False
    for row in report["rows"]:
        mark = "*" if row["T_d_extrapolated"] else " "
        extrapolated = extrapolated or row["T_d_extrapolated"]
        lines.append(
            f"{row['K']:>6g} {row['N']:>9d} {row['T_a']:>10.3g} "
            f"{row['T_d']:>10.3g}{mark} {row['speedup']:>9.3g} "
            f"{row['eps_a']:>10.3g}"
        )
    if extrapolated:
        lines.append("* direct time extrapolated from a sampled subset")
    return "\n".join(lines)
