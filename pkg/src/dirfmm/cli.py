"""``dirfmm`` command line front end.

One binary, four subcommands:

* ``rank-table`` -- separation ranks over a grid of accuracies and box widths,
* ``nbody``      -- fast-vs-direct timing and sampled accuracy on one geometry,
* ``scatter``    -- solve the sound-soft scattering problem, dump the density,
* ``field``      -- solve, then sample the scattered field on a square grid.

Options resolve as flags > config file > built-in defaults.  The config file
(``--config``) is flat ``key=value`` text; keys are option names and are
shared across subcommands.  Every run is seeded (fixed default 0, never the
clock), so one configuration on one thread produces byte-identical output,
except for wall-clock timing fields.  Those are rounded to three significant
digits and carry ``"deterministic": false`` in the JSON schemas shipped
under ``dirfmm/schemas/``, which every JSON document emitted here follows.

Exit codes: 0 success, 2 usage error, 3 rep cache required but absent,
4 invalid configuration or input data, 5 iteration ran out before reaching
the tolerance, 6 file I/O failure.
"""

from __future__ import annotations

import functools
import json
import math
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__, bie, driver, lowrank

DEFAULT_SEED = 0

EXIT_MISSING_CACHE = 3
EXIT_INVALID = 4
EXIT_NO_CONVERGENCE = 5
EXIT_IO = 6

SCHEMA_DIR = Path(__file__).parent / "schemas"


def _die(code: int, message: str):
    click.echo(f"dirfmm: error: {message}", err=True)
    sys.exit(code)


def _guard(f):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except bie.NonConvergenceError as exc:
            _die(EXIT_NO_CONVERGENCE, str(exc))
        except ValueError as exc:
            _die(EXIT_INVALID, str(exc))
        except OSError as exc:
            _die(EXIT_IO, str(exc))

    return wrapper


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


# ---------------------------------------------------------------------------
# option plumbing: config file, list-valued flags, shared flag groups


def _read_config(path: str) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment, blank lines are skipped."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        _die(EXIT_IO, f"cannot read config {path}: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise click.UsageError(
                f"{path}:{lineno}: expected key=value, got {raw.strip()!r}"
            )
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_").lower()] = value.strip()
    return values


def _parse_floats(value: str, what: str, count: int | None = None) -> list[float]:
    tokens = [t for t in value.replace(",", " ").split() if t]
    try:
        out = [float(t) for t in tokens]
    except ValueError:
        raise click.BadParameter(
            f"{what} must be comma-separated numbers, got {value!r}"
        ) from None
    if not out:
        raise click.BadParameter(f"{what} is empty")
    if count is not None and len(out) != count:
        raise click.BadParameter(
            f"{what} needs exactly {count} numbers, got {len(out)}"
        )
    return out


def _flag_key(param) -> str:
    """The config-file key for an option: its long flag, dashes as underscores."""
    for opt in param.opts:
        if opt.startswith("--"):
            return opt[2:].replace("-", "_").lower()
    return param.name


def _float_list_cb(ctx, param, value):
    return None if value is None else _parse_floats(value, param.name)


def _pair_cb(ctx, param, value):
    return None if value is None else tuple(_parse_floats(value, param.name, 2))


def _triple_cb(ctx, param, value):
    return None if value is None else tuple(_parse_floats(value, param.name, 3))


def _options(*decls):
    """Bundle click options so shared flag groups stay in one place."""

    def deco(f):
        for decl in reversed(decls):
            f = decl(f)
        return f

    return deco


_seed_opt = click.option(
    "--seed",
    type=int,
    default=DEFAULT_SEED,
    show_default=True,
    help="PRNG seed; the fixed default keeps default runs reproducible",
)
_threads_opt = click.option(
    "--threads", type=int, default=1, show_default=True, help="worker threads"
)
_output_opt = click.option(
    "-o", "--output", default=None, help="write to this path instead of stdout"
)
_cache_opts = _options(
    click.option(
        "--rep-cache",
        default=None,
        metavar="PATH",
        help="load the rep table from this file, or build it and save it there",
    ),
    click.option(
        "--rep-cache-required",
        is_flag=True,
        default=False,
        help="fail (exit 3) instead of building when the cache file is absent",
    ),
)


# ---------------------------------------------------------------------------
# output helpers


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        click.echo(text, nl=False)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        _die(EXIT_IO, f"cannot write {path}: {exc}")


def _sig(x: float) -> float:
    """Timing fields carry 3 significant digits (wall clock, not data)."""
    return float(f"{float(x):.3g}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _dump_json(doc: dict) -> str:
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"


def _num(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _load_or_build_reps(path, required: bool, K: float, eps: float, build):
    """Resolve --rep-cache/--rep-cache-required for a run needing (K, eps)."""
    if path is None:
        if required:
            _die(EXIT_MISSING_CACHE, "--rep-cache-required needs --rep-cache PATH")
        return None
    cache = Path(path)
    if cache.exists():
        table = lowrank.load_rep_table(cache)
        if table.K != K or table.eps != eps:
            raise ValueError(
                f"rep cache {cache} holds K={table.K:g}, eps={table.eps:g}; "
                f"this run needs K={K:g}, eps={eps:g}"
            )
        return table
    if required:
        _die(EXIT_MISSING_CACHE, f"rep cache {cache} does not exist")
    table = build()
    try:
        lowrank.save_rep_table(table, cache)
    except OSError as exc:
        _die(EXIT_IO, f"cannot write rep cache {cache}: {exc}")
    return table


# ---------------------------------------------------------------------------
# the command group


@click.group()
@click.option(
    "--config",
    "config_path",
    default=None,
    metavar="PATH",
    help="flat key=value file supplying defaults for any option; flags win",
)
@click.version_option(
    __version__,
    prog_name="dirfmm",
    message="%(prog)s, version %(version)s (rep cache format "
    + lowrank.CACHE_MAGIC.decode("ascii")
    + ")",
)
@click.pass_context
def main(ctx, config_path):
    """Directional multiscale Helmholtz evaluator and scattering tool."""
    if config_path is None:
        return
    values = _read_config(config_path)
    # config keys are flag spellings ("rep-cache", "eps"), which do not
    # always coincide with click's internal parameter names -- translate
    # per command so the default_map lands on the right parameters
    known: set[str] = set()
    defaults: dict[str, dict] = {}
    for name, cmd in main.commands.items():
        per_cmd: dict = {}
        for param in cmd.params:
            key = _flag_key(param)
            known.add(key)
            if key in values:
                per_cmd[param.name] = values[key]
        defaults[name] = per_cmd
    unknown = sorted(set(values) - known)
    if unknown:
        raise click.UsageError(f"unknown config key(s): {', '.join(unknown)}")
    ctx.default_map = defaults


# ---------------------------------------------------------------------------
# rank-table


@main.command("rank-table")
@click.option(
    "--eps",
    "eps_list",
    default="1e-4,1e-6,1e-8",
    show_default=True,
    callback=_float_list_cb,
    help="comma-separated accuracy targets",
)
@click.option(
    "--widths",
    default="1,2,4,8,16,32",
    show_default=True,
    callback=_float_list_cb,
    help="comma-separated box widths (powers of two >= 1)",
)
@_seed_opt
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["table", "json", "csv"]),
    default="table",
    show_default=True,
)
@_output_opt
@_guard
def rank_table(eps_list, widths, seed, fmt, output):
    """Measured separation ranks: one row per accuracy, one column per width."""
    for w in widths:
        _require(
            w >= 1 and math.log2(w).is_integer(),
            f"widths must be powers of two >= 1, got {w:g}",
        )
    for e in eps_list:
        _require(0 < e < 1, f"accuracy targets must lie in (0, 1), got {e:g}")
    ranks = lowrank.measure_ranks(widths, eps_list, seed)
    if fmt == "table":
        label = max(len(f"eps={e:.0e}") for e in eps_list) + 2
        cells = [f"w={w:g}" for w in widths]
        width = max(6, max(len(c) for c in cells) + 1)
        lines = ["".ljust(label) + "".join(c.rjust(width) for c in cells)]
        for e in eps_list:
            row = [str(ranks[e][w]).rjust(width) for w in widths]
            lines.append(f"eps={e:.0e}".ljust(label) + "".join(row))
        _write_text(output, "\n".join(lines) + "\n")
    elif fmt == "json":
        doc = {
            "seed": seed,
            "eps": eps_list,
            "widths": widths,
            "ranks": [
                {"eps": e, "width": w, "rank": ranks[e][w]}
                for e in eps_list
                for w in widths
            ],
        }
        _write_text(output, _dump_json(doc))
    else:
        lines = ["eps,width,rank"]
        for e in eps_list:
            for w in widths:
                lines.append(f"{e:.17g},{w:.17g},{ranks[e][w]}")
        _write_text(output, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# nbody


@main.command()
@click.option(
    "--geometry",
    type=click.Choice(["circle", "airfoil", "kite", "file"]),
    default="circle",
    show_default=True,
)
@click.option(
    "--points",
    "points_path",
    default=None,
    metavar="PATH",
    help="with --geometry file: one 'x y' pair per line, in wavelengths",
)
@click.option("--K", "k", type=float, required=True, help="domain size in wavelengths")
@click.option("--eps", type=float, default=1e-4, show_default=True)
@click.option(
    "--ppw",
    type=float,
    default=20.0,
    show_default=True,
    help="sample density on named geometries (ignored for --geometry file)",
)
@_seed_opt
@_threads_opt
@_cache_opts
@click.option(
    "--stats",
    "with_stats",
    is_flag=True,
    default=False,
    help="include the per-level tree statistics dump",
)
@click.option(
    "--full-direct",
    is_flag=True,
    default=False,
    help=f"time the complete direct sum (K <= {driver.FULL_DIRECT_MAX_K:g} only)",
)
@click.option(
    "--format",
    "fmt",
    type=click.Choice(["json", "table", "csv"]),
    default="json",
    show_default=True,
)
@_output_opt
@_guard
def nbody(
    geometry,
    points_path,
    k,
    eps,
    ppw,
    seed,
    threads,
    rep_cache,
    rep_cache_required,
    with_stats,
    full_direct,
    fmt,
    output,
):
    """Fast evaluator vs direct sum: timings and sampled relative error."""
    _require(k > 0, "K must be positive")
    _require(eps > 0, "eps must be positive")
    _require(ppw > 0, "ppw must be positive")
    _require(threads >= 1, "threads must be >= 1")
    if geometry == "file":
        if points_path is None:
            raise click.UsageError("--geometry file needs --points PATH")
        pts = np.loadtxt(points_path, dtype=np.float64, ndmin=2)
        _require(
            pts.ndim == 2 and pts.shape[1] == 2 and len(pts) > 0,
            f"{points_path}: expected one 'x y' pair per line",
        )
        _require(
            float(np.max(np.abs(pts))) <= k / 2,
            f"{points_path}: points fall outside the K x K domain square",
        )
        geom = pts
    else:
        geom = geometry
    t0 = time.perf_counter()
    table = _load_or_build_reps(
        rep_cache,
        rep_cache_required,
        k,
        eps,
        lambda: lowrank.build_rep_table(k, eps, seed),
    )
    t_cache = time.perf_counter() - t0 if table is not None else 0.0
    report = driver.benchmark(
        geom,
        [k],
        eps,
        ppw=ppw,
        seed=seed,
        threads=threads,
        full_direct=full_direct,
        reps=table,
    )
    row = report["rows"][0]
    doc = {
        "geometry": report["geometry"],
        "K": row["K"],
        "N": row["N"],
        "eps": eps,
        "ppw": ppw,
        "seed": seed,
        "threads": threads,
        "T_rep": _sig(row["T_rep"] + t_cache),
        "T_a": _sig(row["T_a"]),
        "T_d": _sig(row["T_d"]),
        "T_d_extrapolated": row["T_d_extrapolated"],
        "speedup": _sig(row["speedup"]),
        "eps_a": row["eps_a"],
        "phase_timings": {k_: _sig(v) for k_, v in row["phase_timings"].items()},
        "tree_stats": row["tree_stats"] if with_stats else None,
    }
    if full_direct:
        doc["eps_a_full"] = row["eps_a_full"]
    if fmt == "json":
        _write_text(output, _dump_json(doc))
    elif fmt == "table":
        _write_text(output, driver.format_benchmark(report) + "\n")
    else:
        cols = [
            "geometry", "K", "N", "eps", "ppw", "seed", "threads",
            "T_rep", "T_a", "T_d", "T_d_extrapolated", "speedup", "eps_a",
        ]
        if full_direct:
            cols.append("eps_a_full")
        lines = [",".join(cols), ",".join(_num(_jsonable(doc[c])) for c in cols)]
        _write_text(output, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# scatter and field share the whole solver flag group

_solver_opts = _options(
    click.option(
        "--geometry",
        type=click.Choice(["circle", "airfoil", "kite"]),
        default="circle",
        show_default=True,
    ),
    click.option(
        "--K", "k", type=float, required=True, help="domain size in wavelengths"
    ),
    click.option(
        "--eps",
        type=float,
        default=None,
        help="fast-operator accuracy  [default: tol/10]",
    ),
    click.option("--tol", type=float, default=1e-4, show_default=True),
    click.option(
        "--ppw",
        type=float,
        default=20.0,
        show_default=True,
        help="quadrature nodes per wavelength",
    ),
    click.option(
        "--eta",
        type=float,
        default=math.pi,
        help="combined-layer coupling constant  [default: pi]",
    ),
    click.option(
        "--incident",
        default="1,0",
        show_default=True,
        callback=_pair_cb,
        help="incident plane-wave direction dx,dy",
    ),
    click.option("--restart", type=int, default=80, show_default=True),
    click.option("--maxiter", type=int, default=2000, show_default=True),
    click.option(
        "--dense",
        is_flag=True,
        default=False,
        help="apply the operator as a dense matrix (no fast evaluator)",
    ),
    _seed_opt,
    _threads_opt,
    _cache_opts,
)


def _run_solve(
    geometry, k, eps, tol, ppw, eta, incident, restart, maxiter, dense,
    seed, threads, rep_cache, rep_cache_required,
):
    """Shared scatter/field driver: returns (phi, stats_doc, failure_or_None)."""
    _require(k > 0, "K must be positive")
    _require(tol > 0, "tol must be positive")
    _require(eps is None or eps > 0, "eps must be positive")
    _require(ppw > 0, "ppw must be positive")
    _require(restart >= 1, "restart must be >= 1")
    _require(maxiter >= 1, "maxiter must be >= 1")
    _require(threads >= 1, "threads must be >= 1")
    eps_run = tol / 10.0 if eps is None else eps
    table, t_cache = None, 0.0
    if not dense:
        k_fmm = bie._fmm_domain(k)
        t0 = time.perf_counter()
        table = _load_or_build_reps(
            rep_cache,
            rep_cache_required,
            k_fmm,
            eps_run,
            lambda: lowrank.build_rep_table(k_fmm, eps_run, seed),
        )
        t_cache = time.perf_counter() - t0 if table is not None else 0.0
    try:
        phi, stats = bie.solve_scattering(
            geometry,
            k,
            eps_run,
            tol,
            incident,
            ppw=ppw,
            eta=eta,
            dense=dense,
            reps=table,
            seed=seed,
            restart=restart,
            maxiter=maxiter,
            threads=threads,
        )
        failure = None
    except bie.NonConvergenceError as exc:
        phi, stats, failure = exc.phi, exc.stats, str(exc)
    doc = {
        "geometry": stats["geometry"],
        "K": stats["K"],
        "N": stats["N"],
        "N_i": stats["N_i"],
        "T_i": _sig(stats["T_i"]),
        "T_t": _sig(stats["T_t"]),
        "T_rep": _sig(stats["T_rep"] + t_cache),
        "residual": stats["residual"],
        "converged": stats["converged"],
        "scheme": stats["scheme"],
        "dense": stats["dense"],
        "eps": eps_run,
        "tol": tol,
        "eta": eta,
        "ppw": ppw,
        "incident": list(incident),
        "seed": seed,
        "restart": restart,
        "maxiter": maxiter,
        "threads": threads,
    }
    return phi, doc, failure


def _emit_stats(doc: dict, stats_out) -> None:
    """Stats JSON goes to --stats-out, or to stderr to keep stdout clean."""
    text = _dump_json(doc)
    if stats_out is None:
        click.echo(text, err=True, nl=False)
    else:
        _write_text(stats_out, text)


@main.command()
@_solver_opts
@_output_opt
@click.option(
    "--stats-out",
    default=None,
    metavar="PATH",
    help="write the run statistics JSON here  [default: stderr]",
)
@_guard
def scatter(
    geometry, k, eps, tol, ppw, eta, incident, restart, maxiter, dense,
    seed, threads, rep_cache, rep_cache_required, output, stats_out,
):
    """Solve the sound-soft problem; emit density CSV (t, re, im) and stats."""
    phi, doc, failure = _run_solve(
        geometry, k, eps, tol, ppw, eta, incident, restart, maxiter, dense,
        seed, threads, rep_cache, rep_cache_required,
    )
    ts = np.arange(doc["N"]) * (2.0 * math.pi / doc["N"])  # nodes are uniform in t
    lines = ["t,re,im"]
    for t, v in zip(ts, phi):
        lines.append(f"{t:.17g},{v.real:.17g},{v.imag:.17g}")
    _write_text(output, "\n".join(lines) + "\n")
    _emit_stats(doc, stats_out)
    if failure is not None:
        _die(EXIT_NO_CONVERGENCE, failure)


@main.command()
@_solver_opts
@click.option(
    "--region",
    required=True,
    callback=_triple_cb,
    help="square sample window cx,cy,side (wavelengths)",
)
@click.option(
    "--spw",
    type=float,
    default=8.0,
    show_default=True,
    help="grid samples per wavelength",
)
@_output_opt
@click.option(
    "--stats-out",
    default=None,
    metavar="PATH",
    help="write the run statistics JSON here  [default: stderr]",
)
@_guard
def field(
    geometry, k, eps, tol, ppw, eta, incident, restart, maxiter, dense,
    seed, threads, rep_cache, rep_cache_required, region, spw, output, stats_out,
):
    """Solve, then sample the scattered field on a grid; CSV (x, y, re, im).

    Grid points inside the tube hugging the boundary come out as nan.
    """
    _require(spw > 0, "spw must be positive")
    _require(region[2] > 0, "region side must be positive")
    phi, doc, failure = _run_solve(
        geometry, k, eps, tol, ppw, eta, incident, restart, maxiter, dense,
        seed, threads, rep_cache, rep_cache_required,
    )
    if failure is not None:
        _emit_stats(doc, stats_out)
        _die(EXIT_NO_CONVERGENCE, failure)
    system = bie.discretize(bie.make_curve(geometry, k), ppw, eta=eta)
    grid = bie.evaluate_field(system, phi, region, spw)
    lines = ["x,y,re,im"]
    for iy, y in enumerate(grid.ys):
        for ix, x in enumerate(grid.xs):
            v = grid.values[iy, ix]
            lines.append(f"{x:.17g},{y:.17g},{v.real:.17g},{v.imag:.17g}")
    _write_text(output, "\n".join(lines) + "\n")
    _emit_stats(doc, stats_out)


if __name__ == "__main__":
    main()
