"""CLI: exit codes, output schemas, determinism, config precedence."""

import json
import math
import subprocess
import sys
from io import StringIO

import jsonschema
import numpy as np
import pytest
from click.testing import CliRunner

from dirfmm import cli, lowrank

SCHEMAS = {p.stem: json.loads(p.read_text()) for p in cli.SCHEMA_DIR.glob("*.json")}

# cheap standing problems: scatter/field at K=8 (fast path reuses one cached
# table), nbody at K=4; accuracy is covered by the solver suites, so the CLI
# tests run at loose tolerances
SCATTER = ["scatter", "--K", "8", "--tol", "1e-2", "--ppw", "10"]
FIELD = ["field", "--K", "8", "--tol", "1e-2", "--ppw", "10"]


def run_cli(*args, **kwargs):
    argv = [str(a) for a in args]
    return CliRunner().invoke(cli.main, argv, catch_exceptions=False, **kwargs)


def validate(doc, schema_name):
    jsonschema.validate(doc, SCHEMAS[schema_name])


def nondeterministic_keys(schema_name):
    """Property names the schema marks as wall clock."""
    props = SCHEMAS[schema_name]["properties"]
    return {k for k, p in props.items() if p.get("deterministic") is False}


def stripped(doc, schema_name):
    drop = nondeterministic_keys(schema_name)
    return {k: v for k, v in doc.items() if k not in drop}


def parse_csv(text):
    return np.loadtxt(StringIO(text), delimiter=",", skiprows=1, ndmin=2)


@pytest.fixture(scope="module")
def cache8(tmp_path_factory):
    """Rep cache matching SCATTER's defaults (K_fmm = 8, eps = tol/10)."""
    path = tmp_path_factory.mktemp("cache") / "reps8.bin"
    lowrank.save_rep_table(lowrank.build_rep_table(8.0, 1e-3, 0), path)
    return path


@pytest.fixture(scope="module")
def cache4(tmp_path_factory):
    path = tmp_path_factory.mktemp("cache") / "reps4.bin"
    lowrank.save_rep_table(lowrank.build_rep_table(4.0, 1e-3, 0), path)
    return path


@pytest.fixture(scope="module")
def points_file(tmp_path_factory):
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1.8, 1.8, size=(60, 2))
    path = tmp_path_factory.mktemp("pts") / "cloud.txt"
    np.savetxt(path, pts)
    return path


NBODY4 = ["nbody", "--K", "4", "--eps", "1e-3", "--ppw", "10"]


class TestGroup:
    def test_version_embeds_cache_format(self):
        res = run_cli("--version")
        assert res.exit_code == 0
        assert "0.1.0" in res.output
        assert lowrank.CACHE_MAGIC.decode() in res.output

    def test_help_lists_subcommands(self):
        res = run_cli("--help")
        assert res.exit_code == 0
        for name in ("rank-table", "nbody", "scatter", "field"):
            assert name in res.output

    def test_unknown_flag_is_usage_error(self):
        assert run_cli("nbody", "--bogus", "1").exit_code == 2

    def test_module_entry_point(self):
        out = subprocess.run(
            [sys.executable, "-m", "dirfmm.cli", "--version"],
            capture_output=True,
            text=True,
        )
        assert out.returncode == 0
        assert lowrank.CACHE_MAGIC.decode() in out.stdout


class TestSchemasPublished:
    def test_three_schemas_ship_with_the_package(self):
        assert set(SCHEMAS) == {"rank_table", "nbody", "scatter_stats"}

    @pytest.mark.parametrize("name", ["rank_table", "nbody", "scatter_stats"])
    def test_schema_itself_is_valid(self, name):
        jsonschema.Draft202012Validator.check_schema(SCHEMAS[name])

    @pytest.mark.parametrize("name", ["nbody", "scatter_stats"])
    def test_timing_fields_are_marked(self, name):
        marked = nondeterministic_keys(name)
        assert any(k.startswith("T_") for k in marked)


class TestRankTable:
    def test_json_output_validates(self):
        res = run_cli("rank-table", "--eps", "1e-2", "--widths", "1,2", "--format", "json")
        assert res.exit_code == 0
        doc = json.loads(res.output)
        validate(doc, "rank_table")
        assert doc["widths"] == [1.0, 2.0]
        assert all(r["rank"] >= 1 for r in doc["ranks"])

    def test_json_is_deterministic(self):
        args = ("rank-table", "--eps", "1e-2", "--widths", "1,2", "--format", "json")
        assert run_cli(*args).output == run_cli(*args).output

    def test_table_layout_row_per_eps_column_per_width(self):
        res = run_cli("rank-table", "--eps", "1e-2,1e-3", "--widths", "1,2")
        assert res.exit_code == 0
        header, *rows = res.output.strip().splitlines()
        assert "w=1" in header and "w=2" in header
        assert rows[0].startswith("eps=1e-02")
        assert rows[1].startswith("eps=1e-03")
        assert len(rows) == 2

    def test_csv_output(self):
        res = run_cli("rank-table", "--eps", "1e-2", "--widths", "1,2", "--format", "csv")
        lines = res.output.strip().splitlines()
        assert lines[0] == "eps,width,rank"
        assert len(lines) == 3

    def test_output_flag_writes_file(self, tmp_path):
        out = tmp_path / "ranks.json"
        res = run_cli("rank-table", "--eps", "1e-2", "--widths", "1", "--format", "json", "-o", out)
        assert res.exit_code == 0
        assert res.output == ""
        validate(json.loads(out.read_text()), "rank_table")

    def test_non_power_of_two_width_rejected(self):
        assert run_cli("rank-table", "--widths", "3").exit_code == cli.EXIT_INVALID

    def test_eps_of_one_rejected(self):
        assert run_cli("rank-table", "--eps", "1.0", "--widths", "1").exit_code == cli.EXIT_INVALID

    def test_malformed_eps_list_is_usage_error(self):
        assert run_cli("rank-table", "--eps", "1e-4,banana").exit_code == 2


class TestNBody:
    def test_json_validates_and_tree_stats_gated(self, cache4):
        res = run_cli(*NBODY4, "--rep-cache", cache4)
        assert res.exit_code == 0
        doc = json.loads(res.output)
        validate(doc, "nbody")
        assert doc["N"] > 0
        assert doc["tree_stats"] is None

        res = run_cli(*NBODY4, "--rep-cache", cache4, "--stats")
        doc = json.loads(res.output)
        validate(doc, "nbody")
        assert doc["tree_stats"]["levels"]
        assert doc["tree_stats"]["total_boxes"] >= len(doc["tree_stats"]["levels"])

    def test_deterministic_modulo_timing_fields(self, cache4):
        docs = [
            json.loads(run_cli(*NBODY4, "--rep-cache", cache4).output)
            for _ in range(2)
        ]
        assert stripped(docs[0], "nbody") == stripped(docs[1], "nbody")
        # bitwise equality of the measured error, not just approximate
        assert docs[0]["eps_a"] == docs[1]["eps_a"]

    def test_timings_carry_three_significant_digits(self, cache4):
        doc = json.loads(run_cli(*NBODY4, "--rep-cache", cache4).output)
        for key in nondeterministic_keys("nbody"):
            values = doc[key].values() if isinstance(doc[key], dict) else [doc[key]]
            for v in values:
                assert v == float(f"{v:.3g}")

    def test_point_file_geometry(self, points_file, cache4):
        res = run_cli(*NBODY4, "--geometry", "file", "--points", points_file,
                      "--rep-cache", cache4)
        assert res.exit_code == 0
        doc = json.loads(res.output)
        validate(doc, "nbody")
        assert doc["geometry"] == "custom"
        assert doc["N"] == 60

    def test_full_direct_reports_exact_error(self, points_file, cache4):
        res = run_cli(*NBODY4, "--geometry", "file", "--points", points_file,
                      "--rep-cache", cache4, "--full-direct")
        doc = json.loads(res.output)
        validate(doc, "nbody")
        assert doc["T_d_extrapolated"] is False
        assert doc["eps_a_full"] < 30 * 1e-3

    def test_table_and_csv_formats(self, cache4):
        res = run_cli(*NBODY4, "--rep-cache", cache4, "--format", "table")
        assert "speedup" in res.output
        res = run_cli(*NBODY4, "--rep-cache", cache4, "--format", "csv")
        lines = res.output.strip().splitlines()
        assert lines[0].startswith("geometry,K,N,")
        assert len(lines) == 2

    def test_cache_built_saved_then_required_load(self, tmp_path):
        cache = tmp_path / "fresh.bin"
        assert run_cli(*NBODY4, "--rep-cache", cache).exit_code == 0
        assert cache.exists()
        res = run_cli(*NBODY4, "--rep-cache", cache, "--rep-cache-required")
        assert res.exit_code == 0
        assert json.loads(res.output)["T_rep"] < 0.5

    def test_missing_required_cache_exits_3(self, tmp_path):
        res = run_cli(*NBODY4, "--rep-cache", tmp_path / "absent.bin",
                      "--rep-cache-required")
        assert res.exit_code == cli.EXIT_MISSING_CACHE
        assert not (tmp_path / "absent.bin").exists()

    def test_mismatched_cache_exits_4(self, cache4):
        res = run_cli("nbody", "--K", "8", "--eps", "1e-3", "--ppw", "10",
                      "--rep-cache", cache4)
        assert res.exit_code == cli.EXIT_INVALID
        assert "rep cache" in res.stderr

    def test_foreign_cache_file_exits_4(self, tmp_path):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"not a cache" * 10)
        res = run_cli(*NBODY4, "--rep-cache", junk)
        assert res.exit_code == cli.EXIT_INVALID

    def test_file_geometry_needs_points_flag(self):
        assert run_cli(*NBODY4, "--geometry", "file").exit_code == 2

    def test_missing_points_file_exits_6(self, tmp_path):
        res = run_cli(*NBODY4, "--geometry", "file", "--points", tmp_path / "no.txt")
        assert res.exit_code == cli.EXIT_IO

    def test_points_outside_domain_exit_4(self, points_file):
        res = run_cli("nbody", "--K", "2", "--eps", "1e-3",
                      "--geometry", "file", "--points", points_file)
        assert res.exit_code == cli.EXIT_INVALID

    def test_full_direct_refused_at_large_K(self):
        res = run_cli("nbody", "--K", "1024", "--full-direct")
        assert res.exit_code == cli.EXIT_INVALID

    def test_malformed_K_is_usage_error(self):
        assert run_cli("nbody", "--K", "banana").exit_code == 2


class TestScatter:
    def test_dense_run_writes_density_and_stats(self, tmp_path):
        dens, stats = tmp_path / "phi.csv", tmp_path / "stats.json"
        res = run_cli(*SCATTER, "--dense", "-o", dens, "--stats-out", stats)
        assert res.exit_code == 0
        assert res.stderr == ""
        doc = json.loads(stats.read_text())
        validate(doc, "scatter_stats")
        assert doc["converged"] is True
        assert doc["dense"] is True
        assert doc["eps"] == pytest.approx(1e-3)  # tol/10 default
        rows = parse_csv(dens.read_text())
        assert rows.shape == (doc["N"], 3)
        expect_t = np.arange(doc["N"]) * 2.0 * math.pi / doc["N"]
        assert np.allclose(rows[:, 0], expect_t, atol=1e-15)

    def test_stats_default_to_stderr(self):
        res = run_cli(*SCATTER, "--dense")
        assert res.exit_code == 0
        assert res.stdout.startswith("t,re,im")
        assert "t,re,im" not in res.stderr
        doc = json.loads(res.stderr)
        validate(doc, "scatter_stats")

    def test_fast_path_matches_dense_density(self, cache8, tmp_path):
        fast_csv = tmp_path / "fast.csv"
        res = run_cli(*SCATTER, "--rep-cache", cache8, "--rep-cache-required",
                      "-o", fast_csv, "--stats-out", tmp_path / "fast.json")
        assert res.exit_code == 0
        doc = json.loads((tmp_path / "fast.json").read_text())
        validate(doc, "scatter_stats")
        assert doc["dense"] is False
        res = run_cli(*SCATTER, "--dense", "-o", tmp_path / "dense.csv",
                      "--stats-out", tmp_path / "dense.json")
        a, b = parse_csv(fast_csv.read_text()), parse_csv((tmp_path / "dense.csv").read_text())
        fast = a[:, 1] + 1j * a[:, 2]
        dense = b[:, 1] + 1j * b[:, 2]
        rel = np.linalg.norm(fast - dense) / np.linalg.norm(dense)
        assert rel < 0.1  # both solved to tol=1e-2

    def test_byte_identical_density_and_stats_modulo_timings(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            dens, stats = tmp_path / f"{tag}.csv", tmp_path / f"{tag}.json"
            run_cli(*SCATTER, "--dense", "-o", dens, "--stats-out", stats)
            outs.append((dens.read_bytes(), json.loads(stats.read_text())))
        assert outs[0][0] == outs[1][0]
        assert stripped(outs[0][1], "scatter_stats") == stripped(outs[1][1], "scatter_stats")

    def test_nonconvergence_exits_5_but_writes_artifacts(self, tmp_path):
        dens, stats = tmp_path / "phi.csv", tmp_path / "stats.json"
        res = run_cli(*SCATTER, "--dense", "--maxiter", "2",
                      "-o", dens, "--stats-out", stats)
        assert res.exit_code == cli.EXIT_NO_CONVERGENCE
        doc = json.loads(stats.read_text())
        validate(doc, "scatter_stats")
        assert doc["converged"] is False
        assert doc["N_i"] == 2
        assert parse_csv(dens.read_text()).shape[1] == 3

    def test_unwritable_output_exits_6(self):
        res = run_cli(*SCATTER, "--dense", "-o", "/nonexistent-dir/x.csv")
        assert res.exit_code == cli.EXIT_IO

    def test_zero_incident_direction_exits_4(self):
        res = run_cli(*SCATTER, "--dense", "--incident", "0,0")
        assert res.exit_code == cli.EXIT_INVALID

    def test_incident_needs_two_components(self):
        assert run_cli(*SCATTER, "--dense", "--incident", "1,2,3").exit_code == 2

    def test_nonstandard_eta_runs(self, tmp_path):
        res = run_cli(*SCATTER, "--dense", "--eta", "6.283",
                      "-o", tmp_path / "d.csv", "--stats-out", tmp_path / "s.json")
        assert res.exit_code == 0
        assert json.loads((tmp_path / "s.json").read_text())["eta"] == 6.283


class TestField:
    def test_grid_straddling_boundary_mixes_nan_and_values(self, tmp_path):
        out = tmp_path / "grid.csv"
        res = run_cli(*FIELD, "--dense", "--region", "3.6,0,1", "--spw", "6",
                      "-o", out, "--stats-out", tmp_path / "s.json")
        assert res.exit_code == 0
        rows = parse_csv(out.read_text())
        assert rows.shape == (49, 4)  # (round(1*6)+1)^2 grid points
        assert np.array_equal(np.unique(rows[:, 0]), np.linspace(3.1, 4.1, 7))
        masked = np.isnan(rows[:, 2])
        assert 0 < masked.sum() < len(rows)
        assert np.isfinite(rows[~masked, 2:]).all()
        validate(json.loads((tmp_path / "s.json").read_text()), "scatter_stats")

    def test_clear_region_has_no_nans(self):
        res = run_cli(*FIELD, "--dense", "--region", "5.5,0,1", "--spw", "4")
        assert res.exit_code == 0
        rows = parse_csv(res.stdout)  # stats land on stderr
        assert np.isfinite(rows).all()

    def test_region_is_required(self):
        assert run_cli("field", "--K", "8", "--dense").exit_code == 2

    def test_malformed_region_is_usage_error(self):
        assert run_cli(*FIELD, "--dense", "--region", "1,2").exit_code == 2

    def test_nonpositive_side_exits_4(self):
        res = run_cli(*FIELD, "--dense", "--region", "3,0,-1")
        assert res.exit_code == cli.EXIT_INVALID

    def test_nonconvergence_skips_grid(self, tmp_path):
        out = tmp_path / "grid.csv"
        res = run_cli(*FIELD, "--dense", "--maxiter", "2", "--region", "5,0,1",
                      "-o", out, "--stats-out", tmp_path / "s.json")
        assert res.exit_code == cli.EXIT_NO_CONVERGENCE
        assert not out.exists()
        assert json.loads((tmp_path / "s.json").read_text())["converged"] is False


class TestConfigPrecedence:
    def write(self, tmp_path, text):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(text)
        return cfg

    def test_flags_beat_config_beat_defaults(self, tmp_path):
        cfg = self.write(tmp_path, "# desk defaults\nwidths = 1\neps = 1e-2\nseed = 3\n")
        doc = json.loads(
            run_cli("--config", cfg, "rank-table", "--format", "json").output
        )
        assert (doc["eps"], doc["widths"], doc["seed"]) == ([1e-2], [1.0], 3)
        doc = json.loads(
            run_cli("--config", cfg, "rank-table", "--format", "json",
                    "--eps", "1e-1").output
        )
        assert doc["eps"] == [1e-1]  # flag wins
        assert doc["widths"] == [1.0]  # config still covers the rest

    def test_config_reaches_every_subcommand(self, tmp_path, cache4):
        cfg = self.write(tmp_path, "eps = 1e-3\nseed = 0\nformat = csv\n")
        res = run_cli("--config", cfg, "nbody", "--K", "4", "--ppw", "10",
                      "--rep-cache", cache4)
        assert res.exit_code == 0  # eps from config matches the cache
        assert res.output.startswith("geometry,")  # format=csv applied

    def test_config_sets_boolean_flags(self, tmp_path, cache4):
        cfg = self.write(tmp_path, "stats = true\n")
        res = run_cli("--config", cfg, *NBODY4, "--rep-cache", cache4)
        assert json.loads(res.output)["tree_stats"] is not None

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = self.write(tmp_path, "bogus_key = 1\n")
        assert run_cli("--config", cfg, "rank-table").exit_code == 2

    def test_malformed_config_line_is_usage_error(self, tmp_path):
        cfg = self.write(tmp_path, "no equals sign\n")
        assert run_cli("--config", cfg, "rank-table").exit_code == 2

    def test_missing_config_file_exits_6(self, tmp_path):
        res = run_cli("--config", tmp_path / "absent.cfg", "rank-table")
        assert res.exit_code == cli.EXIT_IO
