"""Experiment runner: config validation, pipelines, reproducibility."""

import json
import math
from pathlib import Path

import pytest

from scoverlap.cli import main, parse_config, regress_error_slope, run
from scoverlap.errors import ConfigError, DegenerateFit

HO_SPECTRUM = """
[systems]
ho = 1/2 q^2 + 1/2 p^2

[setup]
lambda = q

[scenario]
kind = spectrum
system = ho
h = 0.1
b_min = 0.004
b_max = 1.0
grid_points = 256
grid_halfwidth = 10

[output]
dir = {out}
"""

LINEAR_OVERLAP = """
[systems]
qpos = q
pmom = p

[setup]
lambda = q

[scenario]
kind = overlap
system1 = qpos
system2 = pmom
h = 0.5, 0.1
levels1 = 1.3
levels2 = 0.4

[output]
dir = {out}
"""

SWEEP = """
[systems]
qpos = q
ho = 1/2 q^2 + 1/2 p^2

[setup]
lambda = q

[scenario]
kind = sweep
system1 = qpos
system2 = ho
h = 0.2, 0.1, 0.05
levels = 0.55
positions = 0.15, 0.45
b_min = 0.01
b_max = 1.0
grid_points = 512
grid_halfwidth = 10

[output]
dir = {out}
"""


class TestSlopeRegression:
    def test_linear_errors(self):
        pts = [(h, 0.37 * h) for h in (0.2, 0.1, 0.05, 0.025)]
        slope, resid = regress_error_slope(pts)
        assert slope == pytest.approx(1.0, abs=1e-12)
        assert resid == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_errors(self):
        pts = [(h, 2.1 * h * h) for h in (0.2, 0.1, 0.05)]
        assert regress_error_slope(pts)[0] == pytest.approx(2.0, abs=1e-12)

    def test_plateau(self):
        pts = [(h, 1e-15) for h in (0.2, 0.1, 0.05)]
        with pytest.raises(DegenerateFit):
            regress_error_slope(pts)

    def test_needs_three_points(self):
        with pytest.raises(ValueError):
            regress_error_slope([(0.1, 1e-3), (0.05, 5e-4)])


class TestConfigValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.ini", "spectrum", None, None)

    def test_bad_system_text(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[systems]\nho = 1/2 x^2\n[scenario]\nkind = spectrum\nh = 0.1\n")
        with pytest.raises(ConfigError) as err:
            parse_config(cfg, None, None, None)
        assert "ho" in str(err.value)

    def test_bad_kind(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[systems]\nho = q\n[scenario]\nkind = dance\nh = 0.1\n")
        with pytest.raises(ConfigError):
            parse_config(cfg, None, None, None)

    def test_sweep_needs_decreasing_h(self, tmp_path):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(
            "[systems]\nho = q\n[scenario]\nkind = sweep\nh = 0.05, 0.1\n"
        )
        with pytest.raises(ConfigError):
            parse_config(cfg, None, None, None)

    def test_malformed_config_exits_1_without_outputs(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        out = tmp_path / "out"
        cfg.write_text(
            f"[systems]\nho = 1/2 w^2\n[scenario]\nkind = spectrum\nh = 0.1\n"
            f"[output]\ndir = {out}\n"
        )
        status = main(["spectrum", "--config", str(cfg)])
        assert status == 1
        assert "config error" in capsys.readouterr().err
        assert not out.exists()


class TestPipelines:
    def test_spectrum_scenario(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(HO_SPECTRUM.format(out=out))
        status = main(["spectrum", "--config", str(cfg_file)])
        assert status == 0
        report = json.loads((out / "report.json").read_text())
        assert max(c["error"] for c in report["cases"]) < 1e-9
        header = (out / "cases.csv").read_text().splitlines()[0]
        assert header == "# scoverlap-cases v1"

    def test_overlap_scenario(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(LINEAR_OVERLAP.format(out=out))
        assert main(["overlap", "--config", str(cfg_file)]) == 0
        report = json.loads((out / "report.json").read_text())
        for case in report["cases"]:
            expected = 1.0 / math.sqrt(2 * math.pi * case["h"])
            assert case["abs"] == pytest.approx(expected, rel=1e-9)
            assert case["n_terms"] == 1

    def test_sweep_scenario_reports_slope(self, tmp_path):
        # the calibrated slope window is exercised by the acceptance suite
        # with its full position/level grid; here: the pipeline runs, errors
        # shrink, and a slope is fitted
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(SWEEP.format(out=out))
        assert main(["sweep", "--config", str(cfg_file)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["slope"] is not None and report["slope"] > 0
        finest = min(c["h"] for c in report["cases"])
        worst = max(c["rel_error"] for c in report["cases"] if c["h"] == finest)
        assert worst < 0.15

    def test_reproducible_outputs(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(LINEAR_OVERLAP.format(out=out))
        main(["overlap", "--config", str(cfg_file)])
        first = (out / "cases.csv").read_bytes(), (out / "report.json").read_bytes()
        main(["overlap", "--config", str(cfg_file)])
        second = (out / "cases.csv").read_bytes(), (out / "report.json").read_bytes()
        assert first == second

    def test_probability_scenario(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(
            SWEEP.format(out=out).replace("kind = sweep", "kind = probability")
            .replace("h = 0.2, 0.1, 0.05", "h = 0.1")
        )
        assert main(["probability", "--config", str(cfg_file)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["kind"] == "probability"
        assert all(c["rel_error"] < 0.15 for c in report["cases"])

    def test_cyclic_scenario(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(
            f"""
[systems]
qpos = q
pmom = p
diag = 0.7071067811865476 q + 0.7071067811865476 p

[setup]
lambda = q

[scenario]
kind = cyclic
chain_systems = qpos, pmom, diag
chain_levels = 0.3, -0.2, 0.5
h = 0.1

[output]
dir = {out}
"""
        )
        assert main(["cyclic", "--config", str(cfg_file)]) == 0
        report = json.loads((out / "report.json").read_text())
        case = report["cases"][0]
        assert case["k"] == 3 and case["n_chains"] == 1
        expected = math.sqrt(2.0) * (2 * math.pi * 0.1) ** -1.5
        assert case["abs"] == pytest.approx(expected, rel=1e-9)

    def test_overlap_term_dump_written(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out = tmp_path / "out"
        cfg_file.write_text(LINEAR_OVERLAP.format(out=out))
        main(["overlap", "--config", str(cfg_file)])
        dumps = json.loads((out / "terms.json").read_text())
        term = dumps[0]["terms"][0]
        assert {"action", "maslov", "hessian_det"} <= set(term)

    def test_parallel_jobs_match_serial(self, tmp_path):
        cfg_file = tmp_path / "cfg.ini"
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cfg_file.write_text(LINEAR_OVERLAP.format(out=out_a))
        main(["overlap", "--config", str(cfg_file)])
        cfg_file.write_text(LINEAR_OVERLAP.format(out=out_b))
        main(["overlap", "--config", str(cfg_file), "--jobs", "2"])
        a = json.loads((out_a / "report.json").read_text())
        b = json.loads((out_b / "report.json").read_text())
        assert a["cases"] == b["cases"]

    def test_numerical_warnings_exit_2(self, tmp_path, monkeypatch):
        import warnings as w

        import scoverlap.cli as cli_mod
        from scoverlap.errors import CausticNearby

        def noisy(cfg):
            w.warn("an intersection sits near a caustic", CausticNearby)
            from scoverlap.cli import Report

            return Report(kind="spectrum")

        monkeypatch.setitem(cli_mod._PIPELINES, "spectrum", noisy)
        cfg_file = tmp_path / "cfg.ini"
        cfg_file.write_text(HO_SPECTRUM.format(out=tmp_path / "out"))
        assert main(["spectrum", "--config", str(cfg_file)]) == 2

    def test_out_override_and_env(self, tmp_path, monkeypatch):
        cfg_file = tmp_path / "cfg.ini"
        cfg_file.write_text(
            LINEAR_OVERLAP.format(out=tmp_path / "ignored").replace(
                f"dir = {tmp_path / 'ignored'}", "dir ="
            )
        )
        # fall back to the environment variable when the config leaves it blank
        env_out = tmp_path / "env_out"
        monkeypatch.setenv("SCOVERLAP_OUT", str(env_out))
        cfg = parse_config(cfg_file, "overlap", None, None)
        assert cfg.out_dir == env_out
        # an explicit --out wins
        cfg2 = parse_config(cfg_file, "overlap", str(tmp_path / "cli_out"), None)
        assert cfg2.out_dir == tmp_path / "cli_out"
