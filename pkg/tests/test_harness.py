import numpy as np
import pytest
import yaml

from activesense import cli, figures, harness
from activesense.config import ConfigError, load_config, parse_config


def tiny_precoding_config(tmp_path, **overrides):
    raw = {
        "name": "tiny-precoding",
        "task": {"kind": "downlink-precoding", "constraint": "unit-2-norm",
                 "frames": 2, "snr_db": 0.0},
        "channel": {"family": "mmwave", "antennas": 4, "paths": 1},
        "methods": ["mrt-oracle", "omp"],
        "sweep": {"axis": "snr-db", "values": [0.0]},
        "evaluation": {"episodes": 50, "seed": 123},
        "training": {"steps": 40, "batch_size": 8, "val_size": 16, "val_interval": 20,
                     "state_size": 8, "sensing_hidden": [12]},
        "baselines": {"grid_size": 32, "lmmse_prior_draws": 200},
        "seeds": [1],
        "output_dir": str(tmp_path / "out"),
    }
    raw.update(overrides)
    return raw


def write_config(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


class TestConfigValidation:
    def test_valid_config_parses(self, tmp_path):
        cfg = parse_config(tiny_precoding_config(tmp_path))
        assert cfg.name == "tiny-precoding"
        assert cfg.task_at(0.0).pilot_power == pytest.approx(1.0)

    def test_unknown_keys_rejected_with_field_names(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"]["bogus_knob"] = 1
        raw["extra_top"] = True
        with pytest.raises(ConfigError) as err:
            parse_config(raw)
        assert "task.bogus_knob" in str(err.value)
        assert "extra_top" in str(err.value)

    def test_unsorted_sweep_rejected(self, tmp_path):
        raw = tiny_precoding_config(tmp_path, sweep={"axis": "snr-db", "values": [10, 0]})
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_hiebs_multipath_rejected(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "aoa-estimation", "constraint": "unit-2-norm",
                       "frames": 4, "snr_db": 0.0}
        raw["channel"]["paths"] = 2
        raw["methods"] = ["hiebs"]
        with pytest.raises(ConfigError) as err:
            parse_config(raw)
        assert "single-path" in str(err.value)

    def test_hiebs_odd_frames_rejected(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "aoa-estimation", "constraint": "unit-2-norm",
                       "frames": 5, "snr_db": 0.0}
        raw["methods"] = ["hiebs"]
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_nonadaptive_for_aoa_rejected(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"]["kind"] = "aoa-estimation"
        raw["methods"] = ["nonadaptive-random"]
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_lmmse_requires_ris(self, tmp_path):
        raw = tiny_precoding_config(tmp_path, methods=["lmmse-phase-match"])
        with pytest.raises(ConfigError):
            parse_config(raw)

    def test_hash_stable_and_sensitive(self, tmp_path):
        a = parse_config(tiny_precoding_config(tmp_path))
        b = parse_config(tiny_precoding_config(tmp_path))
        assert a.config_hash() == b.config_hash()
        c = parse_config(tiny_precoding_config(tmp_path, seeds=[2]))
        assert a.config_hash() != c.config_hash()


class TestRunExperiment:
    def test_oracle_row_matches_direct_computation(self, tmp_path):
        cfg = parse_config(tiny_precoding_config(tmp_path, methods=["mrt-oracle"]))
        table = harness.run_experiment(cfg)
        assert len(table.rows) == 1
        row = table.rows[0]
        test = harness.build_test_set(cfg, cfg.task_at(0.0), 0)
        expected = float(np.mean(np.sum(np.abs(test.batch.h) ** 2, axis=1)))
        assert row.metric_mean == pytest.approx(expected, rel=1e-12)
        assert (tmp_path / "out" / "results.csv").exists()

    def test_rerun_is_bit_identical(self, tmp_path):
        cfg = parse_config(tiny_precoding_config(
            tmp_path, methods=["mrt-oracle", "nonadaptive-random"]))
        harness.run_experiment(cfg)
        first = (tmp_path / "out" / "results.csv").read_bytes()
        harness.run_experiment(cfg)
        second = (tmp_path / "out" / "results.csv").read_bytes()
        assert first == second

    def test_checkpoint_cache_reused(self, tmp_path):
        cfg = parse_config(tiny_precoding_config(tmp_path, methods=["nonadaptive-learned"]))
        harness.run_experiment(cfg)
        cache = tmp_path / "out" / "cache"
        files = sorted(p.name for p in cache.iterdir())
        stamps = {p.name: p.stat().st_mtime_ns for p in cache.iterdir()}
        harness.run_experiment(cfg)
        assert sorted(p.name for p in cache.iterdir()) == files
        assert {p.name: p.stat().st_mtime_ns for p in cache.iterdir()} == stamps

    def test_methods_share_test_channels(self, tmp_path):
        raw = tiny_precoding_config(tmp_path, methods=["mrt-oracle"])
        raw["sweep"] = {"axis": "snr-db", "values": [0.0, 10.0]}
        cfg = parse_config(raw)
        t0 = harness.build_test_set(cfg, cfg.task_at(0.0), 0)
        t1 = harness.build_test_set(cfg, cfg.task_at(10.0), 1)
        np.testing.assert_array_equal(t0.batch.h, t1.batch.h)
        assert not np.allclose(t0.batch.noise, t1.batch.noise)

    def test_aoa_methods_run(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "aoa-estimation", "constraint": "unit-2-norm",
                       "frames": 4, "snr_db": 10.0}
        raw["methods"] = ["omp", "hiebs", "hiepm"]
        raw["sweep"] = {"axis": "snr-db", "values": [10.0]}
        cfg = parse_config(raw)
        table = harness.run_experiment(cfg)
        assert [r.method for r in table.rows] == ["omp", "hiebs", "hiepm"]
        for row in table.rows:
            assert np.isfinite(row.metric_mean)
            assert row.metric_mean >= 0

    def test_ris_methods_run(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "ris-reflection", "constraint": "unit-modulus",
                       "frames": 2, "snr_db": 0.0}
        raw["channel"] = {"family": "ris", "rows": 2, "cols": 2, "rician_factor": 10.0,
                          "noise_variance": 1.0}
        raw["methods"] = ["mrt-oracle", "lmmse-phase-match"]
        cfg = parse_config(raw)
        table = harness.run_experiment(cfg)
        oracle, lmmse = table.rows
        # the perfect-CSI phase match bounds the LMMSE design
        assert oracle.metric_mean >= lmmse.metric_mean

    def test_clean_cache(self, tmp_path):
        cfg = parse_config(tiny_precoding_config(tmp_path, methods=["nonadaptive-random"]))
        harness.run_experiment(cfg)
        removed = harness.clean_cache(cfg)
        assert removed > 0
        assert harness.clean_cache(cfg) == 0


class TestCli:
    def test_validate_ok(self, tmp_path, capsys):
        path = write_config(tmp_path, tiny_precoding_config(tmp_path))
        assert cli.main(["validate", "-c", str(path)]) == 0
        assert "ok:" in capsys.readouterr().out

    def test_validate_bad_config(self, tmp_path, capsys):
        raw = tiny_precoding_config(tmp_path)
        raw["methods"] = ["no-such-method"]
        path = write_config(tmp_path, raw)
        assert cli.main(["validate", "-c", str(path)]) == 2
        assert "unknown method" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["validate", "-c", str(tmp_path / "nope.yaml")]) == 3

    def test_run_and_exports(self, tmp_path, capsys):
        raw = tiny_precoding_config(tmp_path, methods=["mrt-oracle", "omp"])
        raw["sweep"] = {"axis": "snr-db", "values": [0.0, 10.0]}
        path = write_config(tmp_path, raw)
        assert cli.main(["run", "-c", str(path)]) == 0
        results = tmp_path / "out" / "results.csv"
        assert results.exists()
        out = tmp_path / "figs"
        assert cli.main(["export", "gain-vs-t", "--results", str(results),
                         "-o", str(out)]) == 0
        assert (out / "gain_vs_t.csv").exists()
        assert (out / "gain_vs_t.png").exists()

    def test_export_missing_checkpoint_is_not_found(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "aoa-estimation", "constraint": "unit-2-norm",
                       "frames": 2, "snr_db": 10.0}
        raw["methods"] = ["active"]
        path = write_config(tmp_path, raw)
        code = cli.main(["export", "beam-pattern", "-c", str(path),
                         "-o", str(tmp_path / "figs")])
        assert code == 3

    def test_seed_override(self, tmp_path):
        raw = tiny_precoding_config(tmp_path, methods=["mrt-oracle"], seeds=[1, 2])
        path = write_config(tmp_path, raw)
        assert cli.main(["run", "-c", str(path), "--seed-override", "7"]) == 0
        table = harness.ResultTable.read_csv(tmp_path / "out" / "results.csv")
        assert [r.seed for r in table.rows] == [7]


class TestFigureExports:
    def test_mse_export_units_and_layout(self, tmp_path):
        rows = [
            harness.ResultRow("omp", 0.0, 0.2, 0.01, 50, 1, "h"),
            harness.ResultRow("omp", 10.0, 0.02, 0.001, 50, 1, "h"),
            harness.ResultRow("active", 0.0, 0.1, 0.01, 50, 1, "h"),
            harness.ResultRow("active", 10.0, 0.005, 0.001, 50, 1, "h"),
        ]
        results = tmp_path / "results.csv"
        harness.ResultTable(rows).write_csv(results)
        csv_path = figures.export_mse_vs_snr(results, tmp_path / "figs", units="deg2")
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "method,snr_db,mse_rad2,mse_deg2,std_error_rad2,seeds"
        # one row per (method, snr), methods grouped, snr ascending inside
        assert len(lines) == 5
        first = lines[1].split(",")
        assert first[0] == "active" and float(first[1]) == 0.0
        assert float(first[3]) == pytest.approx(0.1 * np.degrees(1.0) ** 2)
        assert (tmp_path / "figs" / "mse_vs_snr.png").exists()

    def test_replay_exports_from_trained_checkpoint(self, tmp_path):
        raw = tiny_precoding_config(tmp_path)
        raw["task"] = {"kind": "aoa-estimation", "constraint": "unit-2-norm",
                       "frames": 3, "snr_db": 10.0}
        raw["methods"] = ["active"]
        raw["sweep"] = {"axis": "snr-db", "values": [10.0]}
        raw["baselines"] = {"grid_size": 64}
        cfg = parse_config(raw)
        harness.run_experiment(cfg)
        out = tmp_path / "figs"
        phi = float(np.deg2rad(20.0))
        figures.export_beam_pattern(cfg, 10.0, 1, phi, 0, out)
        figures.export_posterior_trace(cfg, 10.0, 1, phi, 0, out)
        beam = (out / "beam_pattern.csv").read_text().strip().splitlines()
        assert beam[0] == "frame,angle_rad,angle_deg,gain"
        assert len(beam) == 1 + 3 * 361
        post = (out / "posterior_trace.csv").read_text().strip().splitlines()
        assert post[0] == "frame,angle_rad,angle_deg,mass"
        assert len(post) == 1 + 4 * 64  # prior plus one trace per frame
        assert (out / "beam_pattern.png").exists()
        assert (out / "posterior_trace.png").exists()
