"""Config loading, the command-line entry points, and artifact layout."""

import json
from pathlib import Path

import numpy as np
import pytest

from tsrate.cli import (
    ConfigError,
    StageError,
    build_models,
    load_config,
    main,
    read_scores_csv,
    validate_config,
)
from tsrate.imaging import IMAGE_SIZE, load_png

ARTIFACTS = (
    "windows.csv", "predictions.csv", "residuals.csv", "raw_scores.csv",
    "partial_orders.json", "ratings.json", "radar.json", "manifest.json",
)

LIGHT_OVERRIDES = dict(
    perturbations=[{"tag": "P0"}, {"tag": "P1", "period": 5}, {"tag": "P4"}],
    models=[
        {"kind": "biased", "model_id": "s_b",
         "offsets": {"META": 0.0, "GOOG": 200.0}, "default_offset": 400.0},
        {"kind": "random", "model_id": "s_r", "seed": 5},
    ],
)


def mutate_config(path: Path, fn) -> Path:
    cfg = json.loads(path.read_text(encoding="utf-8"))
    fn(cfg)
    path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
    return path


class TestLoadConfig:
    def test_minimal_config_loads(self, make_config):
        cfg = load_config(make_config())
        assert cfg.seed == 7
        assert cfg.window.n == 80
        assert cfg.l_levels == 3
        assert cfg.residual_mode == "absolute"
        assert cfg.out_dir.name == "out"

    def test_flag_overrides_win(self, make_config, tmp_path):
        p = make_config()
        cfg = load_config(p, seed=99, l_levels=5, out_dir=tmp_path / "elsewhere")
        assert cfg.seed == 99
        assert cfg.l_levels == 5
        assert cfg.out_dir == tmp_path / "elsewhere"

    def test_unknown_keys_reported_with_paths(self, make_config):
        p = mutate_config(make_config(), lambda c: c["metrics"].update(bogus=1))
        with pytest.raises(ConfigError) as err:
            load_config(p)
        assert "$.metrics.bogus: unknown key" in err.value.problems

    def test_nested_unknown_key_path(self, make_config):
        p = mutate_config(make_config(), lambda c: c["window"].update(overlap=2))
        with pytest.raises(ConfigError) as err:
            load_config(p)
        assert any("$.window.overlap" in m for m in err.value.problems)

    def test_zero_levels_rejected_with_field_name(self, make_config):
        p = mutate_config(make_config(), lambda c: c["metrics"].update(l_levels=0))
        with pytest.raises(ConfigError) as err:
            load_config(p)
        assert any("l_levels" in m for m in err.value.problems)

    def test_bool_is_not_a_number(self, make_config):
        p = mutate_config(make_config(), lambda c: c["window"].update(n=True))
        with pytest.raises(ConfigError) as err:
            load_config(p)
        assert any("window.n" in m for m in err.value.problems)

    def test_version_checked(self, make_config):
        p = mutate_config(make_config(), lambda c: c.update(version=2))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_duplicate_perturbation_tags_rejected(self, make_config):
        p = mutate_config(
            make_config(),
            lambda c: c.update(perturbations=[{"tag": "P0"}, {"tag": "P0"}]))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_control_tag_required(self, make_config):
        p = mutate_config(
            make_config(),
            lambda c: c.update(perturbations=[{"tag": "P1", "period": 5}]))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_duplicate_model_ids_rejected(self, make_config):
        p = mutate_config(
            make_config(),
            lambda c: c.update(models=[
                {"kind": "random", "model_id": "s_r", "seed": 1},
                {"kind": "random", "model_id": "s_r", "seed": 2},
            ]))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_bad_residual_mode_rejected(self, make_config):
        p = mutate_config(make_config(),
                          lambda c: c["metrics"].update(residual_mode="rms"))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_wrs_shape_mismatch_rejected(self, make_config):
        p = mutate_config(
            make_config(),
            lambda c: c["metrics"].update(wrs={"cis": [95], "weights": [1.0, 0.8]}))
        with pytest.raises(ConfigError):
            load_config(p)

    def test_nonpositive_weight_ratio_rejected(self, make_config):
        def fn(c):
            c["distributions"][0]["weight_ratio"] = 0.0

        with pytest.raises(ConfigError):
            load_config(mutate_config(make_config(), fn))

    def test_relative_series_paths_resolve_against_config_dir(
            self, corpus_dir, make_config, tmp_path):
        def fn(c):
            for s in c["dataset"]["series"]:
                s["path"] = "data/" + Path(s["path"]).name

        p = mutate_config(make_config(), fn)
        (tmp_path / "data").mkdir()
        for csv in corpus_dir.glob("*.csv"):
            (tmp_path / "data" / csv.name).write_bytes(csv.read_bytes())
        cfg = load_config(p)
        assert validate_config(cfg) == []


class TestValidateConfig:
    def test_clean_config_passes(self, make_config):
        assert validate_config(load_config(make_config())) == []

    def test_missing_dataset_file_named(self, make_config):
        def fn(c):
            c["dataset"]["series"][0]["path"] = "/nonexistent/META.csv"

        problems = validate_config(load_config(mutate_config(make_config(), fn)))
        assert any("/nonexistent/META.csv" in m for m in problems)

    def test_unknown_favored_value_named(self, make_config):
        def fn(c):
            c["distributions"][0]["favored"] = "aerospace"

        problems = validate_config(load_config(mutate_config(make_config(), fn)))
        assert any("aerospace" in m for m in problems)


class TestBuildModels:
    def test_http_secret_env_must_be_set(self, make_config, monkeypatch):
        def fn(c):
            c["models"] = [{
                "kind": "http", "model_id": "s_h", "url": "http://example.invalid",
                "secret_env": "TSRATE_TEST_TOKEN", "auth_header": "Authorization",
            }]

        monkeypatch.delenv("TSRATE_TEST_TOKEN", raising=False)
        cfg = load_config(mutate_config(make_config(), fn))
        with pytest.raises(StageError, match="TSRATE_TEST_TOKEN"):
            build_models(cfg, [], set())

    def test_http_secret_env_becomes_header(self, make_config, monkeypatch):
        def fn(c):
            c["models"] = [{
                "kind": "http", "model_id": "s_h", "url": "http://example.invalid",
                "secret_env": "TSRATE_TEST_TOKEN", "auth_header": "X-Api-Key",
            }]

        monkeypatch.setenv("TSRATE_TEST_TOKEN", "tok123")
        cfg = load_config(mutate_config(make_config(), fn))
        models = build_models(cfg, [], set())
        assert models[0].headers["X-Api-Key"] == "tok123"


class TestValidateCommand:
    def test_ok_on_clean_config(self, make_config, capsys):
        assert main(["validate", "--config", str(make_config())]) == 0
        assert capsys.readouterr().out.strip() == "OK"

    def test_unknown_key_exit_two(self, make_config, capsys):
        p = mutate_config(make_config(), lambda c: c["metrics"].update(bogus=1))
        assert main(["validate", "--config", str(p)]) == 2
        err = capsys.readouterr().err
        assert "error: $.metrics.bogus: unknown key" in err

    def test_missing_csv_exit_two_names_path(self, make_config, capsys):
        def fn(c):
            c["dataset"]["series"][0]["path"] = "/nonexistent/META.csv"

        assert main(["validate", "--config", str(mutate_config(make_config(), fn))]) == 2
        assert "/nonexistent/META.csv" in capsys.readouterr().err

    def test_zero_levels_flag_exit_two(self, make_config, capsys):
        assert main(["validate", "--config", str(make_config()),
                     "--l-levels", "0"]) == 2
        assert "l_levels" in capsys.readouterr().err

    def test_all_problems_reported_at_once(self, make_config, capsys):
        def fn(c):
            c["dataset"]["series"][0]["path"] = "/nope/a.csv"
            c["dataset"]["series"][1]["path"] = "/nope/b.csv"

        assert main(["validate", "--config", str(mutate_config(make_config(), fn))]) == 2
        err = capsys.readouterr().err
        assert err.count("error:") == 2


@pytest.fixture()
def light_run(make_config, tmp_path):
    cfg_path = make_config("light.json", **LIGHT_OVERRIDES)
    out = tmp_path / "run1"
    rc = main(["run", "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0
    return cfg_path, out


class TestRunCommand:
    def test_artifacts_written(self, light_run, capsys):
        _, out = light_run
        for name in ARTIFACTS:
            assert (out / name).exists(), name

    def test_manifest_contents(self, light_run):
        import hashlib

        cfg_path, out = light_run
        man = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert man["seed"] == 7
        assert man["schema_version"] == 1
        assert man["counts"]["windows"] == 48
        # 2 models x 3 tags x 48 windows
        assert man["counts"]["predictions"] == 288
        assert man["counts"]["skipped_cells"] == {}
        assert man["config_sha256"] == hashlib.sha256(cfg_path.read_bytes()).hexdigest()
        for name, digest in man["artifacts"].items():
            assert digest == hashlib.sha256((out / name).read_bytes()).hexdigest()

    def test_ratings_structure(self, light_run):
        _, out = light_run
        ratings = json.loads((out / "ratings.json").read_text(encoding="utf-8"))
        assert sorted(ratings) == [
            "ape_company", "ape_industry", "mase", "pie_company", "pie_industry",
            "sign_accuracy", "smape", "wrs_company", "wrs_industry"]
        for metric, block in ratings.items():
            assert block["levels"] == 3
            assert block["direction"] == ("higher" if metric == "sign_accuracy" else "lower")
            for p, cells in block["ratings"].items():
                assert set(cells) == {"s_b", "s_r"}
        # biased system has perfect sign accuracy, so best-first flips there
        sa = ratings["sign_accuracy"]
        assert sa["ratings"]["P0"] == {"s_b": 1, "s_r": 2}
        assert sa["ascending_ratings"]["P0"] == {"s_b": 2, "s_r": 1}

    def test_causal_metrics_cover_treatment_tags_only(self, light_run):
        _, out = light_run
        ratings = json.loads((out / "ratings.json").read_text(encoding="utf-8"))
        assert sorted(ratings["wrs_industry"]["ratings"]) == ["P0", "P1", "P4"]
        assert sorted(ratings["ape_industry"]["ratings"]) == ["P1", "P4"]
        assert sorted(ratings["pie_company"]["ratings"]) == ["P1", "P4"]
        assert sorted(ratings["smape"]["ratings"]) == ["P0", "P1", "P4"]

    def test_radar_shape(self, light_run):
        _, out = light_run
        radar = json.loads((out / "radar.json").read_text(encoding="utf-8"))
        for metric, per_model in radar.items():
            for model, entry in per_model.items():
                assert set(entry) == {"average", "cells"}
                for tag, cell in entry["cells"].items():
                    assert set(cell) == {"mean", "std"}
        # A constant offset preserves every step direction except the first one,
        # which is judged against the last observed value, so the biased system
        # lands just below a perfect score while still beating the random one.
        s_b_avg = radar["sign_accuracy"]["s_b"]["average"]
        s_r_avg = radar["sign_accuracy"]["s_r"]["average"]
        assert 95.0 <= s_b_avg < 100.0
        assert s_b_avg > s_r_avg

    def test_trace_links_scores_to_windows(self, light_run):
        _, out = light_run
        man = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        trace = man["trace"]
        assert trace, "trace must not be empty"
        causal_keys = 0
        for key, entry in trace.items():
            metric, model, tag = key.split("|")
            assert entry["window_ids"] == sorted(entry["window_ids"])
            if metric.startswith(("ape_", "pie_")):
                causal_keys += 1
                assert entry["distribution"] in ("di1", "dc1")
                assert entry["confounder"] in ("industry", "company")
            elif metric.startswith("wrs_"):
                assert entry["distribution"] is None
                assert entry["confounder"] == metric.removeprefix("wrs_")
            else:
                assert entry["distribution"] is None
                assert entry["confounder"] is None
        assert causal_keys > 0

    def test_rerun_is_byte_identical(self, light_run, tmp_path, capsys):
        cfg_path, out = light_run
        out2 = tmp_path / "run2"
        assert main(["run", "--config", str(cfg_path), "--out", str(out2)]) == 0
        for name in ARTIFACTS:
            assert (out / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_parallel_jobs_match_serial(self, light_run, tmp_path, capsys):
        cfg_path, out = light_run
        out2 = tmp_path / "run-jobs"
        assert main(["run", "--config", str(cfg_path), "--out", str(out2),
                     "--jobs", "4"]) == 0
        for name in ARTIFACTS:
            assert (out / name).read_bytes() == (out2 / name).read_bytes(), name

    def test_seed_flag_changes_manifest_and_scores(self, light_run, tmp_path, capsys):
        cfg_path, out = light_run
        out2 = tmp_path / "run-seed"
        assert main(["run", "--config", str(cfg_path), "--out", str(out2),
                     "--seed", "8"]) == 0
        man2 = json.loads((out2 / "manifest.json").read_text(encoding="utf-8"))
        assert man2["seed"] == 8

    def test_run_rejects_broken_config_with_exit_two(self, make_config, capsys):
        p = mutate_config(make_config(), lambda c: c["metrics"].update(bogus=1))
        assert main(["run", "--config", str(p)]) == 2

    def test_model_stage_failure_exits_three(self, make_config, capsys, monkeypatch):
        def fn(c):
            c["models"] = [{
                "kind": "http", "model_id": "s_h", "url": "http://example.invalid",
                "secret_env": "TSRATE_TEST_TOKEN",
            }]

        monkeypatch.delenv("TSRATE_TEST_TOKEN", raising=False)
        p = mutate_config(make_config(), fn)
        assert main(["run", "--config", str(p)]) == 3
        assert "TSRATE_TEST_TOKEN" in capsys.readouterr().err

    def test_stdout_reports_counts(self, make_config, tmp_path, capsys):
        cfg_path = make_config(**LIGHT_OVERRIDES)
        rc = main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "counted")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "wrote 8 artifacts" in out
        assert "windows=48" in out
        assert "predictions=288" in out
        assert "raw_scores=" in out


class TestExternalPredictions:
    def test_external_route_reproduces_in_process_scores(self, light_run, make_config,
                                                         tmp_path, capsys):
        _, out = light_run

        def fn(c):
            c["models"] = [{
                "kind": "external_csv", "model_id": "s_b",
                "path": str(out / "predictions.csv"), "modality": "numeric+image",
            }]

        cfg2 = mutate_config(make_config("external.json", **LIGHT_OVERRIDES), fn)
        out2 = tmp_path / "run-ext"
        assert main(["run", "--config", str(cfg2), "--out", str(out2)]) == 0

        def rows_for(path, model):
            lines = (path / "raw_scores.csv").read_text(encoding="utf-8").splitlines()
            return sorted(l for l in lines[1:] if f",{model}," in l)

        assert rows_for(out2, "s_b") == rows_for(out, "s_b")


class TestReadScoresCsv:
    def write(self, tmp_path, body):
        p = tmp_path / "scores.csv"
        p.write_text(body, encoding="utf-8")
        return p

    def test_round_trip(self, tmp_path):
        p = self.write(tmp_path,
                       "metric,model_id,perturbation,confounder,value\n"
                       "smape,s_a,P0,none,0.25\n")
        scores = read_scores_csv(p)
        assert len(scores) == 1
        assert scores[0].value == 0.25

    def test_header_must_match_exactly(self, tmp_path):
        p = self.write(tmp_path, "metric,model,perturbation,confounder,value\n")
        with pytest.raises(ConfigError, match="header"):
            read_scores_csv(p)

    def test_short_row_reported_with_line_number(self, tmp_path):
        p = self.write(tmp_path,
                       "metric,model_id,perturbation,confounder,value\n"
                       "smape,s_a,P0,none\n")
        with pytest.raises(ConfigError, match=":2:"):
            read_scores_csv(p)

    def test_bad_value_reported_with_line_number(self, tmp_path):
        p = self.write(tmp_path,
                       "metric,model_id,perturbation,confounder,value\n"
                       "smape,s_a,P0,none,xyz\n")
        with pytest.raises(ConfigError, match="bad value"):
            read_scores_csv(p)

    def test_nan_value_rejected(self, tmp_path):
        p = self.write(tmp_path,
                       "metric,model_id,perturbation,confounder,value\n"
                       "smape,s_a,P0,none,nan\n")
        with pytest.raises(ConfigError):
            read_scores_csv(p)

    def test_empty_table_rejected(self, tmp_path):
        p = self.write(tmp_path, "metric,model_id,perturbation,confounder,value\n")
        with pytest.raises(ConfigError, match="no score rows"):
            read_scores_csv(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            read_scores_csv(tmp_path / "nope.csv")


class TestRateCommand:
    def scores_csv(self, tmp_path, rows):
        p = tmp_path / "scores.csv"
        body = "metric,model_id,perturbation,confounder,value\n"
        body += "".join(f"{m},{mid},{tag},none,{v}\n" for m, mid, tag, v in rows)
        p.write_text(body, encoding="utf-8")
        return p

    def test_single_model_zero_rates_one(self, tmp_path, capsys):
        p = self.scores_csv(tmp_path, [("smape", "s_x", "P0", 0.0)])
        assert main(["rate", str(p)]) == 0
        assert capsys.readouterr().out.strip() == "smape P0: s_x=1"

    def test_single_model_nonzero_rates_worst(self, tmp_path, capsys):
        p = self.scores_csv(tmp_path, [("smape", "s_x", "P0", 7.0)])
        assert main(["rate", str(p)]) == 0
        assert capsys.readouterr().out.strip() == "smape P0: s_x=3"

    def test_levels_flag_honored(self, tmp_path, capsys):
        p = self.scores_csv(tmp_path, [("smape", "s_x", "P0", 7.0)])
        assert main(["rate", str(p), "--l-levels", "5"]) == 0
        assert capsys.readouterr().out.strip() == "smape P0: s_x=5"

    def test_direction_auto_flips_accuracy_fractions(self, tmp_path, capsys):
        rows = [("sign_accuracy", "good", "P0", 90.0),
                ("sign_accuracy", "bad", "P0", 10.0)]
        p = self.scores_csv(tmp_path, rows)
        assert main(["rate", str(p), "--l-levels", "2"]) == 0
        assert capsys.readouterr().out.strip() == "sign_accuracy P0: bad=2 good=1"

    def test_direction_lower_forced(self, tmp_path, capsys):
        rows = [("sign_accuracy", "good", "P0", 90.0),
                ("sign_accuracy", "bad", "P0", 10.0)]
        p = self.scores_csv(tmp_path, rows)
        assert main(["rate", str(p), "--l-levels", "2", "--direction", "lower"]) == 0
        assert capsys.readouterr().out.strip() == "sign_accuracy P0: bad=1 good=2"

    def test_out_writes_rating_artifacts(self, tmp_path, capsys):
        rows = [("smape", "a", "P0", 0.1), ("smape", "b", "P0", 0.9),
                ("mase", "a", "P0", 1.0), ("mase", "b", "P0", 2.0)]
        p = self.scores_csv(tmp_path, rows)
        out = tmp_path / "rated"
        assert main(["rate", str(p), "--out", str(out), "--l-levels", "2"]) == 0
        ratings = json.loads((out / "ratings.json").read_text(encoding="utf-8"))
        assert ratings["smape"]["ratings"]["P0"] == {"a": 1, "b": 2}
        assert ratings["smape"]["ascending_ratings"]["P0"] == {"a": 1, "b": 2}
        orders = json.loads((out / "partial_orders.json").read_text(encoding="utf-8"))
        assert orders["mase"]["P0"] == [["a", 1.0], ["b", 2.0]]

    def test_metrics_and_perturbations_printed_sorted(self, tmp_path, capsys):
        rows = [("smape", "a", "P1", 0.1), ("smape", "a", "P0", 0.1),
                ("mase", "a", "P0", 1.0)]
        p = self.scores_csv(tmp_path, rows)
        assert main(["rate", str(p)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines == ["mase P0: a=3", "smape P0: a=3", "smape P1: a=3"]

    def test_broken_table_exit_two(self, tmp_path, capsys):
        p = tmp_path / "scores.csv"
        p.write_text("wrong,header\n", encoding="utf-8")
        assert main(["rate", str(p)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_duplicate_models_exit_three(self, tmp_path, capsys):
        rows = [("smape", "a", "P0", 0.1), ("smape", "a", "P0", 0.2)]
        p = self.scores_csv(tmp_path, rows)
        assert main(["rate", str(p)]) == 3
        assert "duplicate" in capsys.readouterr().err


class TestImagesCommand:
    @pytest.fixture()
    def single_company_config(self, corpus_dir, make_config):
        def fn(c):
            c["dataset"]["series"] = [{
                "path": str(corpus_dir / "META.csv"),
                "company": "META", "industry": "social technology",
            }]
            c["perturbations"] = [{"tag": "P0"}, {"tag": "P4"}, {"tag": "P5"}]
            c["distributions"] = []
            c["models"] = [{"kind": "random", "model_id": "s_r", "seed": 5}]

        return mutate_config(make_config("images.json"), fn)

    def test_one_png_per_tag_plus_line_plot(self, single_company_config, tmp_path,
                                            capsys):
        out = tmp_path / "imgs"
        assert main(["images", "--config", str(single_company_config),
                     "--out", str(out)]) == 0
        files = sorted(p.name for p in out.iterdir())
        # 8 windows x (P0, P4, P5, line)
        assert len(files) == 32
        for k in range(8):
            wid = f"META-{20 * k:05d}"
            for suffix in ("P0", "P4", "P5", "line"):
                assert f"{wid}_{suffix}.png" in files
        assert "wrote 32 images" in capsys.readouterr().out

    def test_rasters_are_128_square(self, single_company_config, tmp_path, capsys):
        out = tmp_path / "imgs"
        main(["images", "--config", str(single_company_config), "--out", str(out)])
        for p in out.iterdir():
            assert load_png(p).shape == (IMAGE_SIZE, IMAGE_SIZE, 3)

    def test_center_pixel_tag_differs_in_exactly_one_pixel(
            self, single_company_config, tmp_path, capsys):
        out = tmp_path / "imgs"
        main(["images", "--config", str(single_company_config), "--out", str(out)])
        base = load_png(out / "META-00000_P0.png")
        dotted = load_png(out / "META-00000_P4.png")
        diff = np.any(base != dotted, axis=2)
        assert diff.sum() == 1
        assert diff[64, 64]
        assert (dotted[64, 64] == 0).all()

    def test_deterministic_bytes(self, single_company_config, tmp_path, capsys):
        out1 = tmp_path / "imgs1"
        out2 = tmp_path / "imgs2"
        main(["images", "--config", str(single_company_config), "--out", str(out1)])
        main(["images", "--config", str(single_company_config), "--out", str(out2)])
        for p in sorted(out1.iterdir()):
            assert p.read_bytes() == (out2 / p.name).read_bytes()

    def test_broken_config_exit_two(self, make_config, capsys):
        p = mutate_config(make_config(), lambda c: c["metrics"].update(bogus=1))
        assert main(["images", "--config", str(p)]) == 2
