from __future__ import annotations

import json
import time

import numpy as np
import pytest

from scalestf import io
from scalestf.cli import denoise_table, main
from scalestf.config import RunConfig, load_run_config, run_config_from_dict
from scalestf.errors import ConfigError
from scalestf.graphs import community_graph, graph_laplacian

TOY = {
    "n_communities": 2, "nodes_per_community": 3, "p_in": 0.9, "p_out": 0.2, "graph_seed": 3,
    "gpvar_steps": 400, "window": 4, "horizon": 3, "d_feature": 5, "d_node": 4, "rank": 2,
    "n_layers": 2, "epochs": 2, "batch_size": 8, "eval_stride": 2, "bench_nodes": [6, 12],
    "bench_repetitions": 3, "denoise_nodes": 8, "grad_check_seeds": 1, "energy_batches": 2,
}


@pytest.fixture
def toy_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**TOY, "out_dir": str(tmp_path / "run")}))
    return path


def run(*argv) -> int:
    return main([str(a) for a in argv])


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        g = cfg.gpvar()
        assert (cfg.n_communities * cfg.nodes_per_community, g.steps, g.noise_std) == (600, 30_000, 0.4)
        assert cfg.model(600).d_model == 96  # calendar off for GP-VAR

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="n_layer"):
            run_config_from_dict({"n_layer": 3})

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="epochs"):
            run_config_from_dict({"epochs": "ten"})
        with pytest.raises(ConfigError):
            run_config_from_dict({"export_csv": 1})

    def test_int_accepted_for_float(self):
        assert run_config_from_dict({"lr": 1}).lr == 1.0

    def test_overrides_win(self, toy_config):
        cfg = load_run_config(toy_config, {"seed": 9, "mode": "full"})
        assert cfg.seed == 9 and cfg.mode == "full" and cfg.window == 4

    def test_bad_values(self):
        for doc in ({"mode": "sparse"}, {"missing_ratio": 2.0}, {"gpvar_steps": 0}, {"noise_std": -1.0}):
            with pytest.raises(ConfigError):
                run_config_from_dict(doc)

    def test_missing_and_invalid_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "bad.json")

    def test_large_variant(self):
        g = run_config_from_dict({"gpvar_variant": "large"}).gpvar()
        assert g.noise_std == 0.75


class TestExitCodes:
    def test_config_error(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"epochz": 3}))
        assert run("train", "--config", path) == 2
        assert "epochz" in capsys.readouterr().err

    def test_steps_zero(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**TOY, "gpvar_steps": 0, "out_dir": str(tmp_path / "o")}))
        assert run("gen-data", "--config", path) == 2

    def test_missing_dataset(self, toy_config):
        assert run("train", "--config", toy_config) == 3

    def test_missing_checkpoint(self, toy_config):
        assert run("gen-data", "--config", toy_config) == 0
        assert run("eval", "--config", toy_config) == 3

    def test_numerical_failure(self, toy_config):
        assert run("gen-data", "--config", toy_config) == 0
        cfg = json.loads(toy_config.read_text())
        toy_config.write_text(json.dumps({**cfg, "lr": 1e300}))
        with pytest.warns(RuntimeWarning):
            assert run("train", "--config", toy_config) == 4


class TestGenData:
    def test_hash_reproducible_and_seed_sensitive(self, toy_config, tmp_path):
        assert run("gen-data", "--config", toy_config) == 0
        meta1 = json.loads((tmp_path / "run" / "dataset_meta.json").read_text())
        assert run("gen-data", "--config", toy_config) == 0
        meta2 = json.loads((tmp_path / "run" / "dataset_meta.json").read_text())
        assert meta1["content_hash"] == meta2["content_hash"] == io.file_hash(tmp_path / "run" / "dataset.stfd")
        assert run("gen-data", "--config", toy_config, "--seed", 1, "--out", tmp_path / "other") == 0
        meta3 = json.loads((tmp_path / "other" / "dataset_meta.json").read_text())
        assert meta3["content_hash"] != meta1["content_hash"]
        assert meta1["seed"] == 0 and meta1["generator"]["noise_std"] == 0.4
        series, graph = io.read_dataset(tmp_path / "run" / "dataset.stfd")
        assert series.data.shape == (6, 400, 1) and graph is not None

    def test_resolved_config_persisted(self, toy_config, tmp_path):
        run("gen-data", "--config", toy_config, "--seed", 4)
        resolved = json.loads((tmp_path / "run" / "resolved_config.json").read_text())
        assert resolved["seed"] == 4 and resolved["gpvar_steps"] == 400
        assert run_config_from_dict(resolved) == load_run_config(toy_config, {"seed": 4})

    def test_csv_export(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**TOY, "gpvar_steps": 30, "export_csv": True, "out_dir": str(tmp_path / "o")}))
        assert run("gen-data", "--config", path) == 0
        assert len(io.read_csv(tmp_path / "o" / "dataset.csv")) == 6 * 30
        assert io.read_csv(tmp_path / "o" / "adjacency.csv")[0].keys() == {"i", "j", "w"}


class TestTrainEval:
    def test_toy_pipeline(self, toy_config, tmp_path, capsys):
        out = tmp_path / "run"
        t0 = time.perf_counter()
        assert run("gen-data", "--config", toy_config) == 0
        assert run("train", "--config", toy_config) == 0
        assert time.perf_counter() - t0 < 60
        for name in ("checkpoint.stfc", "history.csv", "metrics.json", "metrics.csv", "resolved_config.json"):
            assert (out / name).exists(), name
        rows = io.read_csv(out / "metrics.csv")
        assert rows[0].keys() == {"split", "horizon", "metric", "value"}
        assert len(io.read_csv(out / "history.csv")) == 2

        assert run("eval", "--config", toy_config) == 0
        first = (out / "eval_metrics.json").read_bytes()
        assert run("eval", "--config", toy_config) == 0
        assert (out / "eval_metrics.json").read_bytes() == first
        assert "| ScaleSTF | MAE |" in capsys.readouterr().out
        trained = json.loads(first)["test"]["mae_avg"]

        # a random-init checkpoint written with the same config must do worse
        from scalestf.model import init_params
        cfg, _ = io.read_checkpoint(out / "checkpoint.stfc")
        io.write_checkpoint(tmp_path / "init.stfc", cfg, init_params(cfg, 0))
        cfg_path = tmp_path / "init.json"
        cfg_path.write_text(json.dumps({**TOY, "out_dir": str(tmp_path / "init"), "checkpoint": str(tmp_path / "init.stfc"),
                                        "dataset": str(out / "dataset.stfd")}))
        assert run("eval", "--config", cfg_path) == 0
        untrained = json.loads((tmp_path / "init" / "eval_metrics.json").read_text())["test"]["mae_avg"]
        assert untrained > trained

        assert run("eval", "--config", toy_config, "--noise-std", 0.5) == 0
        noisy = json.loads((out / "eval_metrics.json").read_text())["test"]["mae_avg"]
        assert noisy != trained

    def test_missing_ratio_flag(self, toy_config, tmp_path):
        assert run("gen-data", "--config", toy_config) == 0
        assert run("train", "--config", toy_config, "--missing-ratio", 0.8) == 0
        assert json.loads((tmp_path / "run" / "resolved_config.json").read_text())["missing_ratio"] == 0.8

    def test_energy_and_embeddings(self, toy_config, tmp_path):
        out = tmp_path / "run"
        run("gen-data", "--config", toy_config)
        run("train", "--config", toy_config)
        assert run("energy-trace", "--config", toy_config) == 0
        assert len(io.read_csv(out / "energy_trace.csv")) == TOY["n_layers"] + 1
        assert run("export-embeddings", "--config", toy_config) == 0
        emb = io.read_csv(out / "embeddings.csv")
        assert len(emb) == 6 and len(emb[0]) == 1 + TOY["d_node"]

    def test_energy_subsample(self, toy_config, tmp_path):
        run("gen-data", "--config", toy_config)
        run("train", "--config", toy_config)
        cfg = json.loads(toy_config.read_text())
        toy_config.write_text(json.dumps({**cfg, "energy_subsample": 4}))
        assert run("energy-trace", "--config", toy_config) == 0


class TestDiagnostics:
    def test_bench_scaling(self, toy_config, tmp_path):
        assert run("bench-scaling", "--config", toy_config, "--nodes", "6,12") == 0
        rows = io.read_csv(tmp_path / "run" / "bench_scaling.csv")
        assert len(rows) == 4
        assert {(r["n_nodes"], r["mode"]) for r in rows} == {("6", "modulated"), ("6", "full"),
                                                             ("12", "modulated"), ("12", "full")}
        for n in ("6", "12"):
            by = {r["mode"]: r for r in rows if r["n_nodes"] == n}
            assert int(by["full"]["params"]) > int(by["modulated"]["params"])
            assert float(by["full"]["median_s"]) > 0 and float(by["modulated"]["iqr_s"]) >= 0

    def test_bench_capacity_row(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({**TOY, "attention_cap": 4 * 12 * 12 - 1, "out_dir": str(tmp_path / "b")}))
        assert run("bench-scaling", "--config", path) == 0
        rows = {(r["n_nodes"], r["mode"]): r for r in io.read_csv(tmp_path / "b" / "bench_scaling.csv")}
        assert rows[("12", "full")]["status"] == "capacity_error"
        assert rows[("6", "full")]["status"] == "ok"

    def test_denoise_demo(self, toy_config, tmp_path):
        assert run("denoise-demo", "--config", toy_config) == 0
        rows = io.read_csv(tmp_path / "run" / "denoise.csv")
        assert list(rows[0]) == ["beta", "closed_form_error", "first_order_error", "iterative_error"]
        zero = rows[0]
        assert float(zero["beta"]) == 0
        assert all(float(zero[k]) == 0 for k in ("closed_form_error", "first_order_error", "iterative_error"))
        fo = [float(r["first_order_error"]) for r in rows[1:]]
        for small, big in zip(fo, fo[1:]):
            assert 3.2 <= big / small <= 4.8

    def test_denoise_table_direct(self):
        lap = graph_laplacian(community_graph(2, 4, 0.8, 0.2, 0))
        rows = denoise_table(lap, np.random.default_rng(0).standard_normal((8, 1)), [0.0, 0.01, 0.005])
        assert rows[1][2] / rows[2][2] == pytest.approx(4.0, rel=0.2)
        assert max(r[1] for r in rows) < 1e-8 and max(r[3] for r in rows) < 1e-6

    def test_grad_check(self, toy_config, tmp_path):
        assert run("grad-check", "--config", toy_config) == 0
        rows = io.read_csv(tmp_path / "run" / "grad_check.csv")
        assert {"model.modulated", "model.full", "layer_norm"} <= {r["target"] for r in rows}
        assert max(float(r["max_rel_error"]) for r in rows) < 1e-4

    def test_idempotent_outputs(self, toy_config, tmp_path):
        out = tmp_path / "run"
        run("denoise-demo", "--config", toy_config)
        first = io.file_hash(out / "denoise.csv")
        run("denoise-demo", "--config", toy_config)
        assert io.file_hash(out / "denoise.csv") == first

    def test_argparse_rejects_bad_mode(self, toy_config):
        with pytest.raises(SystemExit):
            run("train", "--config", toy_config, "--mode", "sparse")
