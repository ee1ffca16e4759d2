"""Harness plumbing: config parsing, child seeding, artifact hashing, and
CLI contracts, exercised on a deliberately tiny world."""

import json

import numpy as np
import pytest

from tod import cli
from tod.encoder import EncoderConfig
from tod.harness import (
    DataConfig,
    ExperimentConfig,
    HarnessConfigError,
    load_config,
    resolve_out_dir,
    run_experiment,
    run_multibias,
    run_unknown_bias,
    stage_rng,
    verify_manifest,
    write_csv,
)
from tod.world import WorldSpec


def _tiny_config(**overrides) -> ExperimentConfig:
    base = dict(
        encoder=EncoderConfig(512, 12, 8, 11),
        world=WorldSpec(seed=5, pool_size=4, theme_size=10, align_window=20),
        data=DataConfig(n_text_per_group=8, n_val=40, n_test=40,
                        rho=0.9, noise_std=0.05),
        train={"total_epochs": 2, "warmup_epochs": 1, "batch_size": 16,
               "margin": 0.2, "learning_rate": 0.03},
        template_tokens=(1, 2, 3),
        seeds=(0, 1),
        sweep={"samples_per_group": [1, 2], "step_budget": 4},
        multibias={"n_bias_attrs": 2, "n_text_per_group": 4},
        unknown_bias={"n_aux_attrs": 2, "weight_decay": 0.01,
                      "n_val": 40, "n_test": 40},
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def test_config_round_trip():
    cfg = _tiny_config()
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_config_rejects_unknown_field():
    with pytest.raises(HarnessConfigError, match="unknown config field"):
        ExperimentConfig.from_dict({"learning_rate": 0.1})


@pytest.mark.parametrize("overrides", [
    {"seeds": ()},
    {"scenario": "grid_search"},
    {"selection": "median"},
])
def test_config_invariants(overrides):
    with pytest.raises(HarnessConfigError):
        _tiny_config(**overrides)


def test_bad_train_kwargs_surface_as_config_error():
    cfg = _tiny_config(train={"leraning_rate": 0.1})
    with pytest.raises(HarnessConfigError, match="train"):
        cfg.train_config(0)


def test_load_config_reads_repo_default():
    from pathlib import Path
    repo_root = Path(__file__).resolve().parents[1]
    cfg = load_config(repo_root / "default.json")
    assert cfg.seeds == (0, 1, 2)
    assert cfg.train["logit_scale"] == 4.0


def test_stage_rng_streams_are_stable_and_independent():
    a = stage_rng(7, "text").integers(1 << 30, size=4)
    b = stage_rng(7, "text").integers(1 << 30, size=4)
    c = stage_rng(7, "val").integers(1 << 30, size=4)
    d = stage_rng(8, "text").integers(1 << 30, size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    with pytest.raises(HarnessConfigError):
        stage_rng(7, "training")


def test_out_dir_env_override(tmp_path, monkeypatch):
    cfg = _tiny_config(out_dir=str(tmp_path / "from_cfg"))
    assert resolve_out_dir(cfg, tmp_path / "from_arg") == tmp_path / "from_arg"
    monkeypatch.setenv("TOD_OUT_DIR", str(tmp_path / "from_env"))
    assert resolve_out_dir(cfg, tmp_path / "from_arg") == tmp_path / "from_env"


def test_write_csv_is_deterministic(tmp_path):
    rows = [[1, 0.1234567890123, "x"], [2, 3.0, "y"]]
    write_csv(tmp_path / "a.csv", ["i", "v", "s"], rows)
    write_csv(tmp_path / "b.csv", ["i", "v", "s"], rows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_run_experiment_artifacts_and_manifest(tmp_path):
    cfg = _tiny_config()
    manifest = run_experiment(cfg, out_dir=tmp_path)
    for name in ("metrics.csv", "loss_curve.csv", "manifest.json"):
        assert (tmp_path / name).exists()
    assert verify_manifest(tmp_path)
    # hashes actually bind the content
    (tmp_path / "metrics.csv").write_text("tampered\n")
    assert not verify_manifest(tmp_path)
    assert set(manifest.aggregate) == {"zero_shot", "stp", "mtp"}
    for seed in cfg.seeds:
        assert str(seed) in manifest.per_seed


def test_aggregate_means_equal_mean_of_per_seed_rows(tmp_path):
    cfg = _tiny_config()
    manifest = run_experiment(cfg, out_dir=tmp_path)
    for method, stats in manifest.aggregate.items():
        per_seed = [manifest.per_seed[str(s)][method]["wg"] for s in cfg.seeds]
        assert stats["wg"]["mean"] == pytest.approx(np.mean(per_seed), abs=1e-15)


def test_multibias_validates_subset(tmp_path):
    cfg = _tiny_config()
    with pytest.raises(HarnessConfigError, match="hair_color"):
        run_multibias(cfg, bias_subset=["bias0", "hair_color"], out_dir=tmp_path)
    with pytest.raises(HarnessConfigError, match="at least 2"):
        run_multibias(cfg, bias_subset=["bias0"], out_dir=tmp_path)


def test_unknown_bias_validates_auxiliaries(tmp_path):
    cfg = _tiny_config()
    with pytest.raises(HarnessConfigError, match="target"):
        run_unknown_bias(cfg, auxiliary_attributes=["target"], out_dir=tmp_path)
    with pytest.raises(HarnessConfigError, match="aux9"):
        run_unknown_bias(cfg, auxiliary_attributes=["aux9"], out_dir=tmp_path)


def test_unknown_bias_report_shape_and_protocol(tmp_path):
    cfg = _tiny_config()
    rows = run_unknown_bias(cfg, out_dir=tmp_path)
    names = [r[0] for r in rows]
    assert names[0] == "zero_shot"
    assert set(names[1:]) == {"bias0", "aux0", "aux1"}
    for _, wg, avg, gap in rows:
        assert gap == pytest.approx(avg - wg, abs=1e-12)
    protocol = json.loads((tmp_path / "unknownbias_manifest.json").read_text())
    assert protocol["selection"] == "average"
    assert protocol["hidden_attribute"] == "bias0"


def test_cli_usage_errors_exit_2(capsys):
    assert cli.cli_main(["frobnicate"]) == 2
    capsys.readouterr()
    assert cli.cli_main(["run", "--config", "/nonexistent/config.json"]) == 2


def test_cli_run_and_generate_on_tiny_config(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(_tiny_config().to_dict()))
    out = tmp_path / "run"
    assert cli.cli_main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()
    gen = tmp_path / "gen"
    assert cli.cli_main(["generate", "--config", str(cfg_path), "--seed", "0",
                         "--out", str(gen)]) == 0
    assert (gen / "schema.json").exists()
    assert (gen / "text_train_seed0.jsonl").exists()
    assert (gen / "image_val_seed0.jsonl").exists()
    capsys.readouterr()


def test_cli_seed_override_restricts_to_one_seed(tmp_path):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(_tiny_config().to_dict()))
    out = tmp_path / "one"
    assert cli.cli_main(["run", "--config", str(cfg_path), "--seed", "5",
                         "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert list(manifest["per_seed"]) == ["5"]


def test_image_budget_scaling():
    from tod.harness import _image_budget_config
    cfg = _tiny_config()  # batch 16, step budget 4
    tc = _image_budget_config(cfg, seed=0, n_images=8)   # 1 step/epoch
    assert tc.total_epochs == 4
    tc = _image_budget_config(cfg, seed=0, n_images=64)  # 4 steps/epoch
    assert tc.total_epochs == 1
