"""Shared fixtures: a small fast world for unit tests and session-scoped
runs of the calibrated default config for the acceptance checks."""

import json
from pathlib import Path

import numpy as np
import pytest

from tod.encoder import EncoderConfig, build_encoder
from tod.harness import (
    ExperimentConfig,
    run_experiment,
    run_image_sweep,
    run_multibias,
    run_unknown_bias,
)
from tod.world import WorldSpec, generate_schema

REPO_ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="session", autouse=True)
def _no_out_dir_env():
    import os
    old = os.environ.pop("TOD_OUT_DIR", None)
    yield
    if old is not None:
        os.environ["TOD_OUT_DIR"] = old


@pytest.fixture(scope="session")
def small_params():
    return build_encoder(EncoderConfig(vocab_size=512, token_dim=12,
                                       embed_dim=8, seed=11))


@pytest.fixture(scope="session")
def small_schema(small_params):
    return generate_schema(small_params, WorldSpec(
        seed=5, pool_size=4, theme_size=10, align_window=20))


@pytest.fixture(scope="session")
def default_config():
    with open(REPO_ROOT / "default.json", encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


@pytest.fixture(scope="session")
def standard_run(default_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("standard")
    manifest = run_experiment(default_config, out_dir=out)
    return manifest, out


@pytest.fixture(scope="session")
def sweep_rows(default_config, tmp_path_factory):
    return run_image_sweep(default_config,
                           out_dir=tmp_path_factory.mktemp("sweep"))


@pytest.fixture(scope="session")
def multibias_rows(default_config, tmp_path_factory):
    return run_multibias(default_config,
                         out_dir=tmp_path_factory.mktemp("multibias"))


@pytest.fixture(scope="session")
def unknown_bias_rows(default_config, tmp_path_factory):
    return run_unknown_bias(default_config,
                            out_dir=tmp_path_factory.mktemp("unknown"))


@pytest.fixture()
def rng():
    return np.random.default_rng(123)
