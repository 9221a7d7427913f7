import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thermcount.config import (
    ExperimentConfig,
    apply_overrides,
    config_hash,
    load_config,
    paper_scale_config,
    parse_config,
    render_config,
    save_config,
)
from thermcount.errors import InvalidConfiguration


def test_default_roundtrip():
    cfg = ExperimentConfig()
    assert parse_config(render_config(cfg)) == cfg


def test_paper_scale_roundtrip_and_values():
    cfg = paper_scale_config()
    assert parse_config(render_config(cfg)) == cfg
    assert (cfg.scene.H, cfg.optim.lr, cfg.optim.epochs, cfg.objective.lam, cfg.objective.n) == (384, 1e-4, 500, 1.0, 6)


@settings(max_examples=40, deadline=None)
@given(
    lr=st.floats(1e-6, 1.0, allow_nan=False),
    epochs=st.integers(0, 1000),
    kappa=st.floats(1e-3, 10.0),
    mode=st.sampled_from(["none", "raw", "extractor"]),
    counts=st.tuples(st.integers(0, 5), st.integers(5, 40)),
    elong=st.floats(1.01, 3.0),
    seed=st.integers(0, 2**63),
)
def test_random_roundtrip(lr, epochs, kappa, mode, counts, elong, seed):
    cfg = apply_overrides(ExperimentConfig(), {
        "optim.lr": repr(lr), "optim.epochs": str(epochs), "objective.kappa": repr(kappa),
        "model.depth_mode": mode, "scene.count_range": f"{counts[0]},{counts[1]}",
        "scene.distractor_elongation": f"{elong},{elong + 0.5}", "scene.seed": str(seed),
    })
    assert parse_config(render_config(cfg)) == cfg


def test_file_roundtrip(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), {"data.root": "some dir/with spaces", "extractor.mode": "joint"})
    save_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_comments_and_partial_file():
    cfg = parse_config("# only a few keys\n\noptim.lr = 0.5\nmodel.depth_mode = raw\n")
    assert cfg.optim.lr == 0.5 and cfg.model.depth_mode == "raw"
    assert cfg.optim.epochs == ExperimentConfig().optim.epochs


@pytest.mark.parametrize("text", [
    "optim.learning_rate = 1",
    "nosuch.lr = 1",
    "lr = 1",
    "optim.lr 1",
    "optim.lr = fast",
    "optim.lr = 1\noptim.lr = 2",
    "scene.count_range = 4",
    "model.depth_mode = rgb",
    "objective.aux = mse",
    "objective.kappa = 0",
    "extractor.latent_mode = sometimes",
    "scene.H = 30",
    "optim.lr_schedule = step",
])
def test_rejects(text):
    with pytest.raises(InvalidConfiguration):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(InvalidConfiguration):
        load_config(tmp_path / "absent.txt")


def test_hash_ignores_output_dir_only():
    a = ExperimentConfig()
    b = apply_overrides(a, {"run.out": "elsewhere"})
    c = apply_overrides(a, {"optim.seed": "1"})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_overrides_do_not_mutate():
    a = ExperimentConfig()
    before = dataclasses.asdict(a)
    apply_overrides(a, {"optim.lr": "0.3"})
    assert dataclasses.asdict(a) == before
