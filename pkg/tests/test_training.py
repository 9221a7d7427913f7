import math

import numpy as np
import pytest
import torch

from thermcount.checkpoint import load_checkpoint, save_checkpoint
from thermcount.config import ExperimentConfig, apply_overrides
from thermcount.errors import InvalidConfiguration, NumericFailure
from thermcount.extractor import ConditionalDenoiser, build_schedule, extractor_payload, sample_fixed_latent
from thermcount.scenes import generate_scene
from thermcount.training import Trainer, derived_seed, parameter_vector, stack_scenes

SMALL = {
    "scene.H": "32", "scene.W": "32", "scene.count_range": "2,8",
    "data.n_train": "12", "data.n_test": "4",
    "optim.batch_size": "4", "optim.epochs": "8", "optim.eval_every": "2",
    "extractor.pretrain_steps": "10", "model.depth_mode": "none",
}


@pytest.fixture(scope="module")
def data():
    cfg = apply_overrides(ExperimentConfig(), SMALL)
    scenes = [generate_scene(cfg.scene, i) for i in range(16)]
    return stack_scenes(scenes[:12], 4.0, 6), stack_scenes(scenes[12:], 4.0, 6)


@pytest.fixture(scope="module")
def ext_payload():
    torch.manual_seed(0)
    model = ConditionalDenoiser(build_schedule(1000))
    torch.nn.init.normal_(model.out.weight, std=0.05)
    return extractor_payload(model, sample_fixed_latent((4, 8, 8), 0))


def make(data, ext=None, **overrides):
    cfg = apply_overrides(ExperimentConfig(), {**SMALL, **{k.replace("__", "."): str(v) for k, v in overrides.items()}})
    return Trainer(cfg, data[0], data[1], ext if cfg.model.depth_mode == "extractor" else None)


def test_derived_seed_properties():
    assert derived_seed(1, 2, 3) == derived_seed(1, 2, 3)
    assert len({derived_seed(0, p, 5) for p in range(1, 6)}) == 5
    assert 0 <= derived_seed(2**64 - 1, 7) < 2**63


def test_batches_cover_each_epoch(data):
    tr = make(data)
    idx = torch.cat([tr.batch_indices(s) for s in range(tr.steps_per_epoch)])
    assert sorted(idx.tolist()) == list(range(12))
    assert not torch.equal(tr.batch_indices(0), tr.batch_indices(tr.steps_per_epoch))


def test_cosine_learning_rate(data):
    tr = make(data)
    total = 8 * tr.steps_per_epoch
    assert tr.learning_rate(0) == pytest.approx(1e-3)
    assert tr.learning_rate(total // 2) == pytest.approx(0.5e-3)
    assert tr.learning_rate(total) == pytest.approx(0.0, abs=1e-15)
    assert make(data, optim__lr_schedule="constant").learning_rate(total) == pytest.approx(1e-3)


@pytest.mark.parametrize("mode", [
    {"model__depth_mode": "none"},
    {"model__depth_mode": "extractor"},
    {"model__depth_mode": "extractor", "model__n_steps": 2, "extractor__latent_mode": "resampled"},
])
def test_identical_runs(data, ext_payload, mode):
    a, b = make(data, ext_payload, **mode), make(data, ext_payload, **mode)
    for _ in range(6):
        assert a.train_step() == b.train_step()
    assert torch.equal(parameter_vector(a.model), parameter_vector(b.model))
    assert a.evaluate(data[1]) == b.evaluate(data[1])


@pytest.mark.parametrize("mode", [
    {"model__depth_mode": "raw"},
    {"model__depth_mode": "extractor", "model__n_steps": 2, "extractor__latent_mode": "resampled"},
])
def test_resume_matches_uninterrupted(data, ext_payload, tmp_path, mode):
    ref = make(data, ext_payload, **mode)
    ref_losses = [ref.train_step() for _ in range(20)]

    first = make(data, ext_payload, **mode)
    for _ in range(10):
        first.train_step()
    save_checkpoint(tmp_path / "ck", first.checkpoint_payload(ext_payload))
    del first
    resumed = make(data, ext_payload, **mode)
    resumed.load_state_dict(load_checkpoint(tmp_path / "ck", kind="counting")["trainer"])
    after = [resumed.train_step() for _ in range(10)]
    assert np.max(np.abs(np.array(after) - np.array(ref_losses[10:]))) <= 1e-6
    assert torch.allclose(parameter_vector(resumed.model), parameter_vector(ref.model), atol=1e-6)


def test_zero_lambda_logs_pa_but_ignores_it(data):
    with_pa = make(data, objective__aux="pa", objective__lam=0.0)
    without = make(data, objective__aux="none")
    for _ in range(8):
        with_pa.train_step()
        without.train_step()
    assert torch.equal(parameter_vector(with_pa.model), parameter_vector(without.model))
    assert all(a > 0 for a in with_pa.history.aux)
    assert with_pa.history.reg == without.history.reg


def test_pa_changes_trajectory(data):
    a = make(data, objective__aux="pa", objective__lam=1.0)
    b = make(data, objective__aux="none")
    for _ in range(4):
        a.train_step()
        b.train_step()
    assert not torch.equal(parameter_vector(a.model), parameter_vector(b.model))


def test_frozen_extractor_untouched(data, ext_payload):
    tr = make(data, ext_payload, model__depth_mode="extractor")
    before = parameter_vector(tr.model.extractor).clone()
    for _ in range(3):
        tr.train_step()
    assert torch.equal(before, parameter_vector(tr.model.extractor))


def test_joint_extractor_moves(data, ext_payload):
    tr = make(data, ext_payload, model__depth_mode="extractor", extractor__mode="joint")
    before = parameter_vector(tr.model.extractor).clone()
    for _ in range(3):
        tr.train_step()
    assert not torch.equal(before, parameter_vector(tr.model.extractor))


def test_fit_records_evaluations(data):
    tr = make(data)
    seen = []
    tr.fit(on_eval=lambda t, m: seen.append(m["epoch"]))
    assert seen == [2, 4, 6, 8]
    m = tr.history.evals[-1]
    assert m["game0"] == m["mae"]
    assert m["game0"] <= m["game1"] <= m["game2"] <= m["game3"]
    assert len(tr.history.epoch_losses(tr.steps_per_epoch)) == 8


def test_non_finite_loss_aborts(data):
    tr = make(data, optim__lr=1e30, optim__lr_schedule="constant")
    with pytest.raises(NumericFailure):
        for _ in range(20):
            tr.train_step()


def test_extractor_mode_requires_payload(data):
    cfg = apply_overrides(ExperimentConfig(), {**SMALL, "model.depth_mode": "extractor"})
    with pytest.raises(InvalidConfiguration):
        Trainer(cfg, *data)


def test_prediction_readout_scale(data):
    tr = make(data)
    cells = tr.predict_cells(data[1])
    with torch.no_grad():
        raw, _ = tr.model(data[1].thermal, data[1].depth)
    assert torch.allclose(cells * tr.cfg.objective.density_scale, raw)
    assert math.isfinite(float(cells.sum()))
