import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from thermcount.errors import InvalidInput, InvalidParameter, MissingArtifact, ParseError
from thermcount.extractor import (
    ConditionalDenoiser,
    FixedLatent,
    PretrainConfig,
    build_schedule,
    default_huber_c,
    denoise_step,
    extract_features,
    load_extractor,
    pretrain_extractor,
    pretraining_loss,
    pseudo_huber,
    reinject_noise,
    sample_fixed_latent,
    save_extractor,
    schedule_error_surrogate,
)
from thermcount.scenes import SceneGenConfig, generate_scene, person_target


@pytest.fixture(scope="module")
def schedule():
    return build_schedule(1000, "cosine")


@pytest.fixture
def model(schedule):
    torch.manual_seed(0)
    return ConditionalDenoiser(schedule)


class TestSchedule:
    @pytest.mark.parametrize("kind", ["cosine", "cosine_offset"])
    @pytest.mark.parametrize("T", [2, 10, 1000])
    def test_invariants_exhaustive(self, kind, T):
        s = build_schedule(T, kind)
        assert s.alpha(0) == 1.0 and s.sigma(0) == 0.0
        a, sg = np.array(s.alphas), np.array(s.sigmas)
        assert np.max(np.abs(a**2 + sg**2 - 1)) <= 1e-12
        assert np.all(np.diff(a) < 0)
        assert np.all(np.diff(sg) > 0)

    def test_cosine_closed_form(self, schedule):
        # alpha(T/2) = cos(pi/4)
        assert schedule.alpha(500) == pytest.approx(math.sqrt(0.5), abs=1e-15)

    def test_bad_T(self):
        with pytest.raises(InvalidParameter):
            build_schedule(1)

    def test_bad_kind(self):
        with pytest.raises(InvalidParameter):
            build_schedule(10, "linear")

    def test_out_of_range_tau(self, schedule):
        with pytest.raises(InvalidParameter):
            schedule.alpha(1001)
        with pytest.raises(InvalidParameter):
            schedule.sigma(2.5)

    def test_subsequence(self, schedule):
        assert schedule.subsequence(1) == [1000]
        assert schedule.subsequence(4) == [1000, 750, 500, 250]


class TestFixedLatent:
    def test_regenerates(self):
        a = sample_fixed_latent((4, 16, 16), 123)
        b = sample_fixed_latent((4, 16, 16), 123)
        assert a == b and np.array_equal(a.values, b.values)

    def test_seeds_differ(self):
        a = sample_fixed_latent((4, 16, 16), 1)
        b = sample_fixed_latent((4, 16, 16), 2)
        assert not np.array_equal(a.values, b.values)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**64 - 1))
    def test_clt_bounds(self, seed):
        # 1024 standard normal draws: mean within 4 standard errors, std loosely near 1
        v = sample_fixed_latent((4, 16, 16), seed).values
        assert abs(v.mean()) <= 4 / math.sqrt(1024)
        assert 0.85 <= v.std() <= 1.15

    def test_known_stream(self):
        # PCG64 with seed 0 is a fixed, documented numpy stream
        v = sample_fixed_latent((3,), 0).values
        ref = np.random.Generator(np.random.PCG64(0)).standard_normal(3)
        assert np.array_equal(v, ref)

    def test_dict_roundtrip(self):
        a = sample_fixed_latent((2, 4, 4), 9)
        assert FixedLatent.from_dict(a.to_dict()) == a

    def test_bad_shape(self):
        with pytest.raises(InvalidParameter):
            sample_fixed_latent((4, 0, 3), 0)


class TestDenoiser:
    def test_shapes(self, model):
        cond = torch.rand(2, 1, 32, 48)
        z = torch.randn(2, 4, 8, 12)
        z0, h = denoise_step(model, z, 1000, cond)
        assert z0.shape == z.shape
        assert h.shape == (2, 16, 8, 12)

    def test_pure(self, model):
        cond = torch.rand(1, 1, 32, 32)
        z = torch.randn(1, 4, 8, 8)
        a = denoise_step(model, z, 300, cond)
        b = denoise_step(model, z, 300, cond)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_zero_init_output(self, model):
        z0, _ = denoise_step(model, torch.randn(3, 4, 8, 8), 1000, torch.rand(3, 1, 32, 32))
        assert torch.count_nonzero(z0) == 0

    def test_shape_mismatch(self, model):
        with pytest.raises(InvalidInput):
            denoise_step(model, torch.randn(1, 4, 9, 8), 10, torch.rand(1, 1, 32, 32))
        with pytest.raises(InvalidInput):
            denoise_step(model, torch.randn(1, 3, 8, 8), 10, torch.rand(1, 1, 32, 32))


class TestReinject:
    def test_tau_zero_identity(self, schedule):
        z0 = torch.randn(2, 4, 8, 8)
        out = reinject_noise(z0, 0, schedule, torch.Generator().manual_seed(0))
        assert torch.equal(out, z0)

    def test_zero_noise_stream(self, schedule):
        z0 = torch.randn(2, 4, 8, 8)
        out = reinject_noise(z0, 400, schedule, lambda shape: torch.zeros(shape))
        assert torch.equal(out, schedule.alpha(400) * z0)

    def test_monte_carlo_moments(self, schedule):
        tau = 500
        z0 = torch.full((10_000, 1, 2, 2), 0.3, dtype=torch.float64)
        z = reinject_noise(z0, tau, schedule, torch.Generator().manual_seed(5))
        var = z.var(dim=0)
        # chi-square with 9,999 dof: 5% band is > 3 standard deviations of the sample variance
        assert torch.all((var / schedule.sigma(tau) ** 2 - 1).abs() < 0.05)
        assert torch.all((z.mean(dim=0) - 0.3 * schedule.alpha(tau)).abs() < 4 * schedule.sigma(tau) / 100)

    def test_generator_list(self, schedule):
        z0 = torch.zeros(2, 1, 3, 3)
        gens = [torch.Generator().manual_seed(1), torch.Generator().manual_seed(1)]
        out = reinject_noise(z0, 700, schedule, gens)
        assert torch.equal(out[0], out[1])


class TestExtract:
    def test_single_step_deterministic_and_seed_free(self, model):
        lat = sample_fixed_latent((4, 8, 8), 0)
        cond = torch.rand(2, 1, 32, 32)
        a = extract_features(model, lat, cond, 1, rng_seed=1).values
        b = extract_features(model, lat, cond, 1, rng_seed=2).values
        assert torch.equal(a, b)

    def test_multi_step_consumes_seed(self, schedule):
        torch.manual_seed(1)
        m = ConditionalDenoiser(schedule)
        torch.nn.init.normal_(m.out.weight, std=0.1)  # a zero head would make noise irrelevant
        lat = sample_fixed_latent((4, 8, 8), 0)
        cond = torch.rand(1, 1, 32, 32)
        a = extract_features(m, lat, cond, 3, rng_seed=7).values
        b = extract_features(m, lat, cond, 3, rng_seed=8).values
        c = extract_features(m, lat, cond, 3, rng_seed=7).values
        assert not torch.equal(a, b)
        assert torch.equal(a, c)

    def test_provenance(self, model):
        lat = sample_fixed_latent((4, 8, 8), 42)
        f = extract_features(model, lat, torch.rand(32, 32), 2, rng_seed=3)
        assert (f.n_steps, f.latent_seed, f.rng_seed) == (2, 42, 3)
        assert torch.isfinite(f.values).all()

    def test_bad_steps(self, model):
        with pytest.raises(InvalidParameter):
            extract_features(model, sample_fixed_latent((4, 8, 8), 0), torch.rand(32, 32), 0)

    def test_checkpoint_roundtrip(self, model, tmp_path):
        lat = sample_fixed_latent((4, 8, 8), 11)
        save_extractor(tmp_path / "e.ckpt", model, lat, step=17)
        m2, lat2, step = load_extractor(tmp_path / "e.ckpt")
        cond = torch.rand(2, 1, 32, 32)
        assert step == 17 and lat2 == lat
        assert torch.equal(extract_features(model, lat, cond).values, extract_features(m2, lat2, cond).values)

    def test_checkpoint_errors(self, model, tmp_path):
        with pytest.raises(MissingArtifact):
            load_extractor(tmp_path / "absent.ckpt")
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 20)
        with pytest.raises(ParseError):
            load_extractor(p)
        save_extractor(p, model, sample_fixed_latent((4, 8, 8), 0))
        data = bytearray(p.read_bytes())
        data[8:12] = (99).to_bytes(4, "little")
        p.write_bytes(bytes(data))
        with pytest.raises(ParseError, match="version"):
            load_extractor(p)


class TestPseudoHuber:
    def test_zero(self):
        assert float(pseudo_huber(torch.zeros(5), 0.3)) == 0.0

    def test_quadratic_limit(self):
        v = float(pseudo_huber(torch.tensor([0.001], dtype=torch.float64), 1.0))
        assert v == pytest.approx(0.001**2 / 2, rel=0.01)

    def test_linear_limit(self):
        v = float(pseudo_huber(torch.tensor([100.0], dtype=torch.float64), 1.0))
        assert v == pytest.approx(100 - 1, rel=0.02)

    def test_bad_c(self):
        with pytest.raises(InvalidParameter):
            pseudo_huber(torch.ones(2), 0.0)

    def test_default_c(self):
        assert default_huber_c(1024) == pytest.approx(0.00054 * 32)


class TestSurrogate:
    def test_values(self, schedule):
        assert schedule_error_surrogate(schedule, []) == 0.0
        assert schedule_error_surrogate(schedule, [1000]) == pytest.approx(math.sqrt(1000))

    def test_strictly_increasing_in_n(self, schedule):
        # extend one fixed subsequence a timestep at a time
        seq = schedule.subsequence(8)
        ext = [schedule_error_surrogate(schedule, seq[:n]) for n in range(0, 9)]
        assert all(b > a for a, b in zip(ext, ext[1:]))

    def test_non_monotone(self, schedule):
        with pytest.raises(InvalidInput):
            schedule_error_surrogate(schedule, [10, 20])
        with pytest.raises(InvalidInput):
            schedule_error_surrogate(schedule, [2000])


def _toy_pairs(n, seed=0):
    cfg = SceneGenConfig(H=32, W=32, seed=seed)
    scenes = [generate_scene(cfg, i) for i in range(n)]
    return np.stack([s.depth_est for s in scenes]), np.stack([person_target(s) for s in scenes])


class TestPretrain:
    def test_overfit_one_scene(self, schedule):
        conds, targets = _toy_pairs(1)
        res = pretrain_extractor(conds, targets, schedule, PretrainConfig(steps=200, batch_size=4, cond_dropout=0.0))
        assert np.mean(res.losses[-20:]) < np.mean(res.losses[:20])

    @pytest.mark.parametrize("p", [0.0, 1.0])
    def test_dropout_fraction(self, schedule, p):
        conds, targets = _toy_pairs(2)
        res = pretrain_extractor(conds, targets, schedule, PretrainConfig(steps=1000, batch_size=1, cond_dropout=p))
        assert res.dropped_fraction == p

    def test_empty(self, schedule):
        with pytest.raises(InvalidInput):
            pretrain_extractor(np.zeros((0, 32, 32)), np.zeros((0, 4, 8, 8)), schedule)

    def test_loss_gradient_finite_differences(self, schedule):
        torch.manual_seed(3)
        m = ConditionalDenoiser(schedule).double()
        torch.nn.init.normal_(m.out.weight, std=0.2)
        conds, targets = _toy_pairs(2)
        target = torch.tensor(targets)
        cond = torch.tensor(conds)[:, None]
        tau = torch.tensor([300, 800])
        eps = torch.randn(target.shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        keep = torch.tensor([1.0, 0.0], dtype=torch.float64)
        c = 0.05

        def loss():
            return pretraining_loss(m, target, cond, tau, eps, keep, c)

        params = [p for p in m.parameters()]
        loss().backward()
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(40):
            p = params[rng.integers(len(params))]
            i = int(rng.integers(p.numel()))
            g = p.grad.reshape(-1)[i].item()
            h = 1e-6
            with torch.no_grad():
                flat = p.data.reshape(-1)
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
            fd = (up - down) / (2 * h)
            assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g), 1e-8), (fd, g)
            checked += 1
        assert checked >= 32

    @pytest.mark.slow
    def test_trained_beats_untrained(self, schedule):
        cfg = SceneGenConfig()
        scenes = [generate_scene(cfg, i) for i in range(220)]
        conds = np.stack([s.depth_est for s in scenes])
        targets = np.stack([person_target(s) for s in scenes])
        torch.manual_seed(0)
        res = pretrain_extractor(conds[:200], targets[:200], schedule, PretrainConfig(steps=2000))
        torch.manual_seed(1)
        fresh = ConditionalDenoiser(schedule)
        lat = sample_fixed_latent((4, 16, 16), 0)
        cond = torch.tensor(conds[200:], dtype=torch.float32)[:, None]
        tgt = torch.tensor(targets[200:], dtype=torch.float32)
        c = default_huber_c(tgt[0].numel())
        with torch.no_grad():
            trained = pseudo_huber(denoise_step(res.model, lat.tensor(), 1000, cond)[0] - tgt, c)
            untrained = pseudo_huber(denoise_step(fresh, lat.tensor(), 1000, cond)[0] - tgt, c)
        assert float(trained) < float(untrained)
