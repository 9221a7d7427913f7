import dataclasses

import numpy as np
import pytest

from thermcount.errors import InvalidInput, InvalidParameter, MissingArtifact, ParseError
from thermcount.metrics_density import rasterize_density
from thermcount.scenes import (
    Scene,
    SceneGenConfig,
    ambient_pattern,
    degrade_depth,
    generate_dataset,
    generate_scene,
    load_manifest,
    load_scene,
    read_pgm16,
    person_target,
    sample_layout,
    save_scene,
    warp_field,
    write_pgm16,
)

SMALL = SceneGenConfig(count_range=(3, 12), seed=11)


def test_empty_scene_is_ambient():
    cfg = SceneGenConfig(count_range=(0, 0), distractor_rate=0, ambient_noise_std=0)
    s = generate_scene(cfg, 3)
    assert s.points.count() == 0
    np.testing.assert_array_equal(s.thermal, np.clip(ambient_pattern(64, 64), 0, 1))


def test_deterministic():
    a, b = generate_scene(SMALL, 5), generate_scene(SMALL, 5)
    for f in ("thermal", "depth_gt", "depth_est"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
    assert a.points == b.points and a.seed == b.seed
    c = generate_scene(SMALL, 6)
    assert not np.array_equal(a.thermal, c.thermal)


def test_fixed_count():
    s = generate_scene(dataclasses.replace(SMALL, count_range=(10, 10)), 0)
    assert s.points.count() == 10


def test_grids_in_unit_range_and_counts_in_range():
    for i in range(10):
        s = generate_scene(SMALL, i)
        assert 3 <= s.points.count() <= 12
        for g in (s.thermal, s.depth_gt, s.depth_est):
            assert g.shape == (64, 64) and g.min() >= 0 and g.max() <= 1


def test_no_rgb_anywhere():
    names = {f.name for f in dataclasses.fields(Scene)}
    assert not any("rgb" in n.lower() for n in names)


@pytest.mark.parametrize("kw", [dict(count_range=(5, 2)), dict(H=16), dict(person_intensity=0.0),
                                dict(perspective_strength=1.5), dict(distractor_rate=float("nan"))])
def test_bad_config(kw):
    with pytest.raises(InvalidParameter):
        SceneGenConfig(**kw)


def test_mass_matches_count():
    for i in range(5):
        s = generate_scene(SMALL, i)
        assert abs(rasterize_density(s.points, 4).sum() - s.points.count()) <= 1e-6


def test_depth_discriminates_people_from_distractors():
    cfg = SceneGenConfig(seed=3)
    person_d, distractor_d = [], []
    for i in range(100):
        layout = sample_layout(cfg, i)
        s = generate_scene(cfg, i)

        def at(pts):
            return s.depth_gt[np.minimum(pts[:, 1].astype(int), 63), np.minimum(pts[:, 0].astype(int), 63)]
        person_d.extend(at(layout.persons))
        distractor_d.extend(at(layout.distractors))
    assert np.mean(person_d) > np.mean(distractor_d)


class TestDegrade:
    def setup_method(self):
        self.d = generate_scene(SMALL, 0).depth_gt

    def test_identity(self):
        np.testing.assert_array_equal(degrade_depth(self.d, 1, 0, 0, 1), self.d)

    def test_affine(self):
        np.testing.assert_allclose(degrade_depth(self.d, 0.8, 0.1, 0, 1), 0.8 * self.d + 0.1, atol=1e-15)

    def test_warp_amplitude(self):
        dy, dx = warp_field((64, 64), 2.0, 5)
        mag = np.hypot(dy, dx)
        assert mag.mean() <= 2.0 and mag.max() <= 2.0 + 1e-12
        assert mag.max() > 1.0  # actually displaces

    def test_systematic(self):
        a = degrade_depth(self.d, 0.8, 0.1, 2.0, 4)
        np.testing.assert_array_equal(a, degrade_depth(self.d, 0.8, 0.1, 2.0, 4))
        assert not np.array_equal(a, degrade_depth(self.d, 0.8, 0.1, 2.0, 5))

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidInput):
            degrade_depth(self.d + 1.0, 1, 0, 0, 0)


def test_person_target_shape_and_signal():
    s = generate_scene(SMALL, 2)
    t = person_target(s)
    assert t.shape == (4, 16, 16)
    assert t.min() >= -1 and t.max() <= 1
    empty = generate_scene(dataclasses.replace(SMALL, count_range=(0, 0)), 2)
    assert person_target(empty)[3].max() == -1.0


class TestDisk:
    def test_roundtrip(self, tmp_path):
        s = generate_scene(SMALL, 4)
        loaded = load_scene(save_scene(s, tmp_path / "s"))
        for f in ("thermal", "depth_gt", "depth_est"):
            assert np.abs(getattr(loaded, f) - getattr(s, f)).max() <= 1 / 65535 + 1e-9
        assert loaded.points == s.points and loaded.seed == s.seed and loaded.index == s.index

    def test_pixels_that_look_like_whitespace(self, tmp_path):
        # 0x0A20 and 0x2009 start with bytes a token scanner would skip
        img = np.array([[0x0A20, 0x2009], [0x0D0C, 0xFFFF]], dtype=np.float64) / 65535.0
        write_pgm16(tmp_path / "w.pgm", img)
        assert np.array_equal(read_pgm16(tmp_path / "w.pgm"), img)

    def test_truncated_pgm(self, tmp_path):
        d = save_scene(generate_scene(SMALL, 4), tmp_path / "s")
        raw = (d / "thermal.pgm").read_bytes()
        (d / "thermal.pgm").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ParseError, match="thermal.pgm"):
            load_scene(d)

    def test_bad_meta(self, tmp_path):
        d = save_scene(generate_scene(SMALL, 4), tmp_path / "s")
        (d / "meta").write_text("H=64\nnonsense\n")
        with pytest.raises(ParseError, match="meta"):
            load_scene(d)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(MissingArtifact):
            load_scene(tmp_path / "nope")

    def test_dataset(self, tmp_path):
        m = generate_dataset(SMALL, 25, tmp_path / "ds", n_test=5)
        assert len(m.entries) == 25 and len(m.split("test")) == 5
        again = load_manifest(tmp_path / "ds")
        assert again.config == SMALL
        assert [e.scene_id for e in again.entries] == [e.scene_id for e in m.entries]
        digest = again.digest()
        generate_dataset(SMALL, 25, tmp_path / "ds", n_test=5)
        assert load_manifest(tmp_path / "ds").digest() == digest
        scenes = again.load("test")
        assert [s.index for s in scenes] == list(range(20, 25))

    def test_empty_dataset(self, tmp_path):
        with pytest.raises(InvalidInput):
            generate_dataset(SMALL, 0, tmp_path / "ds")
