import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from skthdr.data import (
    SceneConfig,
    build_split,
    expose,
    generate_scene,
    load_scene,
    mosaic,
    read_manifest,
    save_scene,
    shift_image,
    simulate_exposures,
    to_raw_bayer,
    write_manifest,
)
from skthdr.domain import RAW, demosaic_bilinear
from skthdr.errors import FormatError, ShapeMismatch
from skthdr.metrics import psnr

seeds = st.integers(0, 10_000)


@pytest.fixture
def cfg():
    return SceneConfig(height=32, width=32)


class TestGenerateScene:
    @given(seeds)
    def test_instance_count_and_partition(self, seed):
        cfg = SceneConfig(height=32, width=32)
        s = generate_scene(cfg, seed)
        assert cfg.min_instances <= s.n_instances <= cfg.max_instances
        assert set(np.unique(s.instances)) == set(range(s.n_instances))

    def test_deterministic(self, cfg):
        a, b = generate_scene(cfg, 7), generate_scene(cfg, 7)
        assert a.hdr_gt.tobytes() == b.hdr_gt.tobytes()
        np.testing.assert_array_equal(a.instances, b.instances)
        np.testing.assert_array_equal(a.motion, b.motion)

    def test_radiance_span(self, cfg):
        spans = [np.log10(s.hdr_gt.max() / s.hdr_gt.min()) for s in (generate_scene(cfg, k) for k in range(20))]
        assert min(spans) >= 3.0

    def test_normalised_and_reference_static(self, cfg):
        s = generate_scene(cfg, 3)
        assert s.hdr_gt.max() == pytest.approx(1.0)
        assert not s.motion[s.reference].any()

    def test_exposure_times_increasing(self):
        assert np.all(np.diff(SceneConfig(n_frames=5).times()) > 0)
        with pytest.raises(ValueError):
            SceneConfig(n_frames=2, exposure_times=(2.0, 1.0)).times()

    def test_generator_input(self, cfg):
        a = generate_scene(cfg, np.random.default_rng(5))
        b = generate_scene(cfg, np.random.default_rng(5))
        assert a.seed == b.seed and a.hdr_gt.tobytes() == b.hdr_gt.tobytes()


class TestExposures:
    def test_degenerate_pipeline(self, cfg):
        s = generate_scene(cfg, 1)
        s.motion[:] = 0
        s.noise_sigma = 0.0
        s.exposure_times = np.array([1.0, 2.0, 4.0])
        np.testing.assert_array_equal(expose(s, 0), np.round(s.hdr_gt * 255) / 255)

    def test_linear_in_exposure(self, cfg):
        s = generate_scene(cfg, 2)
        s.motion[:] = 0
        s.exposure_times = np.array([1.0, 2.0, 4.0])
        a = expose(s, 0, quantize=False)
        b = expose(s, 1, quantize=False)
        np.testing.assert_allclose(b[a < 0.5], 2 * a[a < 0.5])

    def test_saturation_asymmetry(self, cfg):
        short, long_ = [], []
        for seed in range(100):
            f = simulate_exposures(generate_scene(cfg, seed)).frames
            short.append((f[0] >= 1).mean())
            long_.append((f[-1] >= 1).mean())
        assert np.mean(long_) > np.mean(short)

    def test_quantised_levels(self, cfg):
        f = simulate_exposures(generate_scene(cfg, 4)).frames
        np.testing.assert_allclose(f * 255, np.round(f * 255), atol=1e-9)

    def test_shift_edge_replicates(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        out = shift_image(img, 1, 0)
        np.testing.assert_array_equal(out[0, 1:], img[0, :3])
        np.testing.assert_array_equal(out[0, 0], img[0, 0])


class TestRaw:
    def test_constant_round_trip(self):
        img = np.full((3, 4, 4), 0.25)
        np.testing.assert_allclose(demosaic_bilinear(mosaic(img)).data, img, atol=1e-15)

    def test_single_channel(self, cfg):
        raw = to_raw_bayer(simulate_exposures(generate_scene(cfg, 0)))
        assert raw.frames.shape[1] == 1 and raw.format == RAW

    def test_odd_dims(self):
        with pytest.raises(ShapeMismatch):
            mosaic(np.zeros((3, 5, 4)))

    def test_smooth_round_trip_psnr(self):
        cfg = SceneConfig(height=64, width=64, smooth=True)
        vals = [psnr(demosaic_bilinear(mosaic(g)).data, g)
                for g in (generate_scene(cfg, s).hdr_gt for s in range(20))]
        assert min(vals) > 35.0


class TestPersistence:
    def test_scene_round_trip(self, cfg, tmp_path):
        s = generate_scene(cfg, 9)
        stack = simulate_exposures(s)
        save_scene(tmp_path / "a.scn", s, stack)
        s2, stack2 = load_scene(tmp_path / "a.scn")
        np.testing.assert_array_equal(s2.hdr_gt, s.hdr_gt)
        np.testing.assert_array_equal(s2.instances, s.instances)
        np.testing.assert_array_equal(stack2.frames, stack.frames)
        assert s2.seed == 9

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.scn").write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(FormatError):
            load_scene(tmp_path / "bad.scn")

    def test_manifest(self, cfg, tmp_path):
        write_manifest(tmp_path / "m.json", {"train": [1, 2]}, cfg)
        doc = read_manifest(tmp_path / "m.json")
        assert doc["splits"]["train"] == [1, 2] and doc["scene_config"]["height"] == 32

    def test_build_split_raw(self, cfg):
        s = build_split(SceneConfig(height=16, width=16, n_frames=5), [1, 2], fmt=RAW)
        assert s.frames.shape == (2, 5, 1, 16, 16) and s.gt.shape == (2, 1, 16, 16)
        assert s.gt_rgb.shape == (2, 3, 16, 16) and s.reference == 2
