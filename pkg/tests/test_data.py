"""Noise models, image IO, patch sets, manifests, caches."""

import json

import numpy as np
import pytest

from danet.data import (
    ImagePairSet,
    NoiseModel,
    PairRecord,
    augment_with_generator,
    load_image,
    load_manifest,
    make_texture_image,
    make_texture_pairs,
    make_toy_image,
    make_toy_pairs,
    model_sampler,
    save_image,
    synth_noisy,
    synth_twin_set,
    write_cache,
)
from danet.tensor import ParamError, ShapeError, stream


@pytest.fixture
def rng():
    return np.random.default_rng(23)


class TestNoiseModel:
    def test_gaussian_stddev_map(self):
        m = NoiseModel("gaussian", sigma=0.07)
        x = np.random.default_rng(0).random((3, 8, 8))
        np.testing.assert_array_equal(m.stddev_map(x), np.full_like(x, 0.07))

    def test_signal_dependent_formula(self):
        m = NoiseModel("signal", sigma1=0.12, sigma2=0.03)
        x = np.array([[[0.0, 0.25, 1.0]]])
        want = np.sqrt(0.12**2 * x + 0.03**2)
        np.testing.assert_allclose(m.stddev_map(x), want)

    def test_signal_clamps_negative_intensity(self):
        m = NoiseModel("signal", sigma1=0.5, sigma2=0.1)
        x = np.array([[[-2.0]]])
        np.testing.assert_allclose(m.stddev_map(x), 0.1)

    def test_stripes_alternate_by_band(self):
        m = NoiseModel("stripes", sigma_lo=0.05, sigma_hi=0.2, band=2)
        x = np.zeros((1, 8, 4))
        sd = m.stddev_map(x)
        np.testing.assert_array_equal(sd[0, 0:2], 0.05)
        np.testing.assert_array_equal(sd[0, 2:4], 0.2)
        np.testing.assert_array_equal(sd[0, 4:6], 0.05)
        assert np.ptp(sd[0, :, :]) > 0  # varies down rows
        assert np.ptp(sd[0, 0, :]) == 0  # constant along a row

    def test_sample_statistics(self, rng):
        m = NoiseModel("gaussian", sigma=0.1)
        x = np.zeros((1, 128, 128))
        noise = m.sample(x, rng)
        assert noise.dtype == np.float32
        assert abs(float(noise.std()) - 0.1) < 0.005
        assert abs(float(noise.mean())) < 0.005

    def test_json_roundtrip(self):
        for m in (
            NoiseModel("gaussian", sigma=0.2),
            NoiseModel("signal", sigma1=0.1, sigma2=0.01),
            NoiseModel("stripes", sigma_lo=0.02, sigma_hi=0.3, band=3),
        ):
            assert NoiseModel.from_json(m.to_json()) == m

    def test_from_json_rejects_unknown_keys(self):
        with pytest.raises(ParamError, match="unknown"):
            NoiseModel.from_json({"kind": "gaussian", "sigma": 0.1, "what": 1})

    def test_invalid_parameters_all_reported(self):
        with pytest.raises(ParamError) as e:
            NoiseModel("stripes", sigma_lo=-1.0, band=0)
        assert "sigma_lo" in str(e.value) and "band" in str(e.value)

    def test_unknown_kind(self):
        with pytest.raises(ParamError):
            NoiseModel("poisson")


def test_synth_noisy_clip_option(rng):
    x = np.full((1, 32, 32), 0.95, dtype=np.float32)
    m = NoiseModel("gaussian", sigma=0.3)
    free = synth_noisy(x, m, np.random.default_rng(0))
    clipped = synth_noisy(x, m, np.random.default_rng(0), clip=True)
    assert free.max() > 1.0
    assert clipped.max() <= 1.0 and clipped.min() >= 0.0


def test_model_sampler_closes_over_model(rng):
    m = NoiseModel("gaussian", sigma=0.1)
    sampler = model_sampler(m)
    x = np.zeros((3, 16, 16), dtype=np.float32)
    out = sampler(x, rng)
    assert out.shape == x.shape
    assert 0.05 < float(out.std()) < 0.15


class TestImageIO:
    @pytest.mark.parametrize("channels", [1, 3])
    @pytest.mark.parametrize("bits", [8, 16])
    def test_roundtrip_within_quantization(self, tmp_path, rng, channels, bits):
        img = rng.random((channels, 12, 10)).astype(np.float32)
        path = tmp_path / "img.png"
        save_image(img, path, bits=bits)
        back = load_image(path)
        assert back.shape == img.shape
        assert back.dtype == np.float32
        tol = 0.5 / (255 if bits == 8 else 65535)
        assert float(np.abs(back - img).max()) <= tol + 1e-7

    def test_rgb_channel_order_preserved(self, tmp_path):
        img = np.zeros((3, 4, 4), dtype=np.float32)
        img[0] = 1.0  # pure red
        path = tmp_path / "red.png"
        save_image(img, path)
        back = load_image(path)
        np.testing.assert_array_equal(back[0], 1.0)
        np.testing.assert_array_equal(back[1:], 0.0)

    def test_rounding_is_half_away(self, tmp_path):
        # 128.5/255 must become 129, not banker's-rounded 128
        img = np.full((1, 2, 2), 128.5 / 255.0)
        path = tmp_path / "q.png"
        save_image(img, path, bits=8)
        assert int(load_image(path)[0, 0, 0] * 255 + 0.25) == 129

    def test_save_clips_out_of_range(self, tmp_path):
        img = np.array([[[-0.5, 1.5]]])
        path = tmp_path / "c.png"
        save_image(img, path)
        back = load_image(path)
        np.testing.assert_array_equal(back[0, 0], [0.0, 1.0])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "absent.png")

    def test_bad_bit_depth(self, tmp_path):
        with pytest.raises(ParamError):
            save_image(np.zeros((1, 2, 2)), tmp_path / "x.png", bits=12)

    def test_bad_channel_count(self, tmp_path):
        with pytest.raises(ShapeError):
            save_image(np.zeros((2, 4, 4)), tmp_path / "x.png")


class TestImagePairSet:
    def make_set(self, rng, n=3, shape=(3, 40, 40), **kw):
        records = []
        for i in range(n):
            clean = rng.random(shape).astype(np.float32)
            records.append(PairRecord(clean, clean + np.float32(0.01 * (i + 1)), "real", f"r{i}"))
        return ImagePairSet(records, **kw)

    def test_validation_errors(self, rng):
        good = rng.random((3, 8, 8)).astype(np.float32)
        with pytest.raises(ParamError):
            ImagePairSet([])
        with pytest.raises(ShapeError):
            ImagePairSet([PairRecord(good, good[:, :4])])
        with pytest.raises(ShapeError):
            ImagePairSet([PairRecord(good, good), PairRecord(good[:1], good[:1])])
        with pytest.raises(ParamError):
            ImagePairSet([PairRecord(good, good, source="fake")])
        with pytest.raises(ParamError):
            ImagePairSet([PairRecord(good, good)], patch_size=0)

    def test_patch_shapes_and_alignment(self, rng):
        """Each sampled pair must come from the same record and window; the
        per-record constant offset acts as a watermark."""
        ps = self.make_set(rng, patch_size=16)
        clean, noisy = ps.sample_patches(32, rng)
        assert clean.shape == noisy.shape == (32, 3, 16, 16)
        offsets = (noisy - clean).reshape(32, -1)
        for row in offsets:
            assert np.ptp(row) < 1e-6  # one record's watermark throughout
            assert any(abs(row[0] - 0.01 * (i + 1)) < 1e-6 for i in range(3))

    def test_patch_windows_vary(self, rng):
        ps = self.make_set(rng, n=1, patch_size=8)
        clean, _ = ps.sample_patches(16, rng)
        assert not all(np.array_equal(clean[0], c) for c in clean[1:])

    def test_augment_applies_same_transform_to_both(self, rng):
        ps = self.make_set(rng, patch_size=16)
        clean, noisy = ps.sample_patches(24, rng, augment=True)
        offsets = (noisy - clean).reshape(24, -1)
        for row in offsets:
            assert np.ptp(row) < 1e-6

    def test_batch_stream_deterministic(self, rng):
        ps = self.make_set(rng, patch_size=8)
        a = ps.batch_stream(seed=5, epoch=2)(10)
        b = ps.batch_stream(seed=5, epoch=2)(10)
        c = ps.batch_stream(seed=5, epoch=3)(10)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], c[0])

    def test_patch_larger_than_record(self, rng):
        ps = self.make_set(rng, shape=(3, 12, 12), patch_size=16)
        with pytest.raises(ShapeError):
            ps.sample_patches(1, rng)

    def test_stratified_sampling_hits_declared_fraction(self, rng):
        real = PairRecord(np.zeros((1, 16, 16), np.float32), np.zeros((1, 16, 16), np.float32), "real")
        synth = PairRecord(np.ones((1, 16, 16), np.float32), np.ones((1, 16, 16), np.float32), "synthetic")
        ps = ImagePairSet([real, synth, synth, synth], patch_size=8, synth_fraction=0.25)
        clean, _ = ps.sample_patches(2000, rng)
        frac = float(clean.mean())  # synthetic patches are all ones
        assert abs(frac - 0.25) < 0.04

    def test_unstratified_is_uniform_over_records(self, rng):
        real = PairRecord(np.zeros((1, 16, 16), np.float32), np.zeros((1, 16, 16), np.float32), "real")
        synth = PairRecord(np.ones((1, 16, 16), np.float32), np.ones((1, 16, 16), np.float32), "synthetic")
        ps = ImagePairSet([real, synth, synth, synth], patch_size=8)
        clean, _ = ps.sample_patches(2000, rng)
        assert abs(float(clean.mean()) - 0.75) < 0.04


class TestToyImages:
    def test_range_and_shape(self):
        img = make_toy_image(64, 3, stream(0, "toy"))
        assert img.shape == (3, 64, 64)
        assert img.dtype == np.float32
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
        assert float(img.std()) > 0.05  # actual structure, not a flat field

    def test_deterministic(self):
        a = make_toy_image(32, 1, stream(4, "t"))
        b = make_toy_image(32, 1, stream(4, "t"))
        assert np.array_equal(a, b)

    def test_make_toy_pairs(self):
        m = NoiseModel("gaussian", sigma=0.1)
        ps = make_toy_pairs(4, 32, m, seed=9)
        assert len(ps) == 4
        assert all(r.source == "real" for r in ps.records)
        resid = ps.records[0].noisy - ps.records[0].clean
        assert 0.05 < float(resid.std()) < 0.15
        again = make_toy_pairs(4, 32, m, seed=9)
        assert np.array_equal(ps.records[2].noisy, again.records[2].noisy)

    def test_texture_image_carries_white_detail(self):
        img = make_texture_image(64, 3, stream(3, "tex"))
        assert img.shape == (3, 64, 64)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0
        # neighbour differences are dominated by the micropattern, so their
        # std is close to sqrt(2) times its amplitude
        d = img[:, :, 1:] - img[:, :, :-1]
        assert 0.12 < float(d.std()) / np.sqrt(2) < 0.24
        # per-channel independence: fine detail does not repeat across channels
        corr = np.corrcoef(d[0].ravel(), d[1].ravel())[0, 1]
        assert abs(float(corr)) < 0.2

    def test_texture_pairs_deterministic(self):
        m = NoiseModel("gaussian", sigma=0.1)
        a = make_texture_pairs(3, 32, m, seed=6)
        b = make_texture_pairs(3, 32, m, seed=6)
        assert a.records[1].name == "tex001"
        assert np.array_equal(a.records[2].noisy, b.records[2].noisy)
        assert not np.array_equal(a.records[0].clean, a.records[1].clean)


class TestDerivedSets:
    def test_twin_set_shares_cleans_redraws_noise(self, rng):
        m = NoiseModel("gaussian", sigma=0.1)
        base = make_toy_pairs(3, 32, m, seed=1)
        twin = synth_twin_set(base, model_sampler(m), seed=2)
        for orig, copy in zip(base.records, twin.records):
            assert np.array_equal(orig.clean, copy.clean)
            assert not np.array_equal(orig.noisy, copy.noisy)
            assert copy.source == "synthetic"

    def test_augment_counts_and_fraction(self, rng):
        m = NoiseModel("gaussian", sigma=0.1)
        base = make_toy_pairs(4, 32, m, seed=1)
        pool = [r.clean for r in base.records]
        aug = augment_with_generator(base, pool, model_sampler(m), ratio=1.0, seed=5)
        assert len(aug) == 8
        assert sum(r.source == "synthetic" for r in aug.records) == 4
        assert aug.synth_fraction == 0.5
        half = augment_with_generator(base, pool, model_sampler(m), ratio=0.5, seed=5)
        assert len(half) == 6

    def test_augment_ratio_zero_keeps_base(self, rng):
        m = NoiseModel("gaussian", sigma=0.1)
        base = make_toy_pairs(2, 32, m, seed=1)
        aug = augment_with_generator(base, [base.records[0].clean], model_sampler(m), 0.0, 1)
        assert len(aug) == 2

    def test_augment_validation(self, rng):
        m = NoiseModel("gaussian", sigma=0.1)
        base = make_toy_pairs(2, 32, m, seed=1)
        with pytest.raises(ParamError):
            augment_with_generator(base, [], model_sampler(m), 1.0, 0)
        with pytest.raises(ParamError):
            augment_with_generator(base, [base.records[0].clean], model_sampler(m), -1.0, 0)


class TestManifests:
    def write(self, tmp_path, spec, name="set.json"):
        path = tmp_path / name
        path.write_text(json.dumps(spec))
        return path

    def test_explicit_pairs(self, tmp_path, rng):
        clean = rng.random((3, 16, 16)).astype(np.float32)
        noisy = np.clip(clean + 0.05, 0, 1).astype(np.float32)
        save_image(clean, tmp_path / "c.png", bits=16)
        save_image(noisy, tmp_path / "n.png", bits=16)
        ps = load_manifest(self.write(tmp_path, {
            "images": [{"clean": "c.png", "noisy": "n.png"}],
            "patch_size": 8, "epoch_patches": 40,
        }))
        assert len(ps) == 1 and ps.patch_size == 8 and ps.epoch_patches == 40
        np.testing.assert_allclose(ps.records[0].clean, clean, atol=1e-4)

    def test_noise_model_synthesis_is_deterministic(self, tmp_path, rng):
        clean = rng.random((1, 16, 16)).astype(np.float32)
        save_image(clean, tmp_path / "c.png", bits=16)
        spec = {
            "images": [{"clean": "c.png"}],
            "noise_model": {"kind": "gaussian", "sigma": 0.1},
            "noise_seed": 7,
        }
        a = load_manifest(self.write(tmp_path, spec, "a.json"))
        b = load_manifest(self.write(tmp_path, spec, "b.json"))
        assert np.array_equal(a.records[0].noisy, b.records[0].noisy)
        resid = a.records[0].noisy - a.records[0].clean
        assert 0.04 < float(resid.std()) < 0.2

    def test_missing_noise_model_rejected(self, tmp_path, rng):
        save_image(rng.random((1, 16, 16)), tmp_path / "c.png")
        with pytest.raises(ParamError, match="noise_model"):
            load_manifest(self.write(tmp_path, {"images": [{"clean": "c.png"}]}))

    def test_procedural_block(self, tmp_path):
        ps = load_manifest(self.write(tmp_path, {
            "procedural": {"count": 3, "size": 32, "seed": 5},
            "noise_model": {"kind": "signal", "sigma1": 0.12, "sigma2": 0.03},
        }))
        assert len(ps) == 3
        assert ps.records[0].clean.shape == (3, 32, 32)

    def test_cache_block(self, tmp_path):
        m = NoiseModel("gaussian", sigma=0.1)
        base = make_toy_pairs(3, 16, m, seed=3)
        write_cache(base, tmp_path / "clean.dtn", tmp_path / "noisy.dtn")
        ps = load_manifest(self.write(tmp_path, {
            "cache": {"clean": "clean.dtn", "noisy": "noisy.dtn"},
        }))
        assert len(ps) == 3
        np.testing.assert_array_equal(ps.records[1].clean, base.records[1].clean)

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(ParamError, match="unknown"):
            load_manifest(self.write(tmp_path, {"patchsize": 32, "images": []}))

    def test_bad_version(self, tmp_path):
        with pytest.raises(ParamError, match="version"):
            load_manifest(self.write(tmp_path, {"version": 2, "images": []}))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ParamError, match="JSON"):
            load_manifest(path)

    def test_write_cache_rejects_mixed_shapes(self, tmp_path, rng):
        a = rng.random((1, 16, 16)).astype(np.float32)
        b = rng.random((1, 8, 8)).astype(np.float32)
        ps = ImagePairSet.__new__(ImagePairSet)  # bypass ctor checks on purpose
        ps.records = [PairRecord(a, a), PairRecord(b, b)]
        with pytest.raises(ShapeError):
            write_cache(ps, tmp_path / "c.dtn", tmp_path / "n.dtn")
