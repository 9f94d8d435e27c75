import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from veinseg.augment import AugmentConfig, GeometryRecord, apply_pair, transform_mask

NO_FLIPS = AugmentConfig(p_hflip=0.0, p_vflip=0.0)
ALWAYS_HFLIP = AugmentConfig(p_hflip=1.0, p_vflip=0.0)


def _image(seed=0, h=16, w=16):
    rng = np.random.default_rng(seed)
    return rng.random((h, w, 3)).astype(np.float32)


class TestApplyPair:
    def test_identity_geometry_weak_equals_input(self):
        img = _image()
        weak, strong, record = apply_pair(img, np.random.default_rng(0), NO_FLIPS)
        assert (weak == img).all()
        assert not record.hflip and not record.vflip
        assert strong.shape == img.shape

    def test_strong_differs_photometrically_only(self):
        # With geometry forced to identity, any difference is photometric.
        img = _image()
        _, strong, _ = apply_pair(img, np.random.default_rng(1), NO_FLIPS)
        assert strong.shape == img.shape
        assert not (strong == img).all()

    def test_hflip_matches_manual_flip(self):
        img = _image()
        weak, _, record = apply_pair(img, np.random.default_rng(0), ALWAYS_HFLIP)
        assert record.hflip
        assert (weak == img[:, ::-1]).all()

    def test_deterministic_given_rng_state(self):
        img = _image()
        a = apply_pair(img, np.random.default_rng(42))
        b = apply_pair(img, np.random.default_rng(42))
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all() and a[2] == b[2]

    def test_strong_stays_in_unit_range(self):
        img = _image()
        for seed in range(10):
            _, strong, _ = apply_pair(img, np.random.default_rng(seed))
            assert strong.min() >= 0.0 and strong.max() <= 1.0

    def test_cutout_paints_a_gray_box(self):
        cfg = AugmentConfig(p_hflip=0.0, p_vflip=0.0, brightness=0.0, contrast=0.0,
                            saturation=0.0, p_blur=0.0, cutout_count=1, cutout_size=8)
        img = np.ones((32, 32, 3), dtype=np.float32)
        _, strong, _ = apply_pair(img, np.random.default_rng(0), cfg)
        assert (strong == 0.5).any()
        assert (strong == 1.0).any()

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError, match="HxWx3"):
            apply_pair(np.zeros((4, 4)), np.random.default_rng(0))


class TestTransformMask:
    def test_identity_record_unchanged(self):
        mask = np.arange(12, dtype=np.uint8).reshape(3, 4)
        rec = GeometryRecord(hflip=False, vflip=False, height=3, width=4)
        assert (transform_mask(mask, rec) == mask).all()

    def test_double_hflip_is_involution(self):
        mask = np.arange(12, dtype=np.uint8).reshape(3, 4)
        rec = GeometryRecord(hflip=True, vflip=False, height=3, width=4)
        assert (transform_mask(transform_mask(mask, rec), rec) == mask).all()

    def test_single_pixel_index_arithmetic(self):
        h, w, r, c = 5, 7, 2, 1
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[r, c] = 3
        rec = GeometryRecord(hflip=True, vflip=False, height=h, width=w)
        out = transform_mask(mask, rec)
        assert out[r, w - 1 - c] == 3
        assert out.sum() == 3

    def test_dimension_mismatch(self):
        rec = GeometryRecord(hflip=False, vflip=False, height=4, width=4)
        with pytest.raises(ValueError, match="does not match"):
            transform_mask(np.zeros((5, 4), dtype=np.uint8), rec)

    @given(st.integers(0, 2**32 - 1), st.booleans(), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_values_preserved_exactly(self, seed, hflip, vflip):
        rng = np.random.default_rng(seed)
        mask = rng.choice(np.array([0, 1, 2, 3, 255], dtype=np.uint8), size=(6, 9))
        rec = GeometryRecord(hflip=hflip, vflip=vflip, height=6, width=9)
        out = transform_mask(mask, rec)
        assert sorted(out.ravel()) == sorted(mask.ravel())


class TestGeometryAlignment:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_mask_aligns_with_both_views(self, seed):
        # Encode a label map into an image; after augmentation the weak view
        # must still decode to the transformed labels at every pixel.
        rng_labels = np.random.default_rng(seed)
        labels = rng_labels.integers(0, 4, size=(8, 8)).astype(np.uint8)
        img = (labels[..., None].repeat(3, axis=2).astype(np.float32)) / 8.0
        weak, _, record = apply_pair(img, np.random.default_rng(seed))
        decoded = np.rint(weak[:, :, 0] * 8.0).astype(np.uint8)
        assert (decoded == transform_mask(labels, record)).all()


class TestConfigValidation:
    def test_probability_range(self):
        with pytest.raises(ValueError, match="p_hflip"):
            AugmentConfig(p_hflip=1.5)

    def test_blur_sigma_order(self):
        with pytest.raises(ValueError, match="blur_sigma"):
            AugmentConfig(blur_sigma=(2.0, 0.1))

    def test_negative_jitter(self):
        with pytest.raises(ValueError, match="brightness"):
            AugmentConfig(brightness=-0.1)
