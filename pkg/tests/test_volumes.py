"""Voxel containers, I/O round-trips, phantoms, and region decomposition."""

import numpy as np
import pytest

from voxseg import (
    LabelVolume,
    MultiModalVolume,
    ProbabilityVolume,
    ValidationError,
    generate_phantom,
    load_volume,
    region_decompose,
    save_label_volume,
    save_volume,
)
from voxseg.volumes import load_probability_volume, save_probability_volume


def random_image(rng, shape=(12, 10, 8)):
    return MultiModalVolume(
        data=rng.standard_normal((4,) + shape).astype(np.float32),
        spacing=(1.0, 1.0, 1.0),
    )


def random_labels(rng, shape=(12, 10, 8)):
    return LabelVolume(data=rng.choice([0, 1, 2, 4], size=shape).astype(np.uint8))


class TestContainers:
    def test_image_must_have_four_channels(self):
        with pytest.raises(ValidationError):
            MultiModalVolume(data=np.zeros((3, 8, 8, 8), dtype=np.float32))

    def test_image_rejects_nonfinite(self):
        data = np.zeros((4, 8, 8, 8), dtype=np.float32)
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            MultiModalVolume(data=data)

    def test_spacing_must_be_positive(self):
        with pytest.raises(ValidationError):
            MultiModalVolume(data=np.zeros((4, 8, 8, 8), dtype=np.float32),
                             spacing=(1.0, 0.0, 1.0))

    def test_label_value_3_rejected(self):
        data = np.zeros((8, 8, 8), dtype=np.uint8)
        data[1, 1, 1] = 3
        with pytest.raises(ValidationError, match="illegal label 3"):
            LabelVolume(data=data)

    def test_probability_channel_sums_checked(self):
        data = np.full((4, 4, 4, 4), 0.3, dtype=np.float32)
        with pytest.raises(ValidationError):
            ProbabilityVolume(data=data)

    def test_probability_accepts_valid(self):
        data = np.full((4, 4, 4, 4), 0.25, dtype=np.float32)
        pv = ProbabilityVolume(data=data)
        assert pv.shape == (4, 4, 4)


class TestRoundTrips:
    @pytest.mark.parametrize("ext", [".v3d", ".nii", ".nii.gz"])
    def test_image_round_trip_bit_exact(self, tmp_path, ext):
        rng = np.random.default_rng(0)
        vol = random_image(rng)
        path = tmp_path / f"case{ext}"
        save_volume(vol, path)
        back = load_volume(path, kind="image")
        assert back.data.dtype == np.float32
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing

    @pytest.mark.parametrize("ext", [".v3d", ".nii", ".nii.gz"])
    def test_label_round_trip_bit_exact(self, tmp_path, ext):
        rng = np.random.default_rng(1)
        lab = random_labels(rng)
        path = tmp_path / f"case{ext}"
        save_label_volume(lab, path)
        back = load_volume(path, kind="label")
        np.testing.assert_array_equal(back.data, lab.data)

    def test_all_zero_label_round_trip(self, tmp_path):
        lab = LabelVolume(data=np.zeros((6, 7, 8), dtype=np.uint8))
        path = tmp_path / "zeros.v3d"
        save_label_volume(lab, path)
        back = load_volume(path, kind="label")
        np.testing.assert_array_equal(back.data, lab.data)

    def test_shape_preserved_in_header(self, tmp_path):
        lab = LabelVolume(data=np.zeros((64, 64, 64), dtype=np.uint8))
        for ext in (".v3d", ".nii.gz"):
            path = tmp_path / f"cube{ext}"
            save_label_volume(lab, path)
            assert load_volume(path, kind="label").shape == (64, 64, 64)

    def test_probability_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        raw = rng.random((4, 6, 5, 4)).astype(np.float32)
        raw /= raw.sum(axis=0, keepdims=True)
        pv = ProbabilityVolume(data=raw)
        path = tmp_path / "prob.v3d"
        save_probability_volume(pv, path)
        back = load_probability_volume(path)
        np.testing.assert_array_equal(back.data, pv.data)

    def test_spacing_round_trip(self, tmp_path):
        vol = MultiModalVolume(data=np.zeros((4, 8, 8, 8), dtype=np.float32),
                               spacing=(1.0, 1.5, 2.0))
        for ext in (".v3d", ".nii"):
            path = tmp_path / f"sp{ext}"
            save_volume(vol, path)
            assert load_volume(path, kind="image").spacing == (1.0, 1.5, 2.0)

    def test_missing_file_errors(self, tmp_path):
        with pytest.raises(ValidationError, match="no such file"):
            load_volume(tmp_path / "absent.v3d", kind="image")

    def test_label_file_with_illegal_value_errors(self, tmp_path):
        import struct
        data = np.zeros((4, 4, 4), dtype=np.uint8)
        data[0, 0, 0] = 3
        path = tmp_path / "bad.v3d"
        with open(path, "wb") as f:
            f.write(b"V3D1" + struct.pack("<B", 1) + struct.pack("<I", 3))
            f.write(struct.pack("<3I", 4, 4, 4))
            f.write(struct.pack("<3f", 1.0, 1.0, 1.0))
            f.write(data.tobytes())
        with pytest.raises(ValidationError, match="illegal label 3"):
            load_volume(path, kind="label")

    def test_three_channel_nifti_rejected_as_image(self, tmp_path):
        from voxseg.nifti import write_nifti
        path = tmp_path / "bad.nii"
        write_nifti(path, np.zeros((3, 4, 4, 4), dtype=np.float32))
        with pytest.raises(ValidationError, match="4-channel"):
            load_volume(path, kind="image")


class TestRegionDecompose:
    def test_all_zero_gives_empty_masks(self):
        masks = region_decompose(LabelVolume(data=np.zeros((5, 5, 5), dtype=np.uint8)))
        assert not masks.et.any() and not masks.tc.any() and not masks.wt.any()

    def test_single_et_voxel_in_all_regions(self):
        data = np.zeros((5, 5, 5), dtype=np.uint8)
        data[2, 2, 2] = 4
        masks = region_decompose(LabelVolume(data=data))
        assert masks.et[2, 2, 2] and masks.tc[2, 2, 2] and masks.wt[2, 2, 2]
        assert masks.et.sum() == masks.tc.sum() == masks.wt.sum() == 1

    def test_wt_count_equals_label_counts(self):
        # |wt| must equal #1s + #2s + #4s exactly (voxel counting oracle).
        for seed in range(5):
            _, lab = generate_phantom(seed=seed, shape=(32, 32, 32))
            masks = region_decompose(lab)
            counts = {v: int((lab.data == v).sum()) for v in (1, 2, 4)}
            assert masks.wt.sum() == counts[1] + counts[2] + counts[4]
            assert masks.tc.sum() == counts[1] + counts[4]
            assert masks.et.sum() == counts[4]


class TestPhantom:
    def test_deterministic_in_seed(self):
        v1, l1 = generate_phantom(seed=7, shape=(32, 36, 40))
        v2, l2 = generate_phantom(seed=7, shape=(32, 36, 40))
        np.testing.assert_array_equal(v1.data, v2.data)
        np.testing.assert_array_equal(l1.data, l2.data)

    def test_different_seeds_differ(self):
        base, _ = generate_phantom(seed=0, shape=(32, 32, 32))
        diffs = 0
        for seed in range(1, 21):
            v, _ = generate_phantom(seed=seed, shape=(32, 32, 32))
            diffs += int(not np.array_equal(v.data, base.data))
        assert diffs == 20

    def test_all_labels_present(self):
        _, lab = generate_phantom(seed=1, shape=(64, 64, 64))
        hist = {v: int((lab.data == v).sum()) for v in (1, 2, 4)}
        assert all(count > 0 for count in hist.values())

    def test_nesting_over_50_seeds(self):
        # RegionMasks validates et ⊆ tc ⊆ wt at construction; a voxelwise
        # subset check keeps the oracle explicit.
        for seed in range(50):
            _, lab = generate_phantom(seed=seed, shape=(32, 32, 32))
            masks = region_decompose(lab)
            assert not (masks.et & ~masks.tc).any()
            assert not (masks.tc & ~masks.wt).any()
            assert (lab.data == 1).sum() > 0
            assert (lab.data == 2).sum() > 0
            assert (lab.data == 4).sum() > 0

    def test_shape_too_small_rejected(self):
        with pytest.raises(ValidationError):
            generate_phantom(seed=0, shape=(31, 64, 64))

    def test_background_exactly_zero(self):
        vol, _ = generate_phantom(seed=3, shape=(32, 32, 32))
        corner = vol.data[:, :2, :2, :2]
        assert np.all(corner == 0.0)
