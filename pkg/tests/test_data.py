import numpy as np
import pytest

from fedoap.data import (
    DEFAULT_PROFILES,
    HELD_OUT_PROFILE_NAME,
    SAMPLE_HEADER_BYTES,
    TRAINING_PROFILE_NAMES,
    OrganProfile,
    batch_arrays,
    generate_client_dataset,
    read_client_dataset,
    read_sample,
    split_dataset,
    write_client_dataset,
    write_sample,
)
from fedoap.errors import (
    BadMagic,
    InvalidConfig,
    InvalidProfile,
    SplitTooSmall,
    TruncatedFile,
    VersionUnsupported,
)


def crofton_perimeter(mask):
    """Count inside/outside pixel edges, scaled by pi/4 (Crofton correction)."""
    pad = np.pad(mask.astype(bool), 1)
    edges = (pad[1:, :] != pad[:-1, :]).sum() + (pad[:, 1:] != pad[:, :-1]).sum()
    return edges * np.pi / 4.0


def compactness(mask):
    return 4.0 * np.pi * mask.sum() / crofton_perimeter(mask) ** 2


def sample_stats(sample):
    img, mask = sample.image[0], sample.mask
    contrast = abs(img[mask == 1].mean() - img[mask == 0].mean())
    return np.array([mask.mean(), img.mean(), contrast])


class TestProfiles:
    def test_defaults_validate(self):
        for profile in DEFAULT_PROFILES.values():
            profile.validate()

    def test_training_and_held_out_partition(self):
        assert HELD_OUT_PROFILE_NAME not in TRAINING_PROFILE_NAMES
        for name in (*TRAINING_PROFILE_NAMES, HELD_OUT_PROFILE_NAME):
            assert name in DEFAULT_PROFILES

    @pytest.mark.parametrize("field,value", [
        ("lesion_count_range", (0, 1)),
        ("lesion_count_range", (2, 1)),
        ("lesion_radius_range", (0.0, 0.1)),
        ("lesion_radius_range", (0.2, 0.1)),
        ("lesion_radius_range", (0.1, 0.5)),
        ("boundary_irregularity", -0.1),
        ("contrast", 0.0),
        ("contrast", 1.5),
        ("background_texture", -0.01),
    ])
    def test_bad_profiles_rejected(self, field, value):
        base = DEFAULT_PROFILES["breast_like"].__dict__ | {field: value}
        with pytest.raises(InvalidProfile):
            OrganProfile(**base).validate()


class TestGeneration:
    def test_deterministic(self):
        prof = DEFAULT_PROFILES["brain_like"]
        a = generate_client_dataset(prof, 12, 32, 5)
        b = generate_client_dataset(prof, 12, 32, 5)
        for sa, sb in zip(a, b):
            assert sa.sample_id == sb.sample_id
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_seed_changes_data(self):
        prof = DEFAULT_PROFILES["brain_like"]
        a = generate_client_dataset(prof, 4, 32, 5)
        b = generate_client_dataset(prof, 4, 32, 6)
        assert any(not np.array_equal(sa.mask, sb.mask) for sa, sb in zip(a, b))

    def test_samples_independent_of_dataset_size(self):
        # each sample depends only on (profile, seed, index), so prefixes agree
        prof = DEFAULT_PROFILES["liver_like"]
        short = generate_client_dataset(prof, 5, 32, 9)
        long = generate_client_dataset(prof, 15, 32, 9)
        for sa, sb in zip(short, long):
            np.testing.assert_array_equal(sa.image, sb.image)
            np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_shapes_dtypes_and_range(self):
        for name, prof in DEFAULT_PROFILES.items():
            for s in generate_client_dataset(prof, 8, 32, 3):
                assert s.image.shape == (1, 32, 32)
                assert s.mask.shape == (32, 32)
                assert s.image.dtype == np.float64
                assert s.mask.dtype == np.uint8
                assert s.image.min() >= 0.0 and s.image.max() <= 1.0
                assert set(np.unique(s.mask)) <= {0, 1}
                # values must be exactly representable in f32 for disk round trips
                np.testing.assert_array_equal(
                    s.image, s.image.astype(np.float32).astype(np.float64))

    def test_masks_never_empty(self):
        for prof in DEFAULT_PROFILES.values():
            for s in generate_client_dataset(prof, 50, 32, 17):
                assert s.mask.any()

    def test_lesion_area_within_profile_bounds(self):
        for prof in DEFAULT_PROFILES.values():
            cmax = prof.lesion_count_range[1]
            rmin, rmax = prof.lesion_radius_range
            irr = prof.boundary_irregularity
            hi = cmax * np.pi * (rmax * (1 + irr)) ** 2 * 1.3
            lo = np.pi * (rmin * (1 - irr)) ** 2 * 0.5
            for s in generate_client_dataset(prof, 50, 32, 23):
                frac = s.mask.mean()
                assert lo <= frac <= hi, (prof.name, frac)

    def test_zero_irregularity_gives_near_circular_lesions(self):
        disk = OrganProfile("disk", (1, 1), (0.15, 0.25), 0.0, 0.9, 0.02, False)
        values = [compactness(s.mask)
                  for s in generate_client_dataset(disk, 100, 32, 7)]
        assert min(values) > 0.85
        assert abs(np.mean(values) - 1.0) < 0.05

    def test_irregular_boundaries_lower_compactness(self):
        disk = OrganProfile("a", (1, 1), (0.15, 0.25), 0.0, 0.9, 0.02, False)
        rough = OrganProfile("b", (1, 1), (0.15, 0.25), 0.45, 0.9, 0.02, False)
        smooth = np.mean([compactness(s.mask)
                          for s in generate_client_dataset(disk, 100, 48, 7)])
        wobbly = np.mean([compactness(s.mask)
                          for s in generate_client_dataset(rough, 100, 48, 7)])
        assert wobbly < smooth - 0.05

    def test_lesions_separable_from_background(self):
        # every sample, not just on average
        for prof in DEFAULT_PROFILES.values():
            for s in generate_client_dataset(prof, 100, 32, 29):
                img = s.image[0]
                gap = abs(img[s.mask == 1].mean() - img[s.mask == 0].mean())
                assert gap >= 0.5 * prof.contrast, (prof.name, gap)

    def test_polarity_matches_profile(self):
        for prof in DEFAULT_PROFILES.values():
            for s in generate_client_dataset(prof, 20, 32, 31):
                img = s.image[0]
                diff = img[s.mask == 1].mean() - img[s.mask == 0].mean()
                assert (diff < 0) == prof.intensity_inversion

    def test_profiles_statistically_distinguishable(self):
        # nearest-centroid on (area fraction, mean intensity, contrast)
        per_profile = {}
        for idx, name in enumerate(TRAINING_PROFILE_NAMES):
            samples = generate_client_dataset(
                DEFAULT_PROFILES[name], 200, 32, 101 + idx)
            per_profile[name] = np.array([sample_stats(s) for s in samples])
        train = np.concatenate([per_profile[n][:100]
                                for n in TRAINING_PROFILE_NAMES])
        mu, sd = train.mean(0), train.std(0)
        centroids = {n: ((per_profile[n][:100] - mu) / sd).mean(0)
                     for n in TRAINING_PROFILE_NAMES}
        correct = total = 0
        for name in TRAINING_PROFILE_NAMES:
            for row in (per_profile[name][100:] - mu) / sd:
                pred = min(centroids,
                           key=lambda c: np.linalg.norm(row - centroids[c]))
                correct += pred == name
                total += 1
        assert correct / total >= 0.95

    def test_bad_arguments_rejected(self):
        prof = DEFAULT_PROFILES["breast_like"]
        with pytest.raises(InvalidConfig):
            generate_client_dataset(prof, 0, 32, 1)
        with pytest.raises(InvalidConfig):
            generate_client_dataset(prof, 4, 4, 1)


class TestSplits:
    def _samples(self, n):
        return generate_client_dataset(DEFAULT_PROFILES["breast_like"], n, 32, 13)

    def test_split_arithmetic(self):
        train, val, test = split_dataset(self._samples(100), seed=1)
        assert (len(train), len(val), len(test)) == (81, 9, 10)
        train, val, test = split_dataset(self._samples(200), seed=1)
        assert (len(train), len(val), len(test)) == (162, 18, 20)

    def test_partition_is_exact(self):
        samples = self._samples(60)
        train, val, test = split_dataset(samples, seed=3)
        ids = [s.sample_id for s in train + val + test]
        assert sorted(ids) == sorted(s.sample_id for s in samples)
        assert len(set(ids)) == len(ids)

    def test_deterministic_and_seed_sensitive(self):
        samples = self._samples(60)
        a = split_dataset(samples, seed=4)
        b = split_dataset(samples, seed=4)
        c = split_dataset(samples, seed=5)
        for sa, sb in zip(a, b):
            assert [s.sample_id for s in sa] == [s.sample_id for s in sb]
        assert any([s.sample_id for s in sa] != [s.sample_id for s in sc]
                   for sa, sc in zip(a, c))

    def test_too_small_rejected(self):
        with pytest.raises(SplitTooSmall):
            split_dataset(self._samples(4), seed=1)

    def test_bad_fractions_rejected(self):
        samples = self._samples(20)
        with pytest.raises(InvalidConfig):
            split_dataset(samples, test_frac=1.0, seed=1)
        with pytest.raises(InvalidConfig):
            split_dataset(samples, val_frac=-0.1, seed=1)


class TestSampleFiles:
    def test_round_trip_bit_exact(self, tmp_path):
        for prof in DEFAULT_PROFILES.values():
            sample = generate_client_dataset(prof, 1, 32, 37)[0]
            path = tmp_path / f"{sample.sample_id}.foss"
            write_sample(path, sample)
            back = read_sample(path)
            np.testing.assert_array_equal(back.image, sample.image)
            np.testing.assert_array_equal(back.mask, sample.mask)
            assert back.sample_id == sample.sample_id

    def test_file_size_is_header_plus_five_bytes_per_pixel(self, tmp_path):
        sample = generate_client_dataset(
            DEFAULT_PROFILES["brain_like"], 1, 32, 41)[0]
        path = tmp_path / "s.foss"
        write_sample(path, sample)
        assert path.stat().st_size == SAMPLE_HEADER_BYTES + 5 * 32 * 32

    def test_corruption_detected(self, tmp_path):
        sample = generate_client_dataset(
            DEFAULT_PROFILES["brain_like"], 1, 16, 43)[0]
        path = tmp_path / "s.foss"
        write_sample(path, sample)
        data = path.read_bytes()

        bad = tmp_path / "bad.foss"
        bad.write_bytes(b"MOSS" + data[4:])
        with pytest.raises(BadMagic):
            read_sample(bad)
        bad.write_bytes(data[:4] + b"\x63\x00" + data[6:])
        with pytest.raises(VersionUnsupported):
            read_sample(bad)
        for cut in (0, 5, 13, len(data) // 2, len(data) - 1):
            bad.write_bytes(data[:cut])
            with pytest.raises(TruncatedFile):
                read_sample(bad)
        bad.write_bytes(data + b"\x00")
        with pytest.raises(TruncatedFile):
            read_sample(bad)


class TestManifest:
    def test_dataset_round_trip(self, tmp_path):
        prof = DEFAULT_PROFILES["liver_like"]
        samples = generate_client_dataset(prof, 20, 16, 47)
        train, val, test = split_dataset(samples, seed=2)
        splits = {"train": train, "val": val, "test": test}
        manifest_path = write_client_dataset(tmp_path / "c0", prof, 47, 16, splits)
        assert manifest_path.name == "manifest.json"

        back = read_client_dataset(tmp_path / "c0")
        assert set(back) == set(splits)
        for name, items in splits.items():
            assert [s.sample_id for s in back[name]] == [s.sample_id for s in items]
            for sa, sb in zip(items, back[name]):
                np.testing.assert_array_equal(sa.image, sb.image)
                np.testing.assert_array_equal(sa.mask, sb.mask)

    def test_unknown_manifest_version_rejected(self, tmp_path):
        prof = DEFAULT_PROFILES["liver_like"]
        samples = generate_client_dataset(prof, 12, 16, 47)
        train, val, test = split_dataset(samples, seed=2)
        path = write_client_dataset(
            tmp_path / "c0", prof, 47, 16, {"train": train, "val": val, "test": test})
        text = path.read_text().replace('"format_version": 1', '"format_version": 9')
        path.write_text(text)
        with pytest.raises(VersionUnsupported):
            read_client_dataset(tmp_path / "c0")


class TestBatching:
    def test_batch_arrays_shapes(self):
        samples = generate_client_dataset(
            DEFAULT_PROFILES["breast_like"], 6, 32, 53)
        images, masks = batch_arrays(samples)
        assert images.shape == (6, 1, 32, 32)
        assert masks.shape == (6, 1, 32, 32)
        assert images.dtype == np.float64 and masks.dtype == np.float64
        np.testing.assert_array_equal(masks[2, 0], samples[2].mask)
