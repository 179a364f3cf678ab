import gzip

import numpy as np
import pytest

from gm_dgm import data
from gm_dgm.data import Dataset
from gm_dgm.errors import ConfigurationError, ParseError


def write_idx(tmp_path, n_images=3, rows=2, cols=2, n_labels=None, image_magic=0x803, drop_bytes=0, gz=False):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=n_images * rows * cols, dtype=np.uint8)
    labels = rng.integers(0, 10, size=n_labels if n_labels is not None else n_images, dtype=np.uint8)
    images = np.array([image_magic, n_images, rows, cols], dtype=">u4").tobytes() + pixels.tobytes()
    images = images[: len(images) - drop_bytes]
    label_bytes = np.array([0x801, labels.size], dtype=">u4").tobytes() + labels.tobytes()

    suffix = ".gz" if gz else ""
    opener = gzip.open if gz else open
    images_path, labels_path = tmp_path / f"images{suffix}", tmp_path / f"labels{suffix}"
    with opener(images_path, "wb") as f:
        f.write(images)
    with opener(labels_path, "wb") as f:
        f.write(label_bytes)
    return str(images_path), str(labels_path), pixels, labels


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx_scales_pixels_and_reads_labels(tmp_path, gz):
    images, labels, pixels, raw_labels = write_idx(tmp_path, gz=gz)
    ds = data.load_idx(images, labels)
    assert ds.features.shape == (3, 4)
    assert np.allclose(ds.features.reshape(-1), pixels / 255.0)
    assert np.array_equal(ds.labels, raw_labels)
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_load_idx_bad_magic(tmp_path):
    images, labels, _, _ = write_idx(tmp_path, image_magic=0x802)
    with pytest.raises(ParseError, match="magic"):
        data.load_idx(images, labels)


def test_load_idx_truncated_pixels_name_the_offset(tmp_path):
    images, labels, _, _ = write_idx(tmp_path, drop_bytes=3)
    with pytest.raises(ParseError, match="offset"):
        data.load_idx(images, labels)


def test_load_idx_count_mismatch(tmp_path):
    images, labels, _, _ = write_idx(tmp_path, n_labels=2)
    with pytest.raises(ParseError, match="3 images but"):
        data.load_idx(images, labels)


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(ParseError):
        data.load_idx(str(tmp_path / "nope"), str(tmp_path / "nope2"))


def test_dataset_rejects_label_count_mismatch():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((3, 2)), np.zeros(2))


def five_class_dataset(per_class=20):
    labels = np.repeat(np.arange(5), per_class)
    features = np.arange(labels.size * 2, dtype=np.float64).reshape(-1, 2)
    return Dataset(features, labels, [str(c) for c in range(5)])


def test_split_sizes_and_prior():
    ds = five_class_dataset()
    split = data.build_semi_unsupervised_split(ds, (0, 1), (2, 3, 4), 5, 2, np.random.default_rng(0))
    assert len(split.labelled) == 10
    assert len(split.unlabelled) == 90
    assert (split.k_observed, split.k_unobserved, split.k_extra, split.k_total) == (2, 3, 2, 7)
    assert np.allclose(split.prior.probs, [0.2, 0.2] + [0.12] * 5)
    assert np.all(split.unlabelled.labels == data.UNLABELLED)
    assert sorted(np.bincount(split.labelled.labels)[:2]) == [5, 5]


def test_split_conserves_every_point():
    ds = five_class_dataset()
    split = data.build_semi_unsupervised_split(ds, (0, 1), (2, 3, 4), 5, 0, np.random.default_rng(1))
    recovered = np.concatenate([split.labelled.labels, split.unlabelled_truth.labels])
    assert np.array_equal(np.sort(recovered), np.sort(ds.labels))
    rows = np.concatenate([split.labelled.features, split.unlabelled.features])
    assert np.array_equal(np.sort(rows[:, 0]), np.sort(ds.features[:, 0]))


def test_split_is_deterministic_for_a_seed():
    ds = five_class_dataset()
    a = data.build_semi_unsupervised_split(ds, (0, 1), (2, 3, 4), 5, 0, np.random.default_rng(9))
    b = data.build_semi_unsupervised_split(ds, (0, 1), (2, 3, 4), 5, 0, np.random.default_rng(9))
    assert np.array_equal(a.labelled.features, b.labelled.features)


def test_labelled_slots_follow_semi_supervised_order():
    ds = five_class_dataset()
    split = data.build_semi_unsupervised_split(ds, (3, 1), (0, 2, 4), 2, 0, np.random.default_rng(0))
    slots = split.labelled_slots()
    assert np.array_equal(slots[split.labelled.labels == 3], [0, 0])
    assert np.array_equal(slots[split.labelled.labels == 1], [1, 1])


def test_zero_labels_per_class_leaves_everything_unlabelled():
    ds = five_class_dataset()
    split = data.build_semi_unsupervised_split(ds, (0, 1), (2, 3, 4), 0, 0, np.random.default_rng(0))
    assert len(split.labelled) == 0
    assert len(split.unlabelled) == len(ds)


def test_split_rejects_too_few_examples():
    with pytest.raises(ConfigurationError, match="labels requested"):
        data.build_semi_unsupervised_split(five_class_dataset(), (0,), (1,), 21, 0, np.random.default_rng(0))


def test_split_rejects_overlapping_class_sets():
    with pytest.raises(ConfigurationError):
        data.build_semi_unsupervised_split(five_class_dataset(), (0, 1), (1, 2), 1, 0, np.random.default_rng(0))


def test_mnist_protocol_prior():
    prior = data.build_prior(5, 10, 0.1, 0.05)
    assert np.allclose(prior.probs, [0.1] * 5 + [0.05] * 10)


def test_prior_masses_must_sum_to_one():
    with pytest.raises(ConfigurationError):
        data.build_prior(5, 10, 0.1, 0.1)


def test_carve_validation_sizes():
    ds = five_class_dataset()
    rest, val = data.carve_validation(ds, 15, np.random.default_rng(0))
    assert (len(rest), len(val)) == (85, 15)
    rest, val = data.carve_validation(ds, 0, np.random.default_rng(0))
    assert rest is ds and val is None


def test_binarize_keeps_extremes():
    x = np.array([[0.0, 1.0, 0.0, 1.0]])
    assert np.array_equal(data.binarize(x, np.random.default_rng(0)), x)


def test_label_dictionary_maps_codes_to_coarse_classes():
    dictionary = data.load_label_dictionary()
    assert len(dictionary.class_names) == 8
    mapped = data.label_dictionary_map(["7030", "17161", "99999", 17250], dictionary)
    walking, sleep = dictionary.class_index("Walking"), dictionary.class_index("Sleep")
    assert mapped.tolist() == [sleep, walking, data.UNLABELLED, walking]


def test_sleep_is_eighty_times_as_common_as_running():
    proportions = data.load_label_dictionary().class_proportions()
    assert proportions["Sleep"] / proportions["Running"] == pytest.approx(80.0)


def test_synthetic_class_frequencies_follow_the_weights():
    names, weights = data.dictionary_class_weights()
    n = 100_000
    ds, labels = data.synthetic_activity_dataset(n, len(names), d_features=4, rng=np.random.default_rng(0),
                                                 class_weights=weights, class_names=names)
    counts = np.bincount(labels, minlength=len(names))
    sigma = np.sqrt(n * weights * (1 - weights))
    assert np.all(np.abs(counts - n * weights) < 4 * sigma)
    assert ds.class_names == names


def test_synthetic_needs_two_classes():
    with pytest.raises(ConfigurationError):
        data.synthetic_activity_dataset(10, 1)


def test_constant_feature_variance_is_floored_with_a_warning():
    ds = Dataset(np.column_stack([np.arange(5.0), np.ones(5)]), np.zeros(5))
    with pytest.warns(RuntimeWarning, match="floored"):
        stats = data.fit_feature_stats(ds)
    assert stats.std[1] == pytest.approx(1e-4)
    assert np.all(np.isfinite(data.standardize_features(ds, stats).features))


def test_standardisation_is_invariant_to_positive_affine_maps(rng):
    features = rng.standard_normal((50, 3)) * [1.0, 5.0, 0.1]
    a = Dataset(features, np.zeros(50))
    b = Dataset(features * 7.0 - 3.0, np.zeros(50))
    za, zb = data.standardize_features(a).features, data.standardize_features(b).features
    assert np.allclose(za, zb)
    assert np.allclose(za.mean(axis=0), 0.0) and np.allclose(za.std(axis=0), 1.0)


def test_standardisation_inverse(rng):
    ds = Dataset(rng.standard_normal((20, 3)) * 4 + 2, np.zeros(20))
    stats = data.fit_feature_stats(ds)
    assert np.allclose(stats.inverse(data.standardize_features(ds, stats).features), ds.features)


def test_dataset_csv_export_and_load(tmp_path, rng):
    ds = Dataset(rng.standard_normal((6, 3)), np.array([0, 1, -1, 2, 1, 0]))
    path = str(tmp_path / "windows.csv")
    data.export_dataset_csv(ds, path)
    loaded = data.load_dataset_csv(path)
    assert np.allclose(loaded.features, ds.features)
    assert np.array_equal(loaded.labels, ds.labels)
    assert loaded.class_names == ["class_0", "class_1", "class_2"]
