import numpy as np
import pytest
from scipy import ndimage

from twobranch.data import (
    AnomalyFamily,
    FAMILY_MAP_FILENAME,
    Label,
    Split,
    SynthConfig,
    export_loco_layout,
    generate_synthetic,
    iterate_batches,
    load_loco_layout,
)
from twobranch.errors import (
    ConfigurationError,
    GenerationError,
    InputError,
    LayoutError,
)

from conftest import mini_synth_config


def count_objects(pixels: np.ndarray, threshold: float = 0.5) -> int:
    _, n = ndimage.label(pixels[:, :, 0] > threshold, structure=np.ones((3, 3)))
    return int(n)


def all_samples(bundle):
    return [s for split in Split for s in bundle.splits[split]]


def test_generate_deterministic_bit_identical():
    cfg = mini_synth_config(seed=7)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    for sa, sb in zip(all_samples(a), all_samples(b)):
        assert sa.sample_id == sb.sample_id
        assert sa.label == sb.label
        assert np.array_equal(sa.pixels, sb.pixels)


def test_generate_split_sizes_match_config():
    cfg = SynthConfig(
        image_size=(64, 64),
        train_count=200,
        validation_count=50,
        test_normal_count=40,
        test_structural_count=30,
        test_logical_count=30,
        seed=3,
    )
    bundle = generate_synthetic(cfg)
    assert len(bundle.split(Split.TRAIN)) == 200
    assert len(bundle.split(Split.VALIDATION)) == 50
    test = bundle.split(Split.TEST)
    assert len(test) == 100
    by_label = {label: sum(1 for s in test if s.label is label) for label in Label}
    assert by_label[Label.NORMAL] == 40
    assert by_label[Label.STRUCTURAL] == 30
    assert by_label[Label.LOGICAL] == 30


def test_train_and_validation_contain_only_normals(mini_bundle):
    for split in (Split.TRAIN, Split.VALIDATION):
        assert all(s.label is Label.NORMAL for s in mini_bundle.splits[split])
        assert all(s.anomaly_family is None for s in mini_bundle.splits[split])


def test_anomaly_family_present_iff_anomalous(mini_bundle):
    for sample in all_samples(mini_bundle):
        assert (sample.anomaly_family is not None) == (sample.label is not Label.NORMAL)


def test_unpicturable_count_outside_range():
    cfg = mini_synth_config(seed=5)
    bundle = generate_synthetic(cfg)
    lo, hi = cfg.object_count_range
    for sample in bundle.split(Split.TEST):
        k = count_objects(sample.pixels)
        if sample.label is Label.LOGICAL:
            assert k in (lo - 1, hi + 1)
        else:
            assert lo <= k <= hi


def test_objects_locally_indistinguishable():
    # anomalous-count images reuse the exact normal disc construction: the
    # disc plateau value must be the same everywhere
    cfg = mini_synth_config(seed=9)
    bundle = generate_synthetic(cfg)
    plateau = np.float32(np.round(cfg.disc_intensity * 255) / 255)
    for sample in bundle.split(Split.TEST):
        if sample.label is Label.LOGICAL and count_objects(sample.pixels) > 0:
            disc_values = sample.pixels[sample.pixels > 0.5]
            assert np.all(disc_values == plateau)


def test_per_image_max_within_normal_range():
    bundle = generate_synthetic(mini_synth_config(seed=13))
    normal_maxima = [
        s.pixels.max()
        for s in all_samples(bundle)
        if s.label is Label.NORMAL
    ]
    lo, hi = min(normal_maxima), max(normal_maxima)
    tolerance = 1.0 / 255.0
    for sample in bundle.split(Split.TEST):
        if sample.anomaly_family is AnomalyFamily.UNPICTURABLE:
            assert lo - tolerance <= sample.pixels.max() <= hi + tolerance


def test_mean_brightness_differs_by_design():
    # each count-anomalous image is one disc's worth of brightness away from
    # the normal population mean (counts can sit on either side of the range)
    bundle = generate_synthetic(mini_synth_config(seed=17))
    test = bundle.split(Split.TEST)
    normal_mean = np.mean([s.pixels.mean() for s in test if s.label is Label.NORMAL])
    for sample in test:
        if sample.label is Label.LOGICAL:
            assert abs(sample.pixels.mean() - normal_mean) > 0.003


def test_zero_counts_rejected():
    cfg = mini_synth_config()
    cfg.train_count = 0
    with pytest.raises(ConfigurationError):
        generate_synthetic(cfg)


def test_validation_count_minimum():
    cfg = mini_synth_config()
    cfg.validation_count = 1
    with pytest.raises(ConfigurationError):
        generate_synthetic(cfg)


def test_capacity_exceeded_raises_generation_error():
    cfg = mini_synth_config()
    cfg.object_count_range = (30, 30)
    with pytest.raises(GenerationError):
        generate_synthetic(cfg)


def test_round_trip_export_load(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    loaded = load_loco_layout(root)
    original = all_samples(mini_bundle)
    reloaded = all_samples(loaded)
    assert len(original) == len(reloaded)
    by_id = {s.sample_id: s for s in reloaded}
    for sample in original:
        twin = by_id[sample.sample_id]
        assert twin.label == sample.label
        assert twin.anomaly_family == sample.anomaly_family
        assert np.array_equal(twin.pixels, sample.pixels)


def test_load_missing_directory_names_path(tmp_path):
    root = tmp_path / "cat"
    (root / "train" / "good").mkdir(parents=True)
    with pytest.raises(LayoutError) as err:
        load_loco_layout(root)
    assert "validation" in str(err.value)


def test_directory_to_label_rule(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    loaded = load_loco_layout(root)
    for sample in loaded.split(Split.TEST):
        subdir = sample.sample_id.split("/")[1]
        if subdir == "logical_anomalies":
            assert sample.label is Label.LOGICAL
            assert sample.anomaly_family is AnomalyFamily.UNPICTURABLE
        elif subdir == "structural_anomalies":
            assert sample.label is Label.STRUCTURAL
            assert sample.anomaly_family is AnomalyFamily.PICTURABLE
        else:
            assert sample.label is Label.NORMAL


def test_family_map_override(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    (root / FAMILY_MAP_FILENAME).write_text("logical_anomalies = picturable\n")
    loaded = load_loco_layout(root)
    logical = [s for s in loaded.split(Split.TEST) if s.label is Label.LOGICAL]
    assert logical
    assert all(s.anomaly_family is AnomalyFamily.PICTURABLE for s in logical)


def test_family_map_rejects_unknown_entries(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    (root / FAMILY_MAP_FILENAME).write_text("mystery_dir = picturable\n")
    with pytest.raises(ConfigurationError):
        load_loco_layout(root)


def test_decode_error_carries_path(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    bad = root / "train" / "good" / "000.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(InputError) as err:
        load_loco_layout(root)
    assert "000.png" in str(err.value)


def test_file_counts_match_on_disk(tmp_path, mini_bundle):
    root = tmp_path / "category"
    export_loco_layout(mini_bundle, root)
    loaded = load_loco_layout(root)
    for rel, split, label in (
        ("train/good", Split.TRAIN, Label.NORMAL),
        ("validation/good", Split.VALIDATION, Label.NORMAL),
        ("test/good", Split.TEST, Label.NORMAL),
        ("test/structural_anomalies", Split.TEST, Label.STRUCTURAL),
        ("test/logical_anomalies", Split.TEST, Label.LOGICAL),
    ):
        on_disk = len(list((root / rel).glob("*.png")))
        in_bundle = sum(1 for s in loaded.split(split) if s.label is label)
        assert on_disk == in_bundle > 0


def test_batches_remainder(mini_bundle):
    batches = list(iterate_batches(mini_bundle, Split.VALIDATION, 3, seed=1))
    assert [len(b) for b in batches] == [3, 3, 2]


def test_batches_deterministic(mini_bundle):
    ids = lambda batches: [[s.sample_id for s in b] for b in batches]
    a = ids(iterate_batches(mini_bundle, Split.TRAIN, 5, seed=42))
    b = ids(iterate_batches(mini_bundle, Split.TRAIN, 5, seed=42))
    assert a == b
    c = ids(iterate_batches(mini_bundle, Split.TRAIN, 5, seed=43))
    assert a != c


def test_epoch_is_a_permutation(mini_bundle):
    expected = sorted(s.sample_id for s in mini_bundle.split(Split.TRAIN))
    for epoch_batches in (
        list(iterate_batches(mini_bundle, Split.TRAIN, 7, seed=5, epochs=1)),
        list(iterate_batches(mini_bundle, Split.TRAIN, 7, seed=5, epochs=2))[5:],
    ):
        seen = sorted(s.sample_id for batch in epoch_batches for s in batch)
        assert seen == expected


def test_unknown_split_rejected(mini_bundle):
    with pytest.raises(InputError):
        list(iterate_batches(mini_bundle, "holdout", 4, seed=0))
