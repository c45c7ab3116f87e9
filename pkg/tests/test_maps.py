import numpy as np
import pytest
from PIL import Image

from twobranch.errors import CalibrationError, InputError
from twobranch.maps import (
    MapNormalizer,
    calibrate_map_normalizer,
    combined_map,
    global_map,
    load_map_raw,
    local_map,
    picturable_score,
    save_heatmap_png,
    save_map_raw,
)


def loop_squared_diff_map(a, b):
    c, h, w = a.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for ch in range(c):
                d = float(a[ch, i, j]) - float(b[ch, i, j])
                acc += d * d
            out[i, j] = acc / c
    return out


def test_local_map_identical_inputs_zero(rng):
    a = rng.normal(size=(4, 5, 6)).astype(np.float32)
    assert np.all(local_map(a, a) == 0.0)


def test_local_map_constant_difference():
    a = np.full((1, 3, 3), 5.0)
    b = np.full((1, 3, 3), 3.0)
    assert np.allclose(local_map(a, b), 4.0)
    assert np.allclose(global_map(a, b), 4.0)


def test_local_map_matches_loop_oracle(rng):
    a = rng.normal(size=(7, 9, 8)).astype(np.float32)
    b = rng.normal(size=(7, 9, 8)).astype(np.float32)
    assert np.max(np.abs(local_map(a, b) - loop_squared_diff_map(a, b))) < 1e-9
    assert np.max(np.abs(global_map(a, b) - loop_squared_diff_map(a, b))) < 1e-9


def test_map_shape_mismatch_rejected(rng):
    a = rng.normal(size=(2, 4, 4))
    b = rng.normal(size=(2, 4, 5))
    with pytest.raises(InputError):
        local_map(a, b)


def test_maps_nonnegative_zero_iff_equal(rng):
    a = rng.normal(size=(3, 6, 6))
    b = a.copy()
    b[:, 2, 3] += 0.5
    result = local_map(a, b)
    assert np.all(result >= 0.0)
    zero_mask = result == 0.0
    equal_mask = np.all(a == b, axis=0)
    assert np.array_equal(zero_mask, equal_mask)


def test_calibrate_degenerate_validation_maps():
    maps = [np.full((4, 4), 2.0) for _ in range(3)]
    with pytest.raises(CalibrationError):
        calibrate_map_normalizer(maps, maps)


def test_calibrate_quantiles_on_uniform_entries(rng):
    maps = [rng.uniform(0.0, 1.0, size=(64, 64)) for _ in range(40)]
    normalizer = calibrate_map_normalizer(maps, maps, q_low=0.9, q_high=0.995)
    assert abs(normalizer.local_low - 0.9) < 0.005
    assert abs(normalizer.local_high - 0.995) < 0.003
    assert normalizer.local_high > normalizer.local_low


def test_calibration_depends_only_on_pooled_multiset(rng):
    entries = rng.uniform(size=8 * 16)
    split_a = [entries[:64].reshape(8, 8), entries[64:].reshape(8, 8)]
    split_b = [chunk.reshape(4, 8) for chunk in np.split(entries, 4)]
    na = calibrate_map_normalizer(split_a, split_a)
    nb = calibrate_map_normalizer(split_b, split_b)
    assert na == nb


def make_normalizer(lo=1.0, hi=3.0):
    return MapNormalizer(local_low=lo, local_high=hi, global_low=lo, global_high=hi)


def test_combined_zero_maps_with_zero_qlow():
    normalizer = make_normalizer(lo=0.0, hi=1.0)
    zero = np.zeros((4, 4))
    assert np.all(combined_map(zero, zero, normalizer) == 0.0)


def test_combined_qhigh_qlow_entries():
    normalizer = make_normalizer(lo=1.0, hi=3.0)
    local = np.full((1, 1), 3.0)   # exactly q_high -> 0.1
    global_ = np.full((1, 1), 1.0)  # exactly q_low -> 0
    assert combined_map(local, global_, normalizer)[0, 0] == pytest.approx(0.05, abs=1e-15)


def test_combined_clamps_below_qlow():
    normalizer = make_normalizer(lo=1.0, hi=3.0)
    local = np.full((2, 2), 0.0)  # rescales negative, clamps to zero
    global_ = np.full((2, 2), 2.0)
    expected = 0.5 * (0.0 + 0.1 * (2.0 - 1.0) / 2.0)
    assert np.allclose(combined_map(local, global_, normalizer), expected)


def test_combined_matches_formula_oracle(rng):
    normalizer = MapNormalizer(
        local_low=0.2, local_high=1.4, global_low=0.1, global_high=0.9
    )
    local = rng.uniform(0, 2, size=(16, 16))
    global_ = rng.uniform(0, 2, size=(16, 16))
    result = combined_map(local, global_, normalizer)
    for i in range(16):
        for j in range(16):
            sl = max(0.1 * (local[i, j] - 0.2) / 1.2, 0.0)
            sg = max(0.1 * (global_[i, j] - 0.1) / 0.8, 0.0)
            assert abs(result[i, j] - 0.5 * (sl + sg)) < 1e-9


def test_combined_requires_normalizer(rng):
    with pytest.raises(InputError):
        combined_map(rng.uniform(size=(2, 2)), rng.uniform(size=(2, 2)), None)


def test_picturable_score_trivials():
    assert picturable_score(np.zeros((3, 3))) == 0.0
    assert picturable_score(np.array([[5.0]])) == 5.0
    with pytest.raises(InputError):
        picturable_score(np.zeros((0, 0)))


def test_picturable_score_matches_loop_max(rng):
    values = rng.normal(size=(12, 9)) ** 2
    best = -np.inf
    for row in values:
        for v in row:
            best = max(best, v)
    assert picturable_score(values) == best


def test_picturable_score_monotone(rng):
    for _ in range(20):
        a = rng.uniform(size=(6, 6))
        b = np.minimum(a, rng.uniform(size=(6, 6)))  # b <= a elementwise
        assert picturable_score(b) <= picturable_score(a)


def test_raw_map_round_trip(tmp_path, rng):
    original = rng.uniform(size=(11, 7)).astype(np.float32)
    path = tmp_path / "map.amap"
    save_map_raw(original, path)
    assert np.array_equal(load_map_raw(path), original)


def test_raw_map_bad_magic(tmp_path):
    path = tmp_path / "junk.amap"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(InputError):
        load_map_raw(path)


def test_heatmap_png_written(tmp_path, rng):
    path = tmp_path / "heatmap.png"
    save_heatmap_png(rng.uniform(size=(16, 16)), path)
    with Image.open(path) as img:
        assert img.size == (16, 16)
