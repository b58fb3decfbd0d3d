import math

import numpy as np
import pytest

from cordseg import pipeline as pl
from cordseg.errors import ConfigError, DataFormatError, ManifestError


# ---------------------------------------------------------------------------
# slice / label round trips


def make_slice(rng, h=32, w=32, c=8):
    pixels = rng.standard_normal((h, w, c)).astype(np.float32).astype(np.float64)
    return pl.MultiChannelSlice(pixels, (0.67, 0.67), "S05", 2, 7)


def test_slice_roundtrip_bitwise(tmp_path):
    slc = make_slice(np.random.default_rng(40))
    path = tmp_path / "a.mcs"
    pl.save_slice(slc, path)
    back = pl.load_slice(path)
    assert np.array_equal(back.pixels, slc.pixels)
    assert back.spacing_mm == slc.spacing_mm
    assert (back.subject_id, back.scan_index, back.slice_index) == ("S05", 2, 7)
    # file-level: save(load(f)) reproduces the bytes
    pl.save_slice(back, tmp_path / "b.mcs")
    assert (tmp_path / "a.mcs").read_bytes() == (tmp_path / "b.mcs").read_bytes()


def test_label_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(41)
    lm = pl.LabelMap(rng.integers(0, 3, (20, 24)).astype(np.uint8),
                     (0.25, 0.25), "S01", 3, 4, rater=2)
    pl.save_labels(lm, tmp_path / "a.lbl")
    back = pl.load_labels(tmp_path / "a.lbl")
    assert np.array_equal(back.classes, lm.classes)
    assert back.rater == 2


def test_truncated_payload_reports_byte_counts(tmp_path):
    slc = make_slice(np.random.default_rng(42), 8, 8, 2)
    path = tmp_path / "t.mcs"
    pl.save_slice(slc, path)
    data = path.read_bytes()
    path.write_bytes(data[:-17])
    with pytest.raises(DataFormatError, match=r"\d+ bytes, expected \d+"):
        pl.load_slice(path)


def test_checksum_mismatch_raises(tmp_path):
    slc = make_slice(np.random.default_rng(43), 8, 8, 2)
    path = tmp_path / "c.mcs"
    pl.save_slice(slc, path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(DataFormatError, match="checksum"):
        pl.load_slice(path)


def test_unknown_version_raises(tmp_path):
    path = tmp_path / "v.mcs"
    path.write_bytes(b"MCS 9\nEND\n")
    with pytest.raises(DataFormatError, match="magic"):
        pl.load_slice(path)


def test_label_palette_enforced():
    with pytest.raises(DataFormatError):
        pl.LabelMap(np.full((4, 4), 7, dtype=np.uint8))


# ---------------------------------------------------------------------------
# Lanczos resampling


def lanczos_oracle_1d(values, factor, a=3):
    """Direct per-pixel windowed-sinc sum with edge clamp and renormalization."""
    n_in = len(values)
    n_out = int(round(n_in * factor))
    out = []
    for i in range(n_out):
        s = (i + 0.5) / factor - 0.5
        total = wsum = 0.0
        for j in range(int(math.ceil(s - a)), int(math.floor(s + a)) + 1):
            t = s - j
            w = 0.0 if abs(t) >= a else np.sinc(t) * np.sinc(t / a)
            total += w * values[min(max(j, 0), n_in - 1)]
            wsum += w
        out.append(total / wsum)
    return np.array(out)


def test_factor_one_is_identity():
    slc = make_slice(np.random.default_rng(44), 12, 10, 3)
    out = pl.lanczos_resample(slc, factor=1.0)
    np.testing.assert_allclose(out.pixels, slc.pixels, atol=1e-12)


def test_constant_maps_to_constant():
    slc = pl.MultiChannelSlice(np.full((9, 9, 2), 3.7), (0.67, 0.67))
    out = pl.lanczos_resample(slc, factor=10.0)
    assert out.pixels.shape == (90, 90, 2)
    np.testing.assert_allclose(out.pixels, 3.7, atol=1e-9)
    assert out.spacing_mm == (0.067, 0.067)


def test_ramp_upsample_matches_kernel_sum_oracle():
    ramp = np.arange(16, dtype=np.float64)
    slc = pl.MultiChannelSlice(ramp[None, :, None], (1.0, 1.0))
    out = pl.lanczos_resample(slc, factor=2.0)
    expected = lanczos_oracle_1d(ramp, 2.0)
    np.testing.assert_allclose(out.pixels[0, :, 0], expected, atol=1e-9)


def test_target_spacing_selects_factor():
    slc = make_slice(np.random.default_rng(45), 10, 10, 1)
    out = pl.lanczos_resample(slc, target_spacing=(0.25, 0.25))
    assert out.pixels.shape[0] == round(10 * 0.67 / 0.25)
    np.testing.assert_allclose(out.spacing_mm, (0.25, 0.25), rtol=1e-12)


def test_resample_commutes_with_channel_permutation():
    slc = make_slice(np.random.default_rng(46), 8, 8, 4)
    perm = [2, 0, 3, 1]
    a = pl.lanczos_resample(slc, factor=1.5).pixels[:, :, perm]
    b = pl.lanczos_resample(
        pl.MultiChannelSlice(slc.pixels[:, :, perm], slc.spacing_mm), factor=1.5).pixels
    np.testing.assert_array_equal(a, b)


def test_bad_factor_raises():
    slc = make_slice(np.random.default_rng(47), 4, 4, 1)
    with pytest.raises(ConfigError):
        pl.lanczos_resample(slc, factor=-2.0)
    with pytest.raises(ConfigError):
        pl.lanczos_resample(slc)


# ---------------------------------------------------------------------------
# crop / pad


def test_inner_ninth_crop_1950():
    slc = pl.MultiChannelSlice(np.zeros((1950, 1950, 1)), (0.067, 0.067))
    out = pl.inner_ninth_crop(slc)
    assert out.pixels.shape == (650, 650, 1)


def test_crop_to_same_extent_is_identity():
    slc = make_slice(np.random.default_rng(48), 64, 64, 2)
    out = pl.center_crop_or_pad(slc, (64, 64))
    np.testing.assert_array_equal(out.pixels, slc.pixels)


def test_pad_then_inverse_crop_recovers():
    rng = np.random.default_rng(49)
    arr = rng.standard_normal((100, 100))
    padded = pl.center_crop_or_pad(arr, (640, 640), pad_value=0.0)
    assert padded.shape == (640, 640)
    recovered = pl.center_crop_or_pad(padded, (100, 100))
    np.testing.assert_array_equal(recovered, arr)


def test_crop_offset_uses_floor():
    arr = np.arange(5)[:, None] * np.ones((1, 5))
    out = pl.center_crop_or_pad(arr, (2, 5))
    # offset floor((5-2)/2) = 1 -> rows 1..2
    np.testing.assert_array_equal(out[:, 0], [1, 2])


def test_crop_or_pad_idempotent():
    rng = np.random.default_rng(50)
    arr = rng.standard_normal((30, 41))
    once = pl.center_crop_or_pad(arr, (25, 50), pad_value=1.5)
    twice = pl.center_crop_or_pad(once, (25, 50), pad_value=1.5)
    np.testing.assert_array_equal(once, twice)


def test_label_map_crop_keeps_dtype():
    lm = pl.LabelMap(np.ones((10, 10), dtype=np.uint8))
    out = pl.center_crop_or_pad(lm, (16, 16))
    assert out.classes.dtype == np.uint8
    assert out.classes.shape == (16, 16)


# ---------------------------------------------------------------------------
# Gaussian high-pass


def test_highpass_constant_is_zero():
    out = pl.gaussian_highpass(np.full((40, 40), 5.0), variance=10.0)
    np.testing.assert_allclose(out, 0.0, atol=1e-9)


def test_highpass_impulse_matches_kernel_oracle():
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    out = pl.gaussian_highpass(img, variance=10.0)
    k = pl.gaussian_kernel_1d(10.0)
    expected = np.zeros_like(img)
    r = len(k) // 2
    expected[20 - r:20 + r + 1, 20 - r:20 + r + 1] = -np.outer(k, k)
    expected[20, 20] += 1.0
    np.testing.assert_allclose(out, expected, atol=1e-9)


def test_highpass_rejects_dc_on_smooth_input():
    y, x = np.mgrid[0:80, 0:80]
    img = 10.0 + 0.02 * x + 0.01 * y
    out = pl.gaussian_highpass(img, variance=10.0)
    interior = out[20:-20, 20:-20]
    assert abs(interior.sum()) / interior.size < 1e-6


def test_highpass_idempotent_on_constant():
    first = pl.gaussian_highpass(np.full((30, 30), 2.0), 10.0)
    second = pl.gaussian_highpass(first, 10.0)
    np.testing.assert_allclose(second, 0.0, atol=1e-9)


def test_highpass_per_channel_on_slice():
    slc = make_slice(np.random.default_rng(51), 20, 20, 3)
    out = pl.gaussian_highpass(slc, 10.0)
    for c in range(3):
        np.testing.assert_allclose(out.pixels[:, :, c],
                                   pl.gaussian_highpass(slc.pixels[:, :, c], 10.0))


def test_highpass_bad_variance():
    with pytest.raises(ConfigError):
        pl.gaussian_highpass(np.zeros((4, 4)), variance=0.0)


# ---------------------------------------------------------------------------
# manifests


def write_fake_dataset(root, subjects, scans=3, slices=2, raters=(0,)):
    rows = []
    for s in subjects:
        for scan in range(1, scans + 1):
            for sl in range(1, slices + 1):
                for rater in raters:
                    rows.append(pl.ManifestRow(
                        s, scan, sl, rater,
                        f"images/{s}_{scan}_{sl}.mcs",
                        f"labels/{s}_{scan}_{sl}_r{rater}.lbl"))
    root.mkdir(parents=True, exist_ok=True)
    pl.write_inventory(rows, root / "dataset.txt")
    return rows


def test_group_split_24_subjects(tmp_path):
    subjects = [f"S{i:02d}" for i in range(24)]
    write_fake_dataset(tmp_path, subjects)
    split = pl.group_split(subjects, 3, test_group=2, val_index=0)
    assert len(split["test"]) == 8
    assert len(split["val"]) == 1
    assert len(split["train"]) == 15
    manifest = pl.build_manifest(tmp_path, split)
    manifest.check_split_disjoint()
    assert len(manifest.rows_for("test")) == 8 * 3 * 2


def test_empty_root_raises(tmp_path):
    with pytest.raises(ManifestError):
        pl.build_manifest(tmp_path / "missing", {"train": []})
    empty = tmp_path / "empty"
    empty.mkdir()
    pl.write_inventory([], empty / "dataset.txt")
    with pytest.raises(ManifestError):
        pl.build_manifest(empty, {"train": []})


def test_duplicate_slice_path_raises(tmp_path):
    rows = write_fake_dataset(tmp_path, ["S00"])
    pl.write_inventory(rows + [rows[0]], tmp_path / "dataset.txt")
    with pytest.raises(ManifestError, match="duplicate"):
        pl.build_manifest(tmp_path, {"train": ["S00"]})


def test_subject_in_two_splits_raises(tmp_path):
    write_fake_dataset(tmp_path, ["S00", "S01"])
    with pytest.raises(ManifestError, match="both"):
        pl.build_manifest(tmp_path, {"train": ["S00"], "val": ["S00"]})


def test_unknown_subject_in_split_raises(tmp_path):
    write_fake_dataset(tmp_path, ["S00"])
    with pytest.raises(ManifestError, match="unknown"):
        pl.build_manifest(tmp_path, {"train": ["S99"]})


def test_manifest_inventory_roundtrip(tmp_path):
    rows = write_fake_dataset(tmp_path, ["S00", "S01"], raters=(0, 1))
    back = pl.read_inventory(tmp_path / "dataset.txt")
    assert back == rows


# ---------------------------------------------------------------------------
# PNG helpers


def test_png_roundtrip_quantized(tmp_path):
    rng = np.random.default_rng(52)
    img = rng.random((16, 16))
    pl.export_png(img, tmp_path / "x.png", lo=0.0, hi=1.0)
    back = pl.import_png(tmp_path / "x.png")
    assert back.shape == (16, 16)
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12


def test_boundary_pixels_of_square():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    edge = pl.boundary_pixels(mask)
    assert edge.sum() == 12  # 4x4 square: perimeter minus nothing, 16 - 4 inner
    assert not edge[3:5, 3:5].any()


def test_contour_overlay_writes_rgb(tmp_path):
    img = np.zeros((10, 10))
    mask = np.zeros((10, 10), dtype=bool)
    mask[3:7, 3:7] = True
    pl.contour_overlay_png(img, [(mask, (255, 0, 0))], tmp_path / "o.png")
    from PIL import Image

    rgb = np.asarray(Image.open(tmp_path / "o.png"))
    assert rgb.shape == (10, 10, 3)
    assert (rgb[3, 3] == [255, 0, 0]).all()
