import numpy as np
import pytest
from scipy import stats

from artinp import gaps
from artinp.volume_io import SliceImage, VolumeHU


def test_width_distribution_uniform():
    rng = np.random.default_rng(0)
    widths = np.array([gaps.sample_gap(160, rng).width for _ in range(10_000)])
    assert widths.min() == 48 and widths.max() == 96
    assert abs(widths.mean() - 72) < 1
    counts = np.bincount(widths - 48, minlength=49)
    assert stats.chisquare(counts).pvalue > 0.01


def test_start_keeps_strip_inside():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        s = gaps.sample_gap(160, rng)
        assert 0 <= s.x_start and s.x_start + s.width <= 160


def test_sample_deterministic_and_errors():
    assert gaps.sample_gap(160, 42) == gaps.sample_gap(160, 42)
    with pytest.raises(gaps.GapError):
        gaps.sample_gap(90, 0)


def test_apply_gap_example():
    img = np.arange(160 * 160, dtype=np.float64).reshape(160, 160)
    spec = gaps.GapSpec(0, 48)
    gapped, mask = gaps.apply_gap(img, spec, fill=-7.0)
    assert np.all(gapped[:, :48] == -7.0)
    assert np.array_equal(gapped[:, 48:], img[:, 48:])
    assert mask.sum() == 48 * 160
    again, _ = gaps.apply_gap(gapped, spec, fill=-7.0)
    assert np.array_equal(again, gapped)


def test_apply_gap_slice_image_and_mismatch():
    img = SliceImage(np.ones((20, 100), np.int16), index=3)
    gapped, mask = gaps.apply_gap(img, gaps.GapSpec(10, 50), 0)
    assert isinstance(gapped, SliceImage) and gapped.index == 3
    off = (1 - mask).astype(bool)
    assert np.array_equal(gapped.pixels[off], img.pixels[off])
    with pytest.raises(gaps.GapError):
        gaps.apply_gap(img, gaps.GapSpec(60, 50), 0)


@pytest.mark.parametrize("mode,shape", [("crop", (12, 170, 180)), ("resize", (12, 64, 64))])
def test_patient_gap_same_mask_every_sagittal_slice(mode, shape):
    data = np.random.default_rng(0).integers(-1024, 3071, shape).astype(np.int16)
    vol = VolumeHU(data)
    gapped, mask, spec = gaps.patient_gap(vol, 5, fill=-100, sagittal_mode=mode)
    assert spec.scope == gaps.PER_PATIENT
    assert mask.any()
    for i in range(1, shape[0]):
        assert np.array_equal(mask[i], mask[0])
    m = mask.astype(bool)
    assert np.all(gapped.data[m] == -100)
    assert np.array_equal(gapped.data[~m], data[~m])
    # strip is a range of columns (Z) in every sagittal slice
    cols = np.flatnonzero(mask[0].any(axis=0))
    assert np.array_equal(cols, np.arange(cols[0], cols[-1] + 1))


def test_patient_seeds_give_different_specs():
    vol = VolumeHU(np.zeros((2, 170, 170), np.int16))
    specs = {(s.x_start, s.width) for s in
             (gaps.patient_gap(vol, seed, 0)[2] for seed in range(200))}
    assert len(specs) > 190


def test_manifest_roundtrip(tmp_path):
    entries = [gaps.gap_manifest("P000", gaps.GapSpec(3, 50, gaps.PER_PATIENT, 9))]
    gaps.write_manifest(entries, tmp_path / "m.json")
    assert gaps.read_manifest(tmp_path / "m.json") == entries
