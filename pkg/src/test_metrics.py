import csv
import json
import math

import numpy as np
import pytest
from PIL import Image

from ct_tools.datamodel import ValidationError, Volume
from ct_tools.metrics_tool import CSV_COLUMNS, evaluate_volume, mse, psnr, ssim, value_range
from ct_tools.preview_tool import save_preview, to_uint8, write_previews


def _ramp(n=16):
    return np.add.outer(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64)) / (2 * (n - 1))


def test_psnr_of_known_error():
    ref = _ramp()
    assert value_range(ref) == pytest.approx(1.0)
    assert mse(ref + 0.1, ref) == pytest.approx(0.01)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0)
    assert psnr(ref + 0.1, ref, data_range=10.0) == pytest.approx(40.0)


def test_psnr_of_identical_images_is_infinite():
    ref = _ramp()
    assert psnr(ref, ref) == math.inf


def test_psnr_needs_a_range():
    with pytest.raises(ValidationError):
        psnr(np.ones((8, 8)), np.ones((8, 8)))
    with pytest.raises(ValidationError):
        psnr(np.ones((8, 8)), np.ones((8, 9)))


def test_ssim_is_one_for_identical_images_and_drops_with_noise():
    ref = _ramp()
    assert ssim(ref, ref) == pytest.approx(1.0)
    noisy = ref + np.random.default_rng(0).normal(0.0, 0.1, ref.shape)
    assert ssim(noisy, ref) < 0.9
    assert ssim(noisy, ref) == pytest.approx(ssim(noisy, ref))


def test_ssim_validates_inputs():
    with pytest.raises(ValidationError):
        ssim(np.zeros((2, 8, 8)), np.zeros((2, 8, 8)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((5, 5)), _ramp(5))
    with pytest.raises(ValidationError):
        ssim(np.zeros((8, 8)), np.ones((8, 8)))


def test_evaluate_volume_uses_reference_volume_range(tmp_path):
    ref = Volume(np.stack([_ramp(), 2.0 * _ramp()]))
    result = Volume(ref.data + 0.2)
    report = evaluate_volume(result, ref, "shifted")
    assert report.data_range == pytest.approx(2.0)
    assert report.psnr == pytest.approx([20.0, 20.0])
    assert report.mean_mse == pytest.approx(0.04)
    assert report.summary()["label"] == "shifted"

    report.to_csv(tmp_path / "metrics.csv")
    with open(tmp_path / "metrics.csv", newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 3
    doc = json.loads(report.to_json(tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert doc["slices"] == 2
    assert doc["mean_psnr"] == pytest.approx(20.0)


def test_evaluate_volume_validates_inputs():
    ref = Volume(np.stack([_ramp(), _ramp()]))
    with pytest.raises(ValidationError):
        evaluate_volume(Volume(np.zeros((1, 16, 16))), ref)
    with pytest.raises(ValidationError):
        evaluate_volume(ref, Volume(np.ones((2, 16, 16))))


def test_to_uint8_windows_to_min_max():
    pixels, window = to_uint8(np.array([[1.0, 2.0], [3.0, 5.0]]))
    assert window == (1.0, 5.0)
    assert pixels.dtype == np.uint8
    assert pixels[0, 0] == 0 and pixels[1, 1] == 255
    flat, _ = to_uint8(np.full((2, 2), 7.0))
    assert not flat.any()
    with pytest.raises(ValidationError):
        to_uint8(np.zeros((2, 2, 2)))


def test_previews_are_written_with_window_sidecars(tmp_path):
    stack = Volume(np.stack([_ramp(), 3.0 * _ramp(), _ramp()]))
    written = write_previews({"r_star": stack}, tmp_path, formats=("pgm", "png"))
    assert [p.name for p in written] == ["r_star.pgm", "r_star.png"]
    with Image.open(tmp_path / "r_star.pgm") as img:
        assert img.mode == "L"
        assert img.size == (16, 16)
    with Image.open(tmp_path / "r_star.png") as img:
        assert img.mode == "L"
        np.testing.assert_array_equal(np.asarray(img), to_uint8(3.0 * _ramp())[0])
    sidecar = json.loads((tmp_path / "r_star.pgm.json").read_text(encoding="utf-8"))
    assert sidecar["window"] == pytest.approx([0.0, 3.0])
    with pytest.raises(ValidationError):
        save_preview(_ramp(), tmp_path / "x.tiff")
