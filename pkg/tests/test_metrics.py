import numpy as np
import pytest
from skimage.metrics import structural_similarity

from activenerf.metrics import MetricRecord, psnr, read_report, ssim, write_report


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(0.2, 0.8, size=(8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_psnr_symmetric_and_monotone_in_noise():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16, 3))
    noise = rng.uniform(-1, 1, size=img.shape)
    vals = [psnr(img, img + amp * noise) for amp in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]
    b = img + 0.05 * noise
    assert psnr(img, b) == psnr(b, img)


def test_ssim_identity_negation_symmetry():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 24, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-9
    assert ssim(a, 1.0 - a) < 1.0
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_ssim_constant_images_closed_form():
    x, y = 0.3, 0.7
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * x * y + c1) / (x * x + y * y + c1)  # structure term is c2/c2 = 1
    val = ssim(np.full((16, 16), x), np.full((16, 16), y))
    assert val < 1.0
    assert val == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_reference_implementation():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(32, 29, 3))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=-1, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=True)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)


def _records():
    return [MetricRecord(0, 2, 15.25, 0.5, 0.01, 1.5), MetricRecord(1, 4, 17.125, 0.625, 0.02, 3.0)]


def test_report_round_trip_and_determinism(tmp_path):
    recs = _records()
    write_report(recs, tmp_path / "a.csv")
    write_report(recs, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_report(tmp_path / "a.csv") == recs


def test_report_empty_and_bad_path(tmp_path):
    write_report([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "round,n_train_views,psnr,ssim,mean_variance,wall_time_s\n"
    with pytest.raises(OSError):
        write_report(_records(), tmp_path / "missing" / "x.csv")
    with pytest.raises(ValueError):
        write_report(_records(), tmp_path / "x.csv", columns=("round", "lpips"))


def test_record_validation():
    with pytest.raises(ValueError):
        MetricRecord(0, 1, float("inf"), 0.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        MetricRecord(0, 1, 10.0, 1.5, 0.0, 0.0)
