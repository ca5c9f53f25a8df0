import json
import math

import numpy as np
import pytest

from dulda.metrics import (EvalReport, bias_variance, crc, evaluate, format_table, psnr, rmse,
                           ssim)
from dulda.phantom import RoiSpec


def test_rmse_and_psnr_hand_values():
    x = np.array([[0.0, 2.0], [4.0, 2.0]])
    y = x + np.array([[1.0, -1.0], [1.0, -1.0]])
    assert rmse(y, x) == pytest.approx(2.0 / np.sqrt(24.0))
    assert psnr(y, x) == pytest.approx(20 * np.log10(4.0))
    assert psnr(x, x) == math.inf


def test_metric_input_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        rmse(np.ones((2, 2)), np.zeros((2, 2)))


def test_ssim_identity_and_bounds(rng):
    x = rng.random((32, 32))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    v = ssim(x + 0.3 * rng.standard_normal(x.shape), x)
    assert -1 <= v < 1


def test_ssim_matches_skimage(rng):
    skm = pytest.importorskip("skimage.metrics")
    x = rng.random((40, 40)) * 5
    y = x + rng.standard_normal(x.shape)
    ref = skm.structural_similarity(y, x, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=x.max())
    assert ssim(y, x) == pytest.approx(ref, abs=1e-3)


def _roi():
    t = np.zeros((6, 6), bool)
    t[1:3, 1:3] = True
    bkg = np.zeros((6, 6), bool)
    bkg[4:, :] = True
    return RoiSpec([t], bkg)


def test_crc_hand_values():
    roi = _roi()
    truth = np.ones((6, 6))
    truth[roi.tumor_masks[0]] = 3.0
    assert crc(truth, truth, roi) == [pytest.approx(1.0)]
    rec = np.ones((6, 6))
    rec[roi.tumor_masks[0]] = 2.0
    assert crc(rec, truth, roi) == [pytest.approx(0.5)]
    # invariant to a global scale of the estimate
    assert crc(3 * rec, truth, roi) == [pytest.approx(0.5)]


def test_crc_errors():
    roi = _roi()
    with pytest.raises(ValueError):
        crc(np.ones((6, 6)), np.ones((6, 6)), roi)  # no true contrast
    truth = np.ones((6, 6))
    truth[roi.tumor_masks[0]] = 2
    with pytest.raises(ValueError):
        crc(np.zeros((6, 6)), truth, roi)


def test_bias_variance_hand_values():
    x = np.ones((2, 2))
    recs = np.stack([x * 0.5, x * 1.5, x * 1.0])
    bias, var = bias_variance(recs, x)
    assert bias == pytest.approx(0.0, abs=1e-15)
    # spreads: 4*0.25, 4*0.25, 0 -> mean 2/3 over ||mean||^2 = 4
    assert var == pytest.approx((2 / 3) / 4)
    with pytest.raises(ValueError):
        bias_variance(recs[:1], x)
    with pytest.raises(ValueError):
        bias_variance(recs, np.ones((3, 3)))


def test_evaluate_and_table(rng):
    roi = _roi()
    truth = np.ones((6, 6))
    truth[roi.tumor_masks[0]] = 3.0
    recs = [truth + 0.1 * rng.standard_normal(truth.shape) for _ in range(3)]
    rep = evaluate("MLEM", recs, [truth] * 3, rois=[roi] * 3)
    assert rep.psnr == pytest.approx(np.mean([psnr(r, truth) for r in recs]))
    assert len(rep.slices) == 3 and len(rep.crc) == 1
    assert json.loads(rep.to_json())["method"] == "MLEM"
    table = format_table([rep, EvalReport("X", 1, 0, 0.5, 0, 0.1, 0, [0.5])])
    assert table.splitlines()[0].split()[:3] == ["Method", "PSNR(dB)", "SSIM"]
    assert len(table.splitlines()) == 4


def test_evaluate_identical_images():
    x = np.arange(16.0).reshape(4, 4) + 1
    rep = evaluate("id", [x, x], [x, x])
    assert rep.psnr == math.inf and rep.rmse == 0.0
