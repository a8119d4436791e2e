import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from u3spat.metrics import PSNR_INF, MetricError, dice, gaussian_window, psnr, ssim

rng = np.random.default_rng(0)


def test_psnr_identity_and_constant_ref():
    ref = rng.random((16, 16))
    assert psnr(ref, ref) == PSNR_INF
    with pytest.raises(MetricError):
        psnr(ref, np.ones((16, 16)))
    with pytest.raises(MetricError):
        psnr(ref, np.ones((8, 8)))


def test_psnr_closed_forms():
    ref = (rng.random((20, 20)) > 0.5).astype(float)
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0)
    x = ref.copy()
    x[3, 4] += 1.0
    assert psnr(x, ref) == pytest.approx(10 * math.log10(ref.size))


def test_psnr_uses_reference_range():
    ref = 5.0 + 3.0 * rng.random((16, 16))
    x = ref + 0.01 * rng.standard_normal(ref.shape)
    peak = ref.max() - ref.min()
    assert psnr(x, ref) == pytest.approx(10 * math.log10(peak**2 / np.mean((x - ref) ** 2)))


def test_psnr_decreases_with_noise():
    ref = rng.random((32, 32))
    noise = rng.standard_normal(ref.shape)
    vals = [psnr(ref + a * noise, ref) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_gaussian_window():
    w = gaussian_window(11, 1.5)
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)
    assert np.allclose(w, w.T)


def test_ssim_matches_skimage():
    ref = rng.random((40, 40))
    x = ref + 0.1 * rng.standard_normal(ref.shape)
    ours = ssim(x, ref)
    theirs = structural_similarity(
        x, ref, data_range=ref.max() - ref.min(), gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ours == pytest.approx(theirs, abs=1e-6)


def test_ssim_examples():
    ref = rng.random((32, 32))
    assert ssim(ref, ref) == pytest.approx(1.0)
    # zero mean inside every window, so only the structure term changes sign
    zm = np.indices((32, 32)).sum(axis=0) % 2 * 2.0 - 1.0
    assert ssim(-zm, zm) < 0
    noisy = ref + 0.1 * np.random.default_rng(7).standard_normal(ref.shape)
    assert 0 < ssim(noisy, ref) < 1
    with pytest.raises(MetricError):
        ssim(ref, ref[:-1])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (16, 16), elements=st.floats(-100, 100)))
def test_ssim_self_is_one(x):
    assert ssim(x, x) == pytest.approx(1.0)


def test_dice_examples():
    a = np.zeros((10, 10), bool)
    a[:, :4] = True
    b = np.zeros((10, 10), bool)
    b[:, 2:6] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(MetricError):
        dice(np.full((3, 3), 0.5), np.zeros((3, 3)))
    with pytest.raises(MetricError):
        dice(a, a[:5])


@settings(max_examples=50, deadline=None)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_dice_symmetric_and_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0
