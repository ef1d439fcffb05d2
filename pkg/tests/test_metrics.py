import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uilab.errors import NumericalError, ValidationError
from uilab.metrics import PSNR_IDENTICAL, MetricsRecord, auc_lower, cos_sim, mia_auc, mse, outdiff, psnr, ssim
from uilab.model import Dataset

img = arrays(np.float64, (8, 9, 1), elements=st.floats(0, 1))


def _noise(seed, shape=(16, 16, 1)):
    return np.random.default_rng(seed).uniform(size=shape)


def test_ssim_identity_and_noise():
    a = _noise(0)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, _noise(1))) < 0.2


def test_ssim_constant_images():
    a = np.full((10, 10, 1), 0.5)
    assert ssim(a, a) == pytest.approx(1.0)
    # luminance term only: (2*.5*.25 + C1) / (.25 + .0625 + C1)
    c1 = 1e-4
    expect = (2 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1)
    assert ssim(a, np.full((10, 10, 1), 0.25)) == pytest.approx(expect, rel=1e-10)


def test_ssim_small_image_global_window():
    a, b = _noise(2, (4, 4, 1)), _noise(3, (4, 4, 1))
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(), b.var()
    cv = ((a - ma) * (b - mb)).mean()
    expect = (2 * ma * mb + 1e-4) * (2 * cv + 9e-4) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4))
    assert ssim(a, b) == pytest.approx(expect, rel=1e-12)


@given(img, img)
@settings(max_examples=40, deadline=None)
def test_symmetry(a, b):
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert mse(a, b) == mse(b, a)
    assert psnr(a, b) == psnr(b, a)


# 8-bit levels: differences of ~1e-160 would underflow when squared
img8 = arrays(np.int64, (8, 9, 1), elements=st.integers(0, 255))


@given(img8, img8)
@settings(max_examples=40, deadline=None)
def test_mse_zero_iff_identical(a, b):
    a, b = a / 255.0, b / 255.0
    assert (mse(a, b) == 0) == np.array_equal(a, b)
    assert (mse(a, a) == 0)


def test_mse_psnr_hand():
    z, o = np.zeros((4, 4)), np.ones((4, 4))
    assert mse(z, o) == 1.0 and psnr(z, o) == 0.0
    assert psnr(z, z) == PSNR_IDENTICAL
    assert mse(np.array([[0.0, 0.0]]), np.array([[0.5, 0.0]])) == 0.125


def test_shape_mismatch():
    with pytest.raises(ValidationError):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 9, 1)))


def test_cos_sim():
    v = np.array([1.0, 2.0, 3.0])
    assert cos_sim(v, v) == pytest.approx(1.0)
    assert cos_sim([1, 0], [0, 1]) == 0.0
    assert cos_sim(v, [4, 5, 6]) == pytest.approx(32 / (np.sqrt(14) * np.sqrt(77)), abs=1e-14)
    assert cos_sim(v, [4, 5, 6]) == pytest.approx(0.97463, abs=1e-5)
    with pytest.raises(NumericalError):
        cos_sim([0, 0], [1, 1])


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=30, deadline=None)
def test_cos_scale_invariant(a, b):
    u, v = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, 2.0])
    assert cos_sim(a * u, b * v) == pytest.approx(cos_sim(u, v), abs=1e-12)


def test_auc_hand():
    assert auc_lower([1, 3], [0, 2]) == 0.25
    assert auc_lower([1, 2], [2, 1]) == 0.5
    assert auc_lower([0, 1], [2, 3]) == 1.0
    with pytest.raises(ValidationError):
        auc_lower([], [1])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8, unique=True),
       st.lists(st.floats(-5, 5), min_size=1, max_size=8, unique=True))
@settings(max_examples=50, deadline=None)
def test_auc_complement(m, n):
    if set(m) & set(n):
        return
    assert auc_lower(m, n) + auc_lower(n, m) == pytest.approx(1.0)


def test_outdiff_and_mia(tiny_theta, tiny_sample):
    assert outdiff(tiny_theta, tiny_theta, tiny_sample) == 0.0
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(6, 3, 3, 1))
    labels = np.array([0, 1, 2, 0, 1, 2])
    auc = mia_auc(tiny_theta, Dataset(imgs[:2], labels[:2]), Dataset(imgs[2:], labels[2:]))
    assert 0.0 <= auc <= 1.0


def test_record_defaults():
    d = MetricsRecord(ssim=0.5).as_dict()
    assert d["ssim"] == 0.5 and np.isnan(d["wall_time_s"]) and len(d) == 9
