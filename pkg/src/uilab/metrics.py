"""Evaluation quantities: image similarity, forgetting drift, membership inference."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from uilab.errors import NumericalError, ValidationError
from uilab.model import ParamVector, batch_loss_grad, forward

PSNR_IDENTICAL = 99.0

SSIM_WIN = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricsRecord:
    ssim: float = float("nan")
    psnr: float = float("nan")
    mse: float = float("nan")
    acc_test: float = float("nan")
    outdiff: float = float("nan")
    cos_delta: float = float("nan")
    mia_auc: float = float("nan")
    attack_final_loss: float = float("nan")
    wall_time_s: float = float("nan")

    def as_dict(self):
        return asdict(self)


def _as_hwc(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValidationError(f"image must be HxW or HxWxC, got shape {a.shape}")
    return a


def _check_pair(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_terms(mu_a, mu_b, var_a, var_b, cov):
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over all full 7x7 Gaussian windows and channels (data range 1).

    Images smaller than the window on either side are scored with a single
    global, unweighted window.
    """
    a, b = _check_pair(a, b)
    h, w, _ = a.shape
    if h < SSIM_WIN or w < SSIM_WIN:
        axes = (0, 1)
        mu_a, mu_b = a.mean(axis=axes), b.mean(axis=axes)
        var_a = ((a - mu_a) ** 2).mean(axis=axes)
        var_b = ((b - mu_b) ** 2).mean(axis=axes)
        cov = ((a - mu_a) * (b - mu_b)).mean(axis=axes)
        return float(np.mean(_ssim_terms(mu_a, mu_b, var_a, var_b, cov)))
    win = gaussian_window()

    def filt(img):
        patches = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WIN, SSIM_WIN), axis=(0, 1))
        return np.einsum("hwcij,ij->hwc", patches, win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return float(np.mean(_ssim_terms(mu_a, mu_b, var_a, var_b, cov)))


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0.0:
        return PSNR_IDENTICAL
    return float(10.0 * np.log10(1.0 / err))


def outdiff(theta_u: ParamVector, theta_def: ParamVector, x) -> float:
    """L2 distance between the two models' logits on x."""
    return float(np.linalg.norm(forward(theta_u, x) - forward(theta_def, x)))


def cos_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValidationError(f"length mismatch: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericalError("cosine similarity of a zero vector")
    return float(np.dot(u, v) / (nu * nv))


def auc_lower(member_scores, nonmember_scores) -> float:
    """P(member score < nonmember score), ties counted as one half."""
    m = np.asarray(member_scores, dtype=np.float64).ravel()
    n = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if m.size == 0 or n.size == 0:
        raise ValidationError("AUC needs at least one member and one non-member")
    diff = m[:, None] - n[None, :]
    return float(((diff < 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def sample_losses(theta: ParamVector, images, labels) -> np.ndarray:
    X = np.asarray(images, dtype=np.float64).reshape(len(labels), -1)
    losses, _, _ = batch_loss_grad(theta.arch, theta.values, X, labels, want_params=False)
    return losses


def mia_auc(theta: ParamVector, members, nonmembers) -> float:
    """Loss-threshold membership inference AUC.

    ``members`` and ``nonmembers`` are ``Dataset``-like objects; the score is
    per-sample cross-entropy and members are expected to have lower loss.
    """
    lm = sample_losses(theta, members.images, members.labels)
    ln = sample_losses(theta, nonmembers.images, nonmembers.labels)
    return auc_lower(lm, ln)
