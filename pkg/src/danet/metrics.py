"""Denoising quality and noise-distribution metrics.

PSNR and SSIM are the standard single-image scores on [0, peak] data, in
float64 regardless of input dtype.  The variance map smooths the squared
residual with the same Gaussian window the losses use; the KL-based score
(akld) compares sampled noise against the real residual field through
those maps; the PSNR gap trains one denoiser recipe on real pairs and on
synthetic pairs and reports the held-out difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, no_grad
from .tensor import ops

PSNR_CAP = 100.0

Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def _img3(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected an image of shape (C, H, W) or (H, W), got {arr.shape}")
    return arr


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB, capped for (near-)identical inputs."""
    a, b = _img3(a), _img3(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: image shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def _window_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode weighted window means over the spatial axes of (C, H, W)."""
    win = sliding_window_view(x, kernel.shape, axis=(1, 2))
    return np.tensordot(win, kernel, axes=([3, 4], [0, 1]))


def ssim(
    a,
    b,
    peak: float = 1.0,
    size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity with a Gaussian window, valid borders."""
    a, b = _img3(a), _img3(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: image shapes {a.shape} and {b.shape} differ")
    if min(a.shape[1], a.shape[2]) < size:
        raise ShapeError(f"ssim: image {a.shape} smaller than the {size}x{size} window")
    kernel = ops.gaussian_kernel(size, sigma)
    mu1 = _window_mean(a, kernel)
    mu2 = _window_mean(b, kernel)
    s11 = _window_mean(a * a, kernel) - mu1 * mu1
    s22 = _window_mean(b * b, kernel) - mu2 * mu2
    s12 = _window_mean(a * b, kernel) - mu1 * mu2
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def variance_map(
    y, x, size: int = 11, sigma: float = 3.0, floor: float = 1e-6
) -> np.ndarray:
    """Local noise variance: Gaussian-smoothed squared residual, floored.

    The floor keeps downstream ratios and logs finite on flat regions.
    """
    y, x = _img3(y), _img3(x)
    if y.shape != x.shape:
        raise ShapeError(f"variance_map: image shapes {y.shape} and {x.shape} differ")
    if floor <= 0:
        raise ShapeError(f"variance_map: floor must be positive, got {floor}")
    resid = Tensor((y - x)[None] ** 2, dtype=np.float64)
    with no_grad():
        smooth = ops.gaussian_filter(resid, size, sigma).data[0]
    return np.maximum(smooth, floor)


def akld(
    sampler: Sampler,
    x,
    y,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
    size: int = 11,
    sigma: float = 3.0,
    floor: float = 1e-6,
) -> float:
    """Average KL divergence between sampled and real local noise variance.

    Draws ``n_samples`` noisy versions of clean image ``x`` from the
    sampler, compares each sample's variance map against the real pair's,
    and averages the per-pixel Gaussian KL over pixels and samples.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x3, y3 = _img3(x), _img3(y)
    v_real = variance_map(y3, x3, size, sigma, floor)
    total = 0.0
    for _ in range(int(n_samples)):
        yhat = _img3(sampler(x3, rng))
        if yhat.shape != x3.shape:
            raise ShapeError(f"akld: sampler returned shape {yhat.shape} for image {x3.shape}")
        v_fake = variance_map(yhat, x3, size, sigma, floor)
        ratio = v_fake / v_real
        total += float(np.mean(0.5 * (ratio - np.log(ratio) - 1.0)))
    return total / int(n_samples)


def akld_set(
    sampler: Sampler,
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
    **kw,
) -> float:
    """Dataset-level score: mean of per-image akld values."""
    if rng is None:
        rng = np.random.default_rng(0)
    vals = [akld(sampler, x, y, n_samples, rng, **kw) for x, y in pairs]
    if not vals:
        raise ShapeError("akld_set: empty pair list")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# denoiser evaluation and the PSNR gap


def denoise_image(net, y: np.ndarray, clip: bool = True) -> np.ndarray:
    """Run the denoiser on one (C, H, W) image, optionally clipped to [0, 1]."""
    from . import nets

    t = Tensor(np.asarray(y, dtype=np.float32)[None])
    with no_grad():
        out = nets.denoiser_forward(net, t).data[0]
    return np.clip(out, 0.0, 1.0) if clip else out


def evaluate_psnr(net, pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean PSNR of the denoised estimates against clean images."""
    vals = []
    for x, y in pairs:
        xhat = denoise_image(net, y)
        vals.append(psnr(xhat, np.asarray(x, dtype=np.float64)))
    if not vals:
        raise ShapeError("evaluate_psnr: empty pair list")
    return float(np.mean(vals))


@dataclass(frozen=True)
class PGapResult:
    value: float
    psnr_real: float
    psnr_synth: float


def pgap(
    real_set,
    synth_set,
    eval_pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    config,
    seed: int,
    psnr_real: float | None = None,
) -> PGapResult:
    """PSNR gap between real-trained and synthetic-trained denoisers.

    Trains the plain L1 recipe in ``config`` once per pair source with the
    same seed and evaluates both on ``eval_pairs``.  Passing a cached
    ``psnr_real`` skips retraining the real-side denoiser, which keeps
    repeated gap evaluations against one reference affordable.
    """
    from . import train as _train

    if psnr_real is None:
        r_real = _train.train_l1(config, real_set, seed=seed)
        psnr_real = evaluate_psnr(r_real, eval_pairs)
    r_synth = _train.train_l1(config, synth_set, seed=seed)
    psnr_synth = evaluate_psnr(r_synth, eval_pairs)
    return PGapResult(float(psnr_real) - float(psnr_synth), float(psnr_real), float(psnr_synth))


@dataclass(frozen=True)
class MetricReport:
    """One metric value plus everything needed to reproduce it."""

    metric: str
    value: float
    count: int
    seed: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "count": self.count,
            "seed": self.seed,
            "params": dict(self.params),
        }
