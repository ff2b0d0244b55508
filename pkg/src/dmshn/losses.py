"""Differentiable losses (L1, SSIM, MS-SSIM) and evaluation metrics.

SSIM follows the canonical construction: 11x11 Gaussian window with sigma
1.5, stabilizers c1 = (0.01 L)^2 and c2 = (0.03 L)^2, the index averaged over
all fully valid windows and channels. MS-SSIM is the weighted product of the
per-scale mean contrast/structure terms with the full SSIM mean at the
coarsest scale, 2x average pooling between scales. Both are assembled from
taped primitives, so gradients come from the chain rule rather than a
hand-derived composite backward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimsDiffer, ShapeMismatch, TooSmall
from .layers import avg_pool2x
from .tensor import Tensor, _record


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

_MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


@dataclass(frozen=True)
class MsSsimConfig:
    scales: int = 5
    weights: tuple = _MS_SSIM_WEIGHTS
    ssim: SsimConfig = field(default_factory=SsimConfig)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=np.float64) -> np.ndarray:
    """1-D Gaussian taps normalized to sum 1 (2-D window = outer product)."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return g.astype(dtype)


# ---------------------------------------------------------------------------
# Separable windowed filtering (valid mode)
# ---------------------------------------------------------------------------


def _corr1d_valid(x: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    x = np.moveaxis(x, axis, -1)
    k = g.size
    L = x.shape[-1] - k + 1
    out = g[0] * x[..., :L]
    for t in range(1, k):
        out += g[t] * x[..., t:t + L]
    return np.moveaxis(out, -1, axis)


def _corr1d_valid_adjoint(gout: np.ndarray, g: np.ndarray, axis: int, src: int) -> np.ndarray:
    gout = np.moveaxis(gout, axis, -1)
    L = gout.shape[-1]
    gx = np.zeros(gout.shape[:-1] + (src,), dtype=gout.dtype)
    for t in range(g.size):
        gx[..., t:t + L] += g[t] * gout
    return np.moveaxis(gx, -1, axis)


def window_filter(x: Tensor, g1d: np.ndarray) -> Tensor:
    """Per-channel valid-mode filtering with a separable symmetric window."""
    n, c, h, w = x.shape
    g = g1d.astype(x.dtype, copy=False)
    out = _corr1d_valid(_corr1d_valid(x.data, g, 2), g, 3)

    def backward(gr):
        gr = _corr1d_valid_adjoint(gr, g, 3, w)
        gr = _corr1d_valid_adjoint(gr, g, 2, h)
        return (np.ascontiguousarray(gr),)

    return _record(np.ascontiguousarray(out), (x,), backward, "window_filter")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"l1_loss: {pred.shape} vs {gt.shape}")
    return T.reduce_mean(T.abs_(T.sub(pred, gt)))


def _ssim_means(x: Tensor, y: Tensor, cfg: SsimConfig) -> tuple[Tensor, Tensor]:
    """Scalar means of the SSIM map and of its contrast/structure factor."""
    g = gaussian_window(cfg.window_size, cfg.sigma, dtype=x.dtype)
    mu_x = window_filter(x, g)
    mu_y = window_filter(y, g)
    mu_xx = T.mul(mu_x, mu_x)
    mu_yy = T.mul(mu_y, mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    # E[x^2] - E[x]^2 etc. over the Gaussian window
    var_x = T.sub(window_filter(T.mul(x, x), g), mu_xx)
    var_y = T.sub(window_filter(T.mul(y, y), g), mu_yy)
    cov_xy = T.sub(window_filter(T.mul(x, y), g), mu_xy)

    lum = T.div(
        T.add_scalar(T.mul_scalar(mu_xy, 2.0), cfg.c1),
        T.add_scalar(T.add(mu_xx, mu_yy), cfg.c1),
    )
    cs = T.div(
        T.add_scalar(T.mul_scalar(cov_xy, 2.0), cfg.c2),
        T.add_scalar(T.add(var_x, var_y), cfg.c2),
    )
    return T.reduce_mean(T.mul(lum, cs)), T.reduce_mean(cs)


def ssim(x: Tensor, y: Tensor, cfg: SsimConfig | None = None) -> Tensor:
    """Mean SSIM index over valid windows and channels, in [-1, 1]."""
    cfg = cfg or SsimConfig()
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim: {x.shape} vs {y.shape}")
    if x.shape[2] < cfg.window_size or x.shape[3] < cfg.window_size:
        raise TooSmall(
            f"ssim needs h, w >= {cfg.window_size}; got {x.shape[2]}x{x.shape[3]}")
    mean_ssim, _ = _ssim_means(x, y, cfg)
    return mean_ssim


def feasible_scales(h: int, w: int, cfg: MsSsimConfig) -> int:
    """Largest scale count the image supports, capped at cfg.scales."""
    side = min(h, w)
    win = cfg.ssim.window_size
    m = 0
    while m < cfg.scales and side // (2 ** m) >= win:
        m += 1
    return m


def ms_ssim(x: Tensor, y: Tensor, cfg: MsSsimConfig | None = None) -> Tensor:
    """Multi-scale SSIM (weighted product form), in (0, 1] for x, y >= 0.

    If the image is too small for the configured scale count, the largest
    feasible count is used and the weights are renormalized.
    """
    cfg = cfg or MsSsimConfig()
    if x.shape != y.shape:
        raise ShapeMismatch(f"ms_ssim: {x.shape} vs {y.shape}")
    m = feasible_scales(x.shape[2], x.shape[3], cfg)
    if m < 1:
        raise TooSmall(
            f"ms_ssim needs min side >= {cfg.ssim.window_size}; got {x.shape[2]}x{x.shape[3]}")
    weights = np.asarray(cfg.weights[:m], dtype=np.float64)
    weights = weights / weights.sum()

    total = None
    cur_x, cur_y = x, y
    for s in range(m):
        mean_ssim, mean_cs = _ssim_means(cur_x, cur_y, cfg.ssim)
        term = mean_ssim if s == m - 1 else mean_cs
        # relu keeps the fractional power defined if a mean dips below zero
        factor = T.pow_scalar(T.relu(term), float(weights[s]))
        total = factor if total is None else T.mul(total, factor)
        if s != m - 1:
            cur_x, cur_y = avg_pool2x(cur_x), avg_pool2x(cur_y)
    return total


def stage1_loss(pred: Tensor, gt: Tensor, alpha: float = 0.1,
                cfg: SsimConfig | None = None) -> Tensor:
    """L1 + alpha * (1 - SSIM)."""
    ssim_term = T.add_scalar(T.neg(ssim(pred, gt, cfg)), 1.0)
    return T.add(l1_loss(pred, gt), T.mul_scalar(ssim_term, alpha))


STAGE2_VARIANTS = ("ms_ssim_only", "l1_plus_ms_ssim")


def stage2_loss(pred: Tensor, gt: Tensor, variant: str = "ms_ssim_only",
                cfg: MsSsimConfig | None = None) -> Tensor:
    """1 - MS-SSIM, or L1 + 0.1 * (1 - MS-SSIM)."""
    if variant not in STAGE2_VARIANTS:
        raise ValueError(f"unknown stage-2 variant: {variant!r}")
    ms_term = T.add_scalar(T.neg(ms_ssim(pred, gt, cfg)), 1.0)
    if variant == "ms_ssim_only":
        return ms_term
    return T.add(l1_loss(pred, gt), T.mul_scalar(ms_term, 0.1))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 99.0


def psnr(pred: Tensor, gt: Tensor, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; zero MSE reports the 99.0 cap."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"psnr: {pred.shape} vs {gt.shape}")
    if peak <= 0:
        raise ValueError("psnr peak must be positive")
    diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(peak * peak / mse)


def evaluate_pair(pred_img: np.ndarray, gt_img: np.ndarray) -> dict:
    """PSNR/SSIM for one 8-bit RGB image pair (h, w, 3 uint8 arrays)."""
    if pred_img.shape != gt_img.shape:
        raise DimsDiffer(f"image dims differ: {pred_img.shape} vs {gt_img.shape}")
    pred = Tensor(pred_img.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)
    gt = Tensor(gt_img.astype(np.float32).transpose(2, 0, 1)[None] / 255.0)
    return {"psnr": psnr(pred, gt, peak=1.0), "ssim": ssim(pred, gt).item()}
