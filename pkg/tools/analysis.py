"""Restoration metrics and feature-map diagnostics."""
from dataclasses import dataclass, field
from typing import List, NamedTuple

import numpy as np
import torch
from skimage import metrics as skmetrics

from .errors import ConfigurationError, ShapeError
from .tensor import DTYPE


PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
HISTOGRAM_BINS = 64


@dataclass
class Metrics:
    """Mean PSNR/SSIM over a dataset with the per-sample values kept."""

    psnr_db: float
    ssim: float
    per_sample_psnr: List[float] = field(default_factory=list)
    per_sample_ssim: List[float] = field(default_factory=list)
    ssim_global_fallback: bool = False


class SSIMResult(NamedTuple):
    value: float
    global_window: bool


def _as_array(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(DTYPE).numpy()


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            "Images must have the same shape.",
            {"a": list(a.shape), "b": list(b.shape)},
        )


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at :data:`PSNR_CAP_DB`."""
    _check_pair(a, b)

    if peak <= 0:
        raise ConfigurationError("PSNR peak must be positive.", {"peak": peak})

    x, y = _as_array(a), _as_array(b)

    if np.array_equal(x, y):
        return PSNR_CAP_DB

    value = skmetrics.peak_signal_noise_ratio(x, y, data_range=peak)
    return min(float(value), PSNR_CAP_DB)


def _as_channels(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ShapeError("SSIM expects (H, W) or (C, H, W) images.", list(x.shape))


def _global_ssim(x: np.ndarray, y: np.ndarray, peak: float) -> float:
    """SSIM with one window covering each whole channel."""
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    axes = (-2, -1)
    mu_x, mu_y = x.mean(axis=axes), y.mean(axis=axes)
    var_x, var_y = x.var(axis=axes), y.var(axis=axes)
    cov = ((x - mu_x[:, None, None]) * (y - mu_y[:, None, None])).mean(axis=axes)

    per_channel = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return float(per_channel.mean())


def structural_similarity(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> SSIMResult:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Multi-channel images are averaged over channels. Images smaller than the
    window use a single global window, flagged in the result.
    """
    _check_pair(a, b)

    x = _as_channels(_as_array(a))
    y = _as_channels(_as_array(b))

    h, w = x.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        return SSIMResult(_global_ssim(x, y, peak), True)

    value = skmetrics.structural_similarity(
        x,
        y,
        data_range=peak,
        channel_axis=0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    )
    return SSIMResult(float(value), False)


def ssim(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    return structural_similarity(a, b, peak).value


@dataclass
class FeatureReport:
    """Energy, frequency and value-distribution summary of one feature map."""

    energy_map: torch.Tensor
    radial_profile: torch.Tensor
    radial_power: torch.Tensor
    high_frequency_fraction: float
    histogram: np.ndarray
    histogram_edges: np.ndarray
    value_min: float
    value_max: float
    grid: torch.Tensor
    channel: int

    @property
    def max_abs(self) -> float:
        return max(abs(self.value_min), abs(self.value_max))


def spectrum(x: torch.Tensor) -> torch.Tensor:
    """Centered 2-D DFT over the last two dims."""
    return torch.fft.fftshift(torch.fft.fft2(x.to(DTYPE)), dim=(-2, -1))


def radius_bands(h: int, w: int) -> torch.Tensor:
    """Integer distance of every centered-DFT bin from the zero frequency."""
    yy = torch.arange(h, dtype=DTYPE) - h // 2
    xx = torch.arange(w, dtype=DTYPE) - w // 2
    r = torch.sqrt(yy[:, None] ** 2 + xx[None, :] ** 2)
    return torch.round(r).to(torch.int64)


def feature_report(x: torch.Tensor, channel: int = 0) -> FeatureReport:
    """Diagnose the first batch element of a feature map.

    Args:
        x (torch.Tensor): Feature map of rank 3 or 4.
        channel (int): Channel whose raw grid is kept for 3-D plotting.

    Returns:
        FeatureReport: Per-pixel energy, radial DFT magnitude and power per
        integer radius band, share of power beyond half the Nyquist radius,
        a 64-bin activation histogram and the raw grid.
    """
    if x.dim() not in (3, 4):
        raise ShapeError("Feature map must have rank 3 or 4.", list(x.shape))

    f = (x[0] if x.dim() == 4 else x).detach().to(DTYPE)
    c, h, w = f.shape

    if not 0 <= channel < c:
        raise ShapeError(f"Channel {channel} out of range.", {"channels": c})

    energy_map = torch.sum(f**2, dim=0)

    spec = spectrum(f)
    magnitude = torch.abs(spec)
    power = magnitude**2

    bands = radius_bands(h, w).reshape(-1)
    n_bands = int(bands.max()) + 1
    counts = torch.bincount(bands, minlength=n_bands).to(DTYPE)

    mag_sum = torch.zeros(n_bands, dtype=DTYPE).index_add_(0, bands, magnitude.sum(0).reshape(-1))
    radial_power = torch.zeros(n_bands, dtype=DTYPE).index_add_(0, bands, power.sum(0).reshape(-1))
    radial_profile = mag_sum / (counts.clamp(min=1) * c)

    nyquist = min(h, w) / 2
    total = float(radial_power.sum())
    high = float(radial_power[torch.arange(n_bands) > nyquist / 2].sum())
    hf_fraction = high / total if total > 0 else 0.0

    values = f.reshape(-1).numpy()
    hist, edges = np.histogram(values, bins=HISTOGRAM_BINS)

    return FeatureReport(
        energy_map=energy_map,
        radial_profile=radial_profile,
        radial_power=radial_power,
        high_frequency_fraction=hf_fraction,
        histogram=hist,
        histogram_edges=edges,
        value_min=float(values.min()),
        value_max=float(values.max()),
        grid=f[channel].clone(),
        channel=channel,
    )
