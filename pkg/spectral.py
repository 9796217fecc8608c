"""
Fourier analysis of perturbations: band-limited noise and averaged spectra.

Frequencies are measured in cycles per image. The band radius of frequency
(fy, fx) is the Chebyshev radius max(|fy|, |fx|), so bands are centered
squares like the low-frequency region of a SpectralReport. For a side of N
pixels the largest radius (Nyquist) is N // 2.
"""

import math
import logging
from dataclasses import dataclass

import torch

from exceptions import ConfigurationError
from utils import make_generator

logger = logging.getLogger(__name__)

BANDS = ("low_pass", "high_pass")


def frequency_radius(height, width, device="cpu"):
    """Chebyshev radius of every unshifted FFT bin, shape (H, W)"""
    fy = torch.fft.fftfreq(height, d=1.0 / height, device=device).abs()
    fx = torch.fft.fftfreq(width, d=1.0 / width, device=device).abs()
    return torch.maximum(fy[:, None], fx[None, :])


def band_mask(height, width, band, cutoff, device="cpu"):
    """
    Ideal (0/1) radial mask over unshifted FFT bins

    low_pass keeps radius <= cutoff; high_pass keeps the `cutoff` widest rings
    down from Nyquist, i.e. radius >= nyquist - cutoff. In both cases a larger
    cutoff means more bandwidth and cutoff >= nyquist keeps every bin.
    """
    if band not in BANDS:
        raise ConfigurationError(f"Unknown band '{band}', expected one of {BANDS}")
    if cutoff < 0:
        raise ConfigurationError(f"cutoff must be nonnegative, got {cutoff}")
    radius = frequency_radius(height, width, device)
    if band == "low_pass":
        return (radius <= cutoff).to(torch.float64)
    return (radius >= radius.max() - cutoff).to(torch.float64)


def band_limited_noise(shape, band, cutoff, l2_norm, seed, dtype=torch.float32, device="cpu"):
    """
    White Gaussian noise filtered by an ideal radial frequency mask

    Args:
        shape (tuple): (C, H, W) or (B, C, H, W)
        band (str): "low_pass" or "high_pass"
        cutoff (int): band width in cycles per image
        l2_norm (float): L2 norm of each image's noise after rescaling
        seed (int): noise seed

    Returns:
        Tensor: filtered noise of the given shape, each image with norm l2_norm
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) < 3:
        raise ConfigurationError(f"band_limited_noise needs (..., C, H, W), got {shape}")
    if l2_norm < 0:
        raise ConfigurationError(f"l2_norm must be nonnegative, got {l2_norm}")
    h, w = shape[-2], shape[-1]
    mask = band_mask(h, w, band, cutoff)
    if l2_norm == 0:
        return torch.zeros(shape, dtype=dtype, device=device)

    noise = torch.randn(shape, generator=make_generator(seed), dtype=torch.float64)
    filtered = torch.fft.ifft2(torch.fft.fft2(noise) * mask).real

    per_image = filtered.reshape(-1, shape[-3] * h * w)
    norms = per_image.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ConfigurationError(f"{band} band with cutoff {cutoff} kept no energy")
    scaled = (per_image * (l2_norm / norms)).reshape(shape)
    return scaled.to(dtype=dtype, device=device)


@dataclass
class SpectralReport:
    """
    Averaged spectrum of a set of perturbations, DC at [H // 2, W // 2]

    heatmap is the mean magnitude |F|; power is the mean |F|^2 / (H W), which
    sums to the mean spatial energy of one channel by Parseval.
    """
    heatmap: torch.Tensor
    log_heatmap: torch.Tensor
    power: torch.Tensor
    low_freq_energy_fraction: float
    spatial_energy: float
    n_samples: int

    @property
    def spectral_energy(self):
        return float(self.power.sum())

    def parseval_gap(self):
        """Relative difference between spectral and spatial energy"""
        if self.spatial_energy == 0:
            return abs(self.spectral_energy)
        return abs(self.spectral_energy - self.spatial_energy) / self.spatial_energy


def low_frequency_window(height, width):
    """Row and column slices of the centered square covering a quarter of the shifted grid"""
    top = height // 2 - height // 4
    left = width // 2 - width // 4
    return slice(top, top + height // 2), slice(left, left + width // 2)


def spectral_report(perturbations):
    """
    Average the Fourier spectrum of a set of perturbations

    Args:
        perturbations (list): tensors of shape (..., H, W); every leading index
            (image, channel) is one sample

    Returns:
        SpectralReport: heatmaps, power grid and low-frequency energy fraction
    """
    if torch.is_tensor(perturbations):
        perturbations = [perturbations]
    if not perturbations:
        raise ConfigurationError("spectral_report needs at least one perturbation")
    h, w = perturbations[0].shape[-2:]
    samples = torch.cat([p.detach().to("cpu", torch.float64).reshape(-1, h, w) for p in perturbations])

    spectrum = torch.fft.fftshift(torch.fft.fft2(samples), dim=(-2, -1))
    magnitude = spectrum.abs()
    heatmap = magnitude.mean(dim=0)
    power = (magnitude ** 2).mean(dim=0) / (h * w)
    spatial_energy = float((samples ** 2).sum(dim=(-2, -1)).mean())

    total = float(power.sum())
    rows, cols = low_frequency_window(h, w)
    fraction = float(power[rows, cols].sum()) / total if total > 0 else math.nan

    logger.debug(f"Spectral report over {samples.shape[0]} samples: low-frequency fraction {fraction:.4f}")
    return SpectralReport(
        heatmap=heatmap,
        log_heatmap=torch.log1p(heatmap),
        power=power,
        low_freq_energy_fraction=fraction,
        spatial_energy=spatial_energy,
        n_samples=samples.shape[0],
    )
