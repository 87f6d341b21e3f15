"""Synthetic hyperspectral scenes with a known observation model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .observation import ObservationModel, check_divisible, gaussian_psf

N_ENDMEMBERS = 4


@dataclass
class SyntheticScene:
    x: np.ndarray  # (bands, H, W) ground truth
    y: np.ndarray  # (bands, H/s, W/s)
    z: np.ndarray  # (msi_bands, H, W)
    psf: np.ndarray
    srf: np.ndarray
    scale: int
    seed: int

    @property
    def model(self) -> ObservationModel:
        return ObservationModel(self.psf, self.srf, self.scale)


def gaussian_srf(msi_bands: int, bands: int) -> np.ndarray:
    """Overlapping Gaussian response rows, evenly spaced, each summing to 1."""
    idx = np.arange(bands)
    centers = (np.arange(msi_bands) + 0.5) * bands / msi_bands - 0.5
    width = max(bands / msi_bands, 1.0)
    r = np.exp(-0.5 * ((idx[None, :] - centers[:, None]) / width) ** 2)
    return r / r.sum(axis=1, keepdims=True)


def _smooth_profile(rng, n: int, bumps: int, width_range) -> np.ndarray:
    t = np.arange(n)
    out = np.zeros(n)
    for _ in range(bumps):
        c = rng.uniform(0, n - 1)
        wdt = rng.uniform(*width_range)
        out += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((t - c) / wdt) ** 2)
    return out


def _endmembers(rng, bands: int) -> np.ndarray:
    spectra = []
    for _ in range(N_ENDMEMBERS):
        p = _smooth_profile(rng, bands, 3, (max(bands / 6, 0.8), max(bands / 2, 1.0)))
        p = (p - p.min()) / (np.ptp(p) + 1e-12)
        spectra.append(0.1 + 0.8 * p)
    return np.stack(spectra)


def _abundances(rng, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    scale = min(height, width)
    maps = []
    for _ in range(N_ENDMEMBERS):
        a = np.full((height, width), 0.05)
        for _ in range(3):
            cy, cx = rng.uniform(0, height - 1), rng.uniform(0, width - 1)
            sig = rng.uniform(scale / 10, scale / 4)
            a += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        maps.append(a)
    maps = np.stack(maps)
    return maps / maps.sum(axis=0, keepdims=True)


def generate_scene(width: int, height: int, bands: int, msi_bands: int, scale: int,
                   psf_size: int = 8, psf_sigma: float = 1.0, seed: int = 0) -> SyntheticScene:
    """Endmember-mixture scene and its simulated LR-HSI / HR-MSI pair.

    Abundances are per-pixel convex weights and endmember spectra lie in
    [0.1, 0.9], so every sample of the ground truth is inside [0, 1].
    """
    check_divisible(height, width, scale)
    if bands <= msi_bands or msi_bands < 1:
        raise ValueError(f"need bands > msi_bands >= 1, got {bands} and {msi_bands}")
    rng = np.random.default_rng(seed)
    spectra = _endmembers(rng, bands)
    abund = _abundances(rng, height, width)
    x = np.tensordot(spectra, abund, axes=([0], [0]))  # (bands, H, W)
    psf = gaussian_psf(psf_size, psf_sigma)
    srf = gaussian_srf(msi_bands, bands)
    model = ObservationModel(psf, srf, scale)
    y, z = model.observe(x)
    return SyntheticScene(x, y, z, psf, srf, scale, seed)
