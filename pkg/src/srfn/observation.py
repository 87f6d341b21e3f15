"""Observation model: PSF blur + decimation, spectral response, and the
two learned observation networks that produce them.

Cubes are numpy arrays laid out (bands, height, width). The degradation
functions also accept graph nodes of shape (1, bands, height, width), in
which case they return nodes and stay differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ShapeError


class DivisibilityError(ValueError):
    """Raised when spatial extents are not multiples of the scale factor."""


def gaussian_psf(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian kernel of ``size`` x ``size`` normalized to sum 1."""
    if size < 1:
        raise ValueError(f"kernel size must be >= 1, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
    return w / w.sum()


def decimation_offset(scale: int) -> int:
    return scale // 2


def check_divisible(height: int, width: int, scale: int) -> None:
    if scale < 1:
        raise DivisibilityError(f"scale factor must be a positive integer, got {scale}")
    if height % scale or width % scale:
        raise DivisibilityError(f"spatial size {height}x{width} is not divisible by scale {scale}")


def _spatial_node(x: Node, kernel: Node, scale: int) -> Node:
    _, bands, h, w = x.shape
    check_divisible(h, w, scale)
    k = kernel.shape[-1]
    before = (k - 1) // 2
    after = k - 1 - before
    off = decimation_offset(scale)
    # symmetric padding then drop the rows/cols preceding the first sample
    rows = dm.symmetric_pad_index(h, before, after)[off:]
    cols = dm.symmetric_pad_index(w, before, after)[off:]
    per_band = dm.reshape(x, (bands, 1, h, w))
    padded = dm.take2d(per_band, rows, cols)
    blurred = dm.conv2d(padded, dm.reshape(kernel, (1, 1, k, k)), stride=scale)
    return dm.reshape(blurred, (1, bands, h // scale, w // scale))


def _spectral_node(x: Node, srf: Node) -> Node:
    _, bands, h, w = x.shape
    if srf.shape[1] != bands:
        raise ShapeError(f"SRF has {srf.shape[1]} columns but cube has {bands} bands")
    flat = dm.reshape(x, (bands, h * w))
    return dm.reshape(dm.matmul(srf, flat), (1, srf.shape[0], h, w))


def degrade_spatial(cube, kernel, scale: int):
    """Blur every band with ``kernel`` and keep one sample per ``scale`` block.

    Blurring is a cross-correlation with symmetric boundary extension; the
    retained sample sits at offset ``scale // 2`` inside each block.
    """
    if isinstance(cube, Node) or isinstance(kernel, Node):
        return _spatial_node(dm.as_node(cube), dm.as_node(kernel), scale)
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"expected a (bands, height, width) cube, got shape {cube.shape}")
    out = _spatial_node(dm.constant(cube[None]), dm.constant(np.asarray(kernel)), scale)
    return out.value[0]


def degrade_spectral(cube, srf):
    """Apply the spectral response ``srf`` (msi_bands x bands) per pixel."""
    if isinstance(cube, Node) or isinstance(srf, Node):
        return _spectral_node(dm.as_node(cube), dm.as_node(srf))
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ShapeError(f"expected a (bands, height, width) cube, got shape {cube.shape}")
    return _spectral_node(dm.constant(cube[None]), dm.constant(np.asarray(srf))).value[0]


@dataclass
class ObservationModel:
    """A concrete (PSF, SRF, scale) triple."""

    psf: np.ndarray
    srf: np.ndarray
    scale: int

    def observe(self, cube: np.ndarray):
        """Return (LR-HSI, HR-MSI) for a ground-truth cube."""
        return degrade_spatial(cube, self.psf, self.scale), degrade_spectral(cube, self.srf)


# ---------------------------------------------------------------------------
# learned observation networks
# ---------------------------------------------------------------------------


def init_observation_params(store: dm.ParamStore, kernel_size: int, msi_bands: int, bands: int,
                            rng: np.random.Generator, depth: int = 1, dtype=np.float64) -> None:
    """Register latents and square FC layers for the PSF and SRF networks."""
    n = kernel_size * kernel_size
    store.add("gB.latent", rng.standard_normal((n, 1)).astype(dtype))
    store.add("gR.latent", rng.standard_normal((msi_bands, bands)).astype(dtype))
    for i in range(depth):
        bound_b = 1.0 / np.sqrt(n)
        bound_r = 1.0 / np.sqrt(bands)
        store.add(f"gB.fc{i}.weight", rng.uniform(-bound_b, bound_b, (n, n)).astype(dtype))
        store.add(f"gB.fc{i}.bias", np.zeros((n, 1), dtype=dtype))
        store.add(f"gR.fc{i}.weight", rng.uniform(-bound_r, bound_r, (bands, bands)).astype(dtype))
        store.add(f"gR.fc{i}.bias", np.zeros((1, bands), dtype=dtype))


def _depth(store: dm.ParamStore, prefix: str) -> int:
    d = 0
    while f"{prefix}.fc{d}.weight" in store:
        d += 1
    return d


def gB_forward(store: dm.ParamStore, kernel_size: int, use_softmax: bool = True) -> Node:
    """Learned PSF: FC layer(s) on the latent, softmax over all taps, k x k."""
    h = store["gB.latent"]
    if h.shape[0] != kernel_size * kernel_size:
        raise ShapeError(f"gB latent has {h.shape[0]} entries, expected {kernel_size ** 2}")
    for i in range(_depth(store, "gB")):
        h = dm.add(dm.matmul(store[f"gB.fc{i}.weight"], h), store[f"gB.fc{i}.bias"])
    if use_softmax:
        h = dm.softmax(h, axis=0)
    return dm.reshape(h, (kernel_size, kernel_size))


def gR_forward(store: dm.ParamStore, msi_bands: int, bands: int, use_softmax: bool = True) -> Node:
    """Learned SRF: FC layer(s) applied to each latent row, softmax per row."""
    h = store["gR.latent"]
    if h.shape != (msi_bands, bands):
        raise ShapeError(f"gR latent has shape {h.shape}, expected {(msi_bands, bands)}")
    for i in range(_depth(store, "gR")):
        h = dm.add(dm.matmul(h, store[f"gR.fc{i}.weight"]), store[f"gR.fc{i}.bias"])
    if use_softmax:
        h = dm.softmax(h, axis=1)
    return h


def kernel_summary(kernel: np.ndarray) -> dict:
    """Centre of mass and entropy (nats) of a non-negative kernel."""
    k = np.asarray(kernel, dtype=np.float64)
    total = k.sum()
    p = k / total if total != 0 else np.full_like(k, 1.0 / k.size)
    rows, cols = np.indices(k.shape)
    pos = np.clip(p, 0.0, None)
    nz = pos[pos > 0]
    return {
        "size": int(k.shape[0]),
        "sum": float(total),
        "center_of_mass": [float((p * rows).sum()), float((p * cols).sum())],
        "entropy": float(-(nz * np.log(nz)).sum()),
    }
