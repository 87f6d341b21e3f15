"""Per-stage fusion network built from spectrally normalized resblocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ShapeError


@dataclass(frozen=True)
class SNSettings:
    """How resblock weights are normalized during a forward pass."""

    enabled: bool = True
    lam: float = 0.6
    iters: int = 1
    update: bool = True
    detach_scale: bool = False


def he_uniform(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_fusion_params(store: dm.ParamStore, prefix: str, bands: int, msi_bands: int,
                       features: int, n_blocks: int, rng: np.random.Generator,
                       dtype=np.float64) -> None:
    store.add(f"{prefix}.head", he_uniform(rng, (features, bands + msi_bands, 3, 3), dtype))
    for i in range(n_blocks):
        for j in (1, 2):
            name = f"{prefix}.block{i}.conv{j}"
            store.add(name, he_uniform(rng, (features, features, 3, 3), dtype))
            u = rng.standard_normal(features).astype(dtype)
            store.u[name] = u / np.linalg.norm(u)
    store.add(f"{prefix}.tail", np.zeros((bands, features, 3, 3), dtype=dtype))


def block_count(store: dm.ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.block{n}.conv1" in store:
        n += 1
    return n


def _weight(store: dm.ParamStore, name: str, sn: SNSettings) -> Node:
    w = store[name]
    if not sn.enabled:
        return w
    return dm.spectral_normalize(w, sn.lam, store.u[name], sn.iters, update=sn.update,
                                 detach_scale=sn.detach_scale)


def resblock_forward(x: Node, w1: Node, w2: Node) -> Node:
    """y = x + conv2(relu(conv1(x))) with already-normalized weights."""
    return dm.add(x, residual_branch(x, w1, w2))


def residual_branch(x: Node, w1: Node, w2: Node) -> Node:
    return dm.conv2d(dm.relu(dm.conv2d(x, w1, padding=1)), w2, padding=1)


def invert_resblock(y: np.ndarray, w1: np.ndarray, w2: np.ndarray, iters: int = 60) -> np.ndarray:
    """Recover x from y = x + g(x) by the fixed-point map x <- y - g(x)."""
    c1, c2 = dm.constant(w1), dm.constant(w2)
    x = y.copy()
    for _ in range(iters):
        x = y - residual_branch(dm.constant(x), c1, c2).value
    return x


def fusion_forward(lr_residual: Node, hr_residual: Node, store: dm.ParamStore, prefix: str,
                   scale: int, sn: SNSettings) -> Node:
    """Map (LR-HSI residual, HR-MSI residual) to an HR-HSI (increment).

    Inputs are (1, C, h, w) and (1, c, H, W) nodes; the output is (1, C, H, W).
    """
    _, bands, h, w = lr_residual.shape
    _, msi, hh, ww = hr_residual.shape
    if (hh, ww) != (h * scale, w * scale):
        raise ShapeError(
            f"HR residual is {hh}x{ww} but LR residual {h}x{w} at scale {scale} needs {h * scale}x{w * scale}"
        )
    head = store[f"{prefix}.head"]
    if head.shape[1] != bands + msi:
        raise ShapeError(f"{prefix}: head expects {head.shape[1]} input channels, got {bands}+{msi}")
    x = dm.concat_channels(dm.upsample_bilinear(lr_residual, scale), hr_residual)
    x = dm.conv2d(x, head, padding=1)
    for i in range(block_count(store, prefix)):
        w1 = _weight(store, f"{prefix}.block{i}.conv1", sn)
        w2 = _weight(store, f"{prefix}.block{i}.conv2", sn)
        x = resblock_forward(x, w1, w2)
    return dm.conv2d(x, store[f"{prefix}.tail"], padding=1)
