"""Three-stage self-regression: forward pass, losses and training loop."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import diffmath as dm
from .diffmath import Node, ShapeError
from .fusionnet import SNSettings, fusion_forward, init_fusion_params
from .observation import (
    check_divisible,
    degrade_spatial,
    degrade_spectral,
    gB_forward,
    gR_forward,
    init_observation_params,
)

log = logging.getLogger(__name__)

STAGES = ("f1", "f2", "f3")
SAM_EPS = 1e-9


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Training produced NaN/Inf; ``tensor`` names the first offender."""

    def __init__(self, iteration: int, tensor: str):
        super().__init__(f"non-finite value at iteration {iteration} in tensor {tensor!r}")
        self.iteration = iteration
        self.tensor = tensor


@dataclass
class SrfnConfig:
    lambda_sn: float = 0.6
    spectral_norm: bool = True
    sn_iters: int = 1
    sn_detach_scale: bool = False
    obs_softmax: bool = True
    obs_depth: int = 1
    beta: float = 0.01
    gamma: float = 30.0
    lr: float = 2e-4
    lr_halve_every: int = 0
    grad_clip: float = 10.0
    iterations: int = 1000
    scale: int = 4
    n_blocks: int = 3
    features: int = 64
    kernel_size: int = 14
    stage_losses: bool = False
    schedule: str = "joint"
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.lambda_sn <= 1.0:
            raise ConfigError(f"lambda_sn must be in (0, 1], got {self.lambda_sn}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")
        if self.beta < 0 or self.gamma < 0:
            raise ConfigError("beta and gamma must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("scale", "features", "kernel_size", "sn_iters", "obs_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ConfigError("n_blocks must be >= 0")
        if self.schedule not in ("joint", "alternate"):
            raise ConfigError(f"schedule must be 'joint' or 'alternate', got {self.schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be 'f32' or 'f64', got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def sn_settings(self, update: bool = True, iters: Optional[int] = None) -> SNSettings:
        return SNSettings(self.spectral_norm, self.lambda_sn, iters or self.sn_iters, update,
                          self.sn_detach_scale)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SrfnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "SrfnConfig":
        return dataclasses.replace(self, **changes)


# Ablation ladder: each rung adds one ingredient.
ABLATIONS: Dict[str, dict] = {
    "baseline": dict(obs_softmax=False, spectral_norm=False, gamma=0.0, beta=0.0),
    "S": dict(obs_softmax=True, spectral_norm=False, gamma=0.0, beta=0.0),
    "SN": dict(obs_softmax=True, spectral_norm=True, gamma=0.0, beta=0.0),
    "SNL": dict(obs_softmax=True, spectral_norm=True, beta=0.0),
    "SNLA": dict(obs_softmax=True, spectral_norm=True),
}


def ablation_config(name: str, base: Optional[SrfnConfig] = None) -> SrfnConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    base = base or SrfnConfig()
    return base.replace(**ABLATIONS[name])


@dataclass
class SrfnState:
    config: SrfnConfig
    bands: int
    msi_bands: int
    store: dm.ParamStore
    iteration: int = 0


def init_state(bands: int, msi_bands: int, config: SrfnConfig) -> SrfnState:
    rng = np.random.default_rng(config.seed)
    store = dm.ParamStore()
    for prefix in STAGES:
        init_fusion_params(store, prefix, bands, msi_bands, config.features, config.n_blocks,
                           rng, config.dtype)
    init_observation_params(store, config.kernel_size, msi_bands, bands, rng,
                            config.obs_depth, config.dtype)
    return SrfnState(config, bands, msi_bands, store)


def fusion_names(store: dm.ParamStore) -> List[str]:
    return [n for n in store.names() if n.split(".")[0] in STAGES]


def observation_names(store: dm.ParamStore) -> List[str]:
    return [n for n in store.names() if n.split(".")[0] in ("gB", "gR")]


@dataclass
class StageTrace:
    x1: Node
    x2: Node
    x: Node
    y1: Node
    y2: Node
    y: Node
    z1: Node
    z2: Node
    z: Node
    psf: Node
    srf: Node
    dx2: Node
    dx3: Node

    def named(self):
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)


def _batched(cube) -> Node:
    if isinstance(cube, Node):
        return cube
    arr = np.asarray(cube)
    return dm.constant(arr[None] if arr.ndim == 3 else arr)


def learned_model(state: SrfnState):
    cfg = state.config
    psf = gB_forward(state.store, cfg.kernel_size, cfg.obs_softmax)
    srf = gR_forward(state.store, state.msi_bands, state.bands, cfg.obs_softmax)
    return psf, srf


def three_stage_forward(Y, Z, state: SrfnState, psf=None, srf=None,
                        sn: Optional[SNSettings] = None) -> StageTrace:
    """Run the three fusion stages and re-observe each estimate.

    ``psf``/``srf`` substitute a known observation model for the learned one.
    """
    cfg = state.config
    y, z = _batched(Y), _batched(Z)
    s = cfg.scale
    _, bands, h, w = y.shape
    _, msi, hh, ww = z.shape
    if (hh, ww) != (h * s, w * s):
        raise ShapeError(f"Z is {hh}x{ww} but Y is {h}x{w}; expected Z of {h * s}x{w * s} at scale {s}")
    if (bands, msi) != (state.bands, state.msi_bands):
        raise ShapeError(f"state built for {state.bands}/{state.msi_bands} bands, got {bands}/{msi}")
    check_divisible(hh, ww, s)
    sn = sn or cfg.sn_settings()

    lp, lr_ = learned_model(state)
    psf = dm.as_node(psf) if psf is not None else lp
    srf = dm.as_node(srf) if srf is not None else lr_

    def observe(x):
        return degrade_spatial(x, psf, s), degrade_spectral(x, srf)

    x1 = fusion_forward(y, z, state.store, "f1", s, sn)
    y1, z1 = observe(x1)
    dx2 = fusion_forward(dm.sub(y, y1), dm.sub(z, z1), state.store, "f2", s, sn)
    x2 = dm.add(x1, dx2)
    y2, z2 = observe(x2)
    dx3 = fusion_forward(dm.sub(y, y2), dm.sub(z, z2), state.store, "f3", s, sn)
    x3 = dm.add(x2, dx3)
    y3, z3 = observe(x3)
    return StageTrace(x1, x2, x3, y1, y2, y3, z1, z2, z3, psf, srf, dx2, dx3)


def loss_spa(y_hat, Y, z_hat, Z) -> Node:
    """Mean absolute error of the LR-HSI pair plus that of the HR-MSI pair."""
    a, b = _batched(y_hat), _batched(Y)
    c, d = _batched(z_hat), _batched(Z)
    if a.shape != b.shape or c.shape != d.shape:
        raise ShapeError(f"loss_spa shape mismatch: {a.shape}/{b.shape}, {c.shape}/{d.shape}")
    return dm.add(dm.abs_mean(dm.sub(a, b)), dm.abs_mean(dm.sub(c, d)))


def loss_spe(y_hat, Y) -> Node:
    """Mean spectral angle (radians) between estimated and observed LR spectra."""
    a, b = _batched(y_hat), _batched(Y)
    return dm.mean(dm.arccos_clamped(dm.pixel_cosine(b, a, SAM_EPS)))


def loss_lc(Y, Z, psf, srf, scale: int) -> Node:
    """Local consistency |R Y - Z B S| as a mean over the (c, h, w) cube."""
    ry = degrade_spectral(_batched(Y), dm.as_node(srf))
    zbs = degrade_spatial(_batched(Z), dm.as_node(psf), scale)
    return dm.abs_mean(dm.sub(ry, zbs))


@dataclass
class LossTerms:
    spa: Node
    spe: Node
    lc: Node
    total: Node

    def values(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).value) for k in ("spa", "spe", "lc", "total")}


def total_loss(trace: StageTrace, Y, Z, config: SrfnConfig) -> LossTerms:
    spa = loss_spa(trace.y, Y, trace.z, Z)
    spe = loss_spe(trace.y, Y)
    lc = loss_lc(Y, Z, trace.psf, trace.srf, config.scale)
    total = dm.add(dm.add(spa, dm.scale(spe, config.beta)), dm.scale(lc, config.gamma))
    if config.stage_losses:
        for yk, zk in ((trace.y1, trace.z1), (trace.y2, trace.z2)):
            total = dm.add(total, loss_spa(yk, Y, zk, Z))
    return LossTerms(spa, spe, lc, total)


def first_nonfinite(trace: StageTrace, terms: LossTerms, store: dm.ParamStore) -> Optional[str]:
    for name in store.names():
        if not dm.is_finite(store[name].value):
            return name
    for name, node in trace.named():
        if not dm.is_finite(node.value):
            return name
    for name in ("spa", "spe", "lc", "total"):
        if not dm.is_finite(getattr(terms, name).value):
            return f"loss_{name}"
    return None


@dataclass
class TrainResult:
    state: SrfnState
    xhat: np.ndarray
    psf: np.ndarray
    srf: np.ndarray
    history: List[Dict[str, float]] = field(default_factory=list)
    final: Dict[str, float] = field(default_factory=dict)


def evaluate(Y, Z, state: SrfnState, psf=None, srf=None):
    """Forward pass without advancing power-iteration state."""
    trace = three_stage_forward(Y, Z, state, psf, srf, sn=state.config.sn_settings(update=False))
    return trace, total_loss(trace, Y, Z, state.config)


def train(Y: np.ndarray, Z: np.ndarray, config: SrfnConfig, psf=None, srf=None,
          state: Optional[SrfnState] = None, callback=None) -> TrainResult:
    """Fit fusion and observation networks to a single (Y, Z) pair.

    ``Y`` is (C, h, w), ``Z`` is (c, H, W). Passing ``psf``/``srf`` freezes
    the corresponding observation slot to a known model. ``state`` resumes
    from a checkpoint; ``config.iterations`` more steps are run.
    """
    dtype = config.dtype
    Y = np.asarray(Y, dtype=dtype)
    Z = np.asarray(Z, dtype=dtype)
    if Y.ndim != 3 or Z.ndim != 3:
        raise ShapeError("Y and Z must be (bands, height, width) cubes")
    check_divisible(Z.shape[1], Z.shape[2], config.scale)
    if Z.shape[1:] != (Y.shape[1] * config.scale, Y.shape[2] * config.scale):
        raise ShapeError(f"Y {Y.shape} and Z {Z.shape} are inconsistent with scale {config.scale}")
    if state is None:
        state = init_state(Y.shape[0], Z.shape[0], config)
    store = state.store
    groups = [fusion_names(store), observation_names(store)]
    history = []
    for it in range(config.iterations):
        trace = three_stage_forward(Y, Z, state, psf, srf)
        terms = total_loss(trace, Y, Z, config)
        vals = terms.values()
        if not all(np.isfinite(v) for v in vals.values()):
            raise NonFiniteLossError(state.iteration, first_nonfinite(trace, terms, store) or "loss_total")
        dm.backward(terms.total)
        if config.grad_clip:
            dm.clip_grad_norm(store, config.grad_clip)
        lr = config.lr
        if config.lr_halve_every:
            lr *= 0.5 ** (state.iteration // config.lr_halve_every)
        names = None if config.schedule == "joint" else groups[state.iteration % 2]
        dm.adam_step(store, lr, names=names)
        history.append({"iteration": state.iteration, **vals})
        state.iteration += 1
        if callback is not None:
            callback(state, vals)
        if it % 500 == 0:
            log.debug("iter %d total %.6g", state.iteration, vals["total"])
    trace, terms = evaluate(Y, Z, state, psf, srf)
    return TrainResult(
        state=state,
        xhat=trace.x.value[0].copy(),
        psf=trace.psf.value.copy(),
        srf=trace.srf.value.copy(),
        history=history,
        final=terms.values(),
    )
