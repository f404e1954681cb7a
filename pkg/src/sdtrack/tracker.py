"""PDA multiple-model particle filter for refining detected objects.

Detections are cell-centre position reports.  Association uses the usual
PDA weights (one "none of these" hypothesis plus one per validated
detection); each particle is then reweighted by the mixture
``beta_0 + sum_j beta_j N(z_j; pos, R) / p(z_j)``, which is the PDA
posterior evaluated particle-by-particle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cdt import Detection
from .scenario import MotionModel, SensorConfig
from .sdt import path_velocity


@dataclass(frozen=True)
class ModeSet:
    models: tuple
    transition: np.ndarray

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.transition, dtype=float))
        m = len(self.models)
        if m < 1:
            raise ValueError("need at least one motion model")
        if P.shape != (m, m):
            raise ValueError(f"transition must be {m}x{m}")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
            raise ValueError("transition rows must be probability vectors")
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "transition", P)

    @property
    def size(self) -> int:
        return len(self.models)

    @classmethod
    def single(cls, model: MotionModel) -> "ModeSet":
        return cls((model,), np.ones((1, 1)))

    @classmethod
    def default(cls, T: float = 1.0) -> "ModeSet":
        """Quiet and agile constant-velocity models with sticky switching."""
        return cls(
            (MotionModel.cv(0.01, T), MotionModel.cv(1.0, T)),
            np.array([[0.95, 0.05], [0.05, 0.95]]),
        )


def switch_modes(modes: np.ndarray, mode_set: ModeSet, rng: np.random.Generator) -> np.ndarray:
    """Draw each particle's next mode from its transition row.

    Single-mode sets consume no randomness.
    """
    if mode_set.size == 1:
        return modes
    cum = np.cumsum(mode_set.transition, axis=1)
    u = rng.random(len(modes))
    new = (u[:, None] > cum[modes]).sum(axis=1)
    return np.minimum(new, mode_set.size - 1)


def propagate_particles(
    states: np.ndarray, modes: np.ndarray, mode_set: ModeSet, rng: np.random.Generator
) -> np.ndarray:
    noise = rng.standard_normal(states.shape)
    out = np.empty_like(states)
    for r, model in enumerate(mode_set.models):
        idx = modes == r
        if mode_set.size == 1:
            idx = slice(None)
        out[idx] = states[idx] @ model.F.T + noise[idx] @ model.noise_factor.T
    return out


def systematic_resample(weights: np.ndarray, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    n = len(weights) if n is None else n
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, len(weights) - 1)


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float(np.sum(weights**2))


@dataclass
class TrackerParticleSet:
    states: np.ndarray  # (N, 4)
    modes: np.ndarray  # (N,)
    weights: np.ndarray  # (N,)
    diverged: bool = False

    @property
    def count(self) -> int:
        return len(self.weights)

    def estimate(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights
        mean = w @ self.states
        d = self.states - mean
        cov = (d * w[:, None]).T @ d
        return mean, cov


@dataclass(frozen=True)
class PdaConfig:
    gate_radius: float = 3.0
    pd_design: float = 0.9
    clutter_density: float = 1e-4
    measurement_sigma: float = 1.0 / math.sqrt(12.0)
    n_particles: int = 2000
    max_misses: int = 5
    init_pos_std: float = 1.0
    init_vel_std: float = 1.0

    def __post_init__(self):
        if not (self.gate_radius > 0 and self.clutter_density > 0 and self.measurement_sigma > 0):
            raise ValueError("gate_radius, clutter_density and measurement_sigma must be positive")
        if not 0.0 < self.pd_design <= 1.0:
            raise ValueError("pd_design must lie in (0, 1]")
        if self.n_particles < 1 or self.max_misses < 1:
            raise ValueError("n_particles and max_misses must be >= 1")


def init_track(
    det: Detection,
    cfg: PdaConfig,
    mode_set: ModeSet,
    sensor: SensorConfig,
    rng: np.random.Generator,
    T: float = 1.0,
) -> TrackerParticleSet:
    N = cfg.n_particles
    cx, cy = sensor.cell_center(det.cell)
    vx, vy = path_velocity(det.path, (sensor.delta_x, sensor.delta_y), T)
    mean = np.array([cx, vx, cy, vy])
    std = np.array([cfg.init_pos_std, cfg.init_vel_std, cfg.init_pos_std, cfg.init_vel_std])
    states = mean + std * rng.standard_normal((N, 4))
    if N == 1:
        states = mean[None, :].copy()
    if mode_set.size == 1:
        modes = np.zeros(N, dtype=np.int64)
    else:
        modes = rng.integers(0, mode_set.size, N)
    return TrackerParticleSet(states, modes, np.full(N, 1.0 / N))


def gate(
    detections: Sequence[Detection], center: np.ndarray, radius: float, sensor: SensorConfig
) -> list[Detection]:
    out = []
    for d in detections:
        x, y = sensor.cell_center(d.cell)
        if math.hypot(x - center[0], y - center[1]) <= radius:
            out.append(d)
    return out


def pda_weights(
    pos: np.ndarray, weights: np.ndarray, z: np.ndarray, cfg: PdaConfig, cell_area: float
) -> tuple[np.ndarray, np.ndarray]:
    """Per-particle multipliers and association probabilities ``[beta_0, beta_1, ...]``."""
    if len(z) == 0:
        return np.ones(len(pos)), np.array([1.0])
    r2 = cfg.measurement_sigma**2
    d2 = ((pos[:, None, :] - z[None, :, :]) ** 2).sum(axis=2)  # (N, J)
    lik = np.exp(-d2 / (2.0 * r2)) / (2.0 * math.pi * r2)
    pred = weights @ lik  # predictive density of each report
    lam = cfg.clutter_density / cell_area
    c0 = (1.0 - cfg.pd_design) * lam
    cj = cfg.pd_design * pred
    total = c0 + cj.sum()
    if not total > 0:
        # every likelihood underflowed; the caller resets and flags divergence
        return np.zeros(len(pos)), np.full(len(z) + 1, np.nan)
    beta = np.concatenate([[c0], cj]) / total
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pred > 0, beta[1:] / pred, 0.0)
    mult = beta[0] + lik @ ratio
    return mult, beta


def track_step(
    pf: TrackerParticleSet,
    frame,
    detections: Sequence[Detection],
    cfg: PdaConfig,
    mode_set: ModeSet,
    sensor: SensorConfig,
    rng: np.random.Generator,
):
    """Predict, gate, PDA-update and resample.

    Returns ``(pf, estimate, covariance, validated)``.
    """
    modes = switch_modes(pf.modes, mode_set, rng)
    states = propagate_particles(pf.states, modes, mode_set, rng)
    w = pf.weights
    pred_mean = w @ states
    validated = gate(detections, (pred_mean[0], pred_mean[2]), cfg.gate_radius, sensor)
    z = np.array([sensor.cell_center(d.cell) for d in validated]).reshape(-1, 2)
    mult, _ = pda_weights(states[:, [0, 2]], w, z, cfg, sensor.delta_x * sensor.delta_y)
    w = w * mult
    total = w.sum()
    diverged = False
    if not np.isfinite(total) or total <= 0:
        w = np.full(len(w), 1.0 / len(w))
        diverged = True
    else:
        w = w / total
    out = TrackerParticleSet(states, modes, w, diverged)
    mean, cov = out.estimate()
    if effective_sample_size(w) < len(w) / 2.0:
        idx = systematic_resample(w, rng)
        out = TrackerParticleSet(states[idx], modes[idx], np.full(len(w), 1.0 / len(w)), diverged)
    return out, mean, cov, validated


class Track:
    """A single PDA-MMPF track with miss-count termination."""

    def __init__(self, det, cfg: PdaConfig, mode_set: ModeSet, sensor: SensorConfig, rng, T: float = 1.0):
        self.cfg = cfg
        self.mode_set = mode_set
        self.sensor = sensor
        self.rng = rng
        self.pf = init_track(det, cfg, mode_set, sensor, rng, T)
        self.misses = 0
        self.mean, self.cov = self.pf.estimate()

    @property
    def alive(self) -> bool:
        return self.misses < self.cfg.max_misses

    def step(self, frame, detections):
        self.pf, self.mean, self.cov, validated = track_step(
            self.pf, frame, detections, self.cfg, self.mode_set, self.sensor, self.rng
        )
        self.misses = 0 if validated else self.misses + 1
        return validated
