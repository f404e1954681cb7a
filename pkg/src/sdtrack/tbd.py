"""Particle-filter track-before-detect baselines with a Markov existence variable.

TBD1 carries an existence bit on every particle and reads the existence
probability off the alive weight mass.  TBD2 keeps a particle set
conditioned on existence plus a scalar existence probability, with separate
continuing and birth particles.  The multiple-model variants add a Markov
mode label to each particle; with a single-mode :class:`ModeSet` they are
the plain filters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .cdt import cell_likelihood_ratio
from .scenario import PX, PY, SensorConfig, cell_indices
from .tracker import ModeSet, propagate_particles, switch_modes, systematic_resample


class NoEstimateError(RuntimeError):
    """The existence probability is zero, so there is no conditional state."""


@dataclass(frozen=True)
class ExistenceModel:
    p_birth: float = 0.05
    p_death: float = 0.05
    p_init: float = 0.05

    def __post_init__(self):
        for name in ("p_birth", "p_death", "p_init"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @property
    def transition(self) -> np.ndarray:
        return np.array([[1 - self.p_birth, self.p_birth], [self.p_death, 1 - self.p_death]])

    @property
    def stationary(self) -> float:
        return self.p_birth / (self.p_birth + self.p_death)


@dataclass(frozen=True)
class TbdConfig:
    n_particles: int = 4000
    n_birth: int = 1000
    declare_threshold: float = 0.5
    birth_velocity_std: float = 1.0
    proposal_threshold: Optional[float] = None  # default: sigma * isf(0.3)


def existence_predict(p: float, ex: ExistenceModel) -> float:
    return ex.p_birth * (1.0 - p) + (1.0 - ex.p_death) * p


def likelihood_map(frame, sensor: SensorConfig) -> np.ndarray:
    return cell_likelihood_ratio(frame.cells, sensor.intensity, sensor.sigma)


def particle_lrs(states: np.ndarray, lr_map: np.ndarray, sensor: SensorConfig) -> np.ndarray:
    """Likelihood ratio of each particle's cell; 1 for particles off the grid."""
    i, j, inside = cell_indices(states[:, PX], states[:, PY], sensor)
    out = np.ones(len(states))
    out[inside] = lr_map[i[inside], j[inside]]
    return out


def particle_likelihood_ratio(state, frame, sensor: SensorConfig) -> float:
    cell = sensor.cell_of(float(state[PX]), float(state[PY]))
    if cell is None:
        return 1.0
    return cell_likelihood_ratio(frame.z(cell), sensor.intensity, sensor.sigma)


def _proposal_threshold(cfg: TbdConfig, sensor: SensorConfig) -> float:
    if cfg.proposal_threshold is not None:
        return cfg.proposal_threshold
    return float(sensor.sigma * norm.isf(0.3))


def _uniform_prior(n: int, sensor: SensorConfig, v_std: float, mode_set: ModeSet, rng):
    states = np.empty((n, 4))
    states[:, PX] = rng.uniform(0.0, sensor.n * sensor.delta_x, n)
    states[:, PY] = rng.uniform(0.0, sensor.m * sensor.delta_y, n)
    states[:, [1, 3]] = v_std * rng.standard_normal((n, 2))
    modes = _initial_modes(n, mode_set, rng)
    return states, modes


def _initial_modes(n: int, mode_set: ModeSet, rng) -> np.ndarray:
    if mode_set.size == 1:
        return np.zeros(n, dtype=np.int64)
    return rng.integers(0, mode_set.size, n)


def birth_proposal(frame, n: int, cfg: TbdConfig, sensor: SensorConfig, mode_set: ModeSet, rng):
    """Birth particles placed uniformly inside cells above the proposal threshold.

    Returns ``(states, modes, selected)`` where ``selected`` is the boolean
    cell mask the proposal draws from.  Falls back to the whole grid when no
    cell qualifies.
    """
    selected = frame.cells > _proposal_threshold(cfg, sensor)
    cells = np.argwhere(selected)
    if len(cells) == 0:
        states, modes = _uniform_prior(n, sensor, cfg.birth_velocity_std, mode_set, rng)
        return states, modes, np.ones(sensor.shape, dtype=bool)
    pick = cells[rng.integers(0, len(cells), n)]
    states = np.empty((n, 4))
    states[:, PX] = (pick[:, 0] + rng.random(n)) * sensor.delta_x
    states[:, PY] = (pick[:, 1] + rng.random(n)) * sensor.delta_y
    states[:, [1, 3]] = cfg.birth_velocity_std * rng.standard_normal((n, 2))
    # uniform-in-cell draws can land exactly on a lower cell edge
    eps = 1e-9
    states[:, PX] = np.maximum(states[:, PX], pick[:, 0] * sensor.delta_x + eps)
    states[:, PY] = np.maximum(states[:, PY], pick[:, 1] * sensor.delta_y + eps)
    modes = _initial_modes(n, mode_set, rng)
    return states, modes, selected


def tbd_declare(p_exist: float, th: float) -> bool:
    return p_exist > th


def _weighted_mean(states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if total <= 0:
        raise NoEstimateError("no existence-conditioned weight mass")
    return (weights / total) @ states


# ---------------------------------------------------------------- TBD2


@dataclass
class TbdBelief2:
    states: np.ndarray
    modes: np.ndarray
    weights: np.ndarray  # conditional on existence; sums to 1
    p_exist: float
    frame_index: int = 0
    diverged: bool = False


def tbd2_init(ex: ExistenceModel, cfg: TbdConfig, sensor: SensorConfig, mode_set: ModeSet, rng) -> TbdBelief2:
    states, modes = _uniform_prior(cfg.n_particles, sensor, cfg.birth_velocity_std, mode_set, rng)
    N = cfg.n_particles
    return TbdBelief2(states, modes, np.full(N, 1.0 / N), ex.p_init, 0)


def tbd2_step(
    belief: TbdBelief2,
    frame,
    ex: ExistenceModel,
    mode_set: ModeSet,
    cfg: TbdConfig,
    sensor: SensorConfig,
    rng: np.random.Generator,
) -> TbdBelief2:
    """One recursion of the existence-factorised filter.

    The birth term's contribution to the existence update is computed
    exactly as the grid average of the cell likelihood ratios; the birth
    particles only shape the conditional density.
    """
    lr_map = likelihood_map(frame, sensor)
    p = belief.p_exist
    first = belief.frame_index == 0
    if first:
        p_pred = p
        c_states, c_modes = belief.states, belief.modes
        birth_mass_prior = 0.0
    else:
        p_pred = existence_predict(p, ex)
        c_modes = switch_modes(belief.modes, mode_set, rng)
        c_states = propagate_particles(belief.states, c_modes, mode_set, rng)
        birth_mass_prior = ex.p_birth * (1.0 - p)
    cont_mass_prior = p_pred - birth_mass_prior

    c_lr = particle_lrs(c_states, lr_map, sensor)
    wc = belief.weights * c_lr
    cont_mass = cont_mass_prior * wc.sum()

    birth_mass = 0.0
    b_states = np.empty((0, 4))
    b_modes = np.empty(0, dtype=np.int64)
    wb = np.empty(0)
    if birth_mass_prior > 0:
        n_cells = lr_map.size
        birth_mass = birth_mass_prior * lr_map.sum() / n_cells
    if birth_mass_prior > 0 and cfg.n_birth > 0:
        b_states, b_modes, selected = birth_proposal(frame, cfg.n_birth, cfg, sensor, mode_set, rng)
        b_lr = particle_lrs(b_states, lr_map, sensor)
        sel_mass = birth_mass_prior * lr_map[selected].sum() / n_cells
        wb = b_lr / b_lr.sum() * sel_mass if b_lr.sum() > 0 else np.zeros(len(b_lr))

    numer = cont_mass + birth_mass
    denom = numer + (1.0 - p_pred)
    p_new = numer / denom if denom > 0 else 0.0
    p_new = min(max(p_new, 0.0), 1.0)

    wc_scaled = wc * cont_mass_prior
    states = np.concatenate([c_states, b_states])
    modes = np.concatenate([c_modes, b_modes])
    w = np.concatenate([wc_scaled, wb])
    total = w.sum()
    N = cfg.n_particles
    diverged = False
    if not np.isfinite(total) or total <= 0:
        # keep the predicted prior
        diverged = p_pred > 0
        return TbdBelief2(c_states, c_modes, np.full(N, 1.0 / N), p_pred, frame.frame_index, diverged)
    idx = systematic_resample(w / total, rng, N)
    return TbdBelief2(states[idx], modes[idx], np.full(N, 1.0 / N), p_new, frame.frame_index, diverged)


# ---------------------------------------------------------------- TBD1


@dataclass
class TbdParticleSet1:
    states: np.ndarray
    modes: np.ndarray
    alive: np.ndarray  # bool existence label per particle
    weights: np.ndarray
    frame_index: int = 0
    diverged: bool = False

    @property
    def p_exist(self) -> float:
        return float(self.weights[self.alive].sum())


def tbd1_init(ex: ExistenceModel, cfg: TbdConfig, sensor: SensorConfig, mode_set: ModeSet, rng) -> TbdParticleSet1:
    """Uniform prior with ``round(N p_init)`` alive labels carrying exactly ``p_init`` mass."""
    N = cfg.n_particles
    states, modes = _uniform_prior(N, sensor, cfg.birth_velocity_std, mode_set, rng)
    p = ex.p_init
    n_alive = int(round(N * p))
    if p > 0:
        n_alive = max(n_alive, 1)
    if p < 1:
        n_alive = min(n_alive, N - 1)
    alive = np.arange(N) < n_alive
    weights = np.where(alive, p / max(n_alive, 1), (1.0 - p) / max(N - n_alive, 1))
    return TbdParticleSet1(states, modes, alive, weights, 0)


def tbd1_step(
    ps: TbdParticleSet1,
    frame,
    ex: ExistenceModel,
    mode_set: ModeSet,
    cfg: TbdConfig,
    sensor: SensorConfig,
    rng: np.random.Generator,
) -> TbdParticleSet1:
    """Resample, move existence labels and states, reweight.

    Labels move by independent Markov draws.  Each transition group
    (survived, born, dead) then shares the exact prior mass of that
    transition, so the alive mass is an exact Bayes update of the existence
    probability whenever every group is populated.  Born particles come from
    the birth proposal; their total evidence is the grid-average likelihood
    ratio, split in proportion to each particle's own ratio.

    The returned set is weighted (not yet resampled) so ``p_exist`` is the
    exact alive mass.
    """
    lr_map = likelihood_map(frame, sensor)
    N = len(ps.weights)
    if ps.frame_index == 0:
        w = ps.weights * np.where(ps.alive, particle_lrs(ps.states, lr_map, sensor), 1.0)
        states, modes, alive = ps.states, ps.modes, ps.alive
    else:
        p = ps.p_exist
        idx = systematic_resample(ps.weights, rng)
        states, modes, alive = ps.states[idx], ps.modes[idx], ps.alive[idx]
        u = rng.random(N)
        born = ~alive & (u < ex.p_birth)
        survive = alive & (u >= ex.p_death)
        dead = ~(born | survive)
        modes = switch_modes(modes, mode_set, rng)
        states = propagate_particles(states, modes, mode_set, rng)
        nb = int(born.sum())
        w = np.zeros(N)
        mass_born = ex.p_birth * (1.0 - p)
        mass_survive = (1.0 - ex.p_death) * p
        mass_dead = 1.0 - mass_born - mass_survive
        if nb:
            b_states, b_modes, _ = birth_proposal(frame, nb, cfg, sensor, mode_set, rng)
            states[born] = b_states
            modes = modes.copy()
            modes[born] = b_modes
            b_lr = particle_lrs(b_states, lr_map, sensor)
            if b_lr.sum() > 0:
                w[born] = mass_born * lr_map.mean() * b_lr / b_lr.sum()
        ns, nd = int(survive.sum()), int(dead.sum())
        if ns:
            w[survive] = mass_survive / ns * particle_lrs(states[survive], lr_map, sensor)
        if nd:
            w[dead] = mass_dead / nd
        alive = born | survive
    total = w.sum()
    diverged = False
    if not np.isfinite(total) or total <= 0:
        w = np.full(N, 1.0 / N)
        diverged = True
    else:
        w = w / total
    return TbdParticleSet1(states, modes, alive, w, frame.frame_index, diverged)


def tbd_estimate(belief) -> np.ndarray:
    """Weighted mean of the existence-conditioned particles."""
    if isinstance(belief, TbdBelief2):
        if belief.p_exist <= 0:
            raise NoEstimateError("p_exist is zero")
        return _weighted_mean(belief.states, belief.weights)
    return _weighted_mean(belief.states, np.where(belief.alive, belief.weights, 0.0))


class TbdFilter:
    """Runs one of the TBD variants frame by frame.

    ``kind`` is ``"tbd1"`` or ``"tbd2"``; multiple-model behaviour comes
    from the supplied mode set.
    """

    def __init__(self, kind: str, ex: ExistenceModel, mode_set: ModeSet, cfg: TbdConfig,
                 sensor: SensorConfig, rng: np.random.Generator):
        if kind not in ("tbd1", "tbd2"):
            raise ValueError(f"unknown TBD kind {kind!r}")
        self.kind = kind
        self.ex, self.mode_set, self.cfg, self.sensor, self.rng = ex, mode_set, cfg, sensor, rng
        init = tbd1_init if kind == "tbd1" else tbd2_init
        self.belief = init(ex, cfg, sensor, mode_set, rng)

    @property
    def p_exist(self) -> float:
        return self.belief.p_exist

    def step(self, frame):
        stepper = tbd1_step if self.kind == "tbd1" else tbd2_step
        self.belief = stepper(self.belief, frame, self.ex, self.mode_set, self.cfg, self.sensor, self.rng)
        declared = tbd_declare(self.p_exist, self.cfg.declare_threshold)
        estimate = tbd_estimate(self.belief) if declared else None
        return self.p_exist, declared, estimate
