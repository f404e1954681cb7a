"""Ground-truth trajectories and synthetic pixel-grid frames.

Positions are in cell-width units on a 1-based grid: a position ``p`` lies
in cell ``ceil(p / delta)``, so cell ``i`` spans ``((i-1)*delta, i*delta]``
and its centre is ``(i - 0.5) * delta``.  Frames are stored as ``(n, m)``
arrays with ``cells[i-1, j-1]`` holding the measurement of cell ``(i, j)``;
``i`` follows the x position and ``j`` the y position.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# State layout: [px, vx, py, vy]
PX, VX, PY, VY = 0, 1, 2, 3

DEFAULT_Q = 0.01


class ConfigError(ValueError):
    """Raised for invalid scenario or campaign configuration."""


def state_vector(px: float, vx: float, py: float, vy: float) -> np.ndarray:
    s = np.array([px, vx, py, vy], dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError(f"state components must be finite, got {s}")
    return s


def transition_matrix(T: float = 1.0) -> np.ndarray:
    return np.array(
        [
            [1.0, T, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, T],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def white_noise_acceleration_q(q: float, T: float = 1.0) -> np.ndarray:
    """Discrete white-noise-acceleration covariance for both axes."""
    block = q * np.array([[T**3 / 3.0, T**2 / 2.0], [T**2 / 2.0, T]])
    Q = np.zeros((4, 4))
    Q[0:2, 0:2] = block
    Q[2:4, 2:4] = block
    return Q


@dataclass(frozen=True)
class MotionModel:
    """Nearly-constant-velocity model ``x_k = F x_{k-1} + v_k``, ``v_k ~ N(0, Q)``."""

    T: float = 1.0
    Q: np.ndarray = field(default_factory=lambda: white_noise_acceleration_q(DEFAULT_Q))

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape != (4, 4):
            raise ValueError("Q must be 4x4")
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        eig = np.linalg.eigvalsh(Q)
        if eig.min() < -1e-12 * max(1.0, abs(eig).max()):
            raise ValueError("Q must be positive semidefinite")
        object.__setattr__(self, "Q", Q)

    @classmethod
    def cv(cls, q: float = DEFAULT_Q, T: float = 1.0) -> "MotionModel":
        return cls(T=T, Q=white_noise_acceleration_q(q, T))

    @property
    def F(self) -> np.ndarray:
        return transition_matrix(self.T)

    @property
    def noise_factor(self) -> np.ndarray:
        """Matrix ``G`` with ``G @ G.T == Q``; valid for singular ``Q``."""
        w, V = np.linalg.eigh(self.Q)
        return V * np.sqrt(np.clip(w, 0.0, None))

    def __eq__(self, other):
        if not isinstance(other, MotionModel):
            return NotImplemented
        return self.T == other.T and np.array_equal(self.Q, other.Q)

    def __hash__(self):
        return hash((self.T, self.Q.tobytes()))


@dataclass(frozen=True)
class SensorConfig:
    n: int = 20
    m: int = 20
    delta_x: float = 1.0
    delta_y: float = 1.0
    intensity: float = 1.0
    sigma: float = 1.0
    blur: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("grid must have at least one row and column")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.intensity < 0 or self.blur < 0:
            raise ValueError("intensity and blur must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.m)

    def cell_of(self, px: float, py: float) -> Optional[tuple[int, int]]:
        """1-based cell containing a position, or None when off the grid."""
        i = math.ceil(px / self.delta_x)
        j = math.ceil(py / self.delta_y)
        if 1 <= i <= self.n and 1 <= j <= self.m:
            return (i, j)
        return None

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        i, j = cell
        return ((i - 0.5) * self.delta_x, (j - 0.5) * self.delta_y)


def cell_indices(px, py, sensor: SensorConfig):
    """Vectorised 0-based cell indices and an on-grid mask."""
    i = np.ceil(np.asarray(px) / sensor.delta_x).astype(np.int64) - 1
    j = np.ceil(np.asarray(py) / sensor.delta_y).astype(np.int64) - 1
    inside = (i >= 0) & (i < sensor.n) & (j >= 0) & (j < sensor.m)
    return i, j, inside


@dataclass
class Frame:
    cells: np.ndarray
    frame_index: int

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.ndim != 2:
            raise ValueError("frame cells must be a 2-D grid")
        if not np.all(np.isfinite(self.cells)):
            raise ValueError("frame cells must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def z(self, cell: tuple[int, int]) -> float:
        return float(self.cells[cell[0] - 1, cell[1] - 1])


@dataclass
class TruthPoint:
    frame_index: int
    present: bool
    state: Optional[np.ndarray] = None


@dataclass
class ScenarioConfig:
    sensor: SensorConfig = field(default_factory=SensorConfig)
    motion: MotionModel = field(default_factory=MotionModel)
    n_frames: int = 40
    birth_frame: int = 10
    death_frame: int = 35
    initial_state: np.ndarray = field(default_factory=lambda: state_vector(2.5, 0.5, 2.5, 0.5))
    snr_db: float = 6.0
    maneuver_schedule: list = field(default_factory=list)
    seed: int = 0
    name: str = "custom"
    snr_variants: tuple = ()
    has_object: bool = True

    def __post_init__(self):
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if not 1 <= self.birth_frame <= self.death_frame <= self.n_frames:
            raise ConfigError(
                "need 1 <= birth_frame <= death_frame <= n_frames, got "
                f"{self.birth_frame}, {self.death_frame}, {self.n_frames}"
            )
        self.initial_state = state_vector(*np.asarray(self.initial_state, dtype=float))
        self.maneuver_schedule = sorted(
            (int(f), (float(v[0]), float(v[1]))) for f, v in self.maneuver_schedule
        )
        for f, _ in self.maneuver_schedule:
            if not self.birth_frame <= f <= self.death_frame:
                raise ConfigError(
                    f"maneuver at frame {f} lies outside the presence interval "
                    f"[{self.birth_frame}, {self.death_frame}]"
                )
        if not self.snr_variants:
            self.snr_variants = (float(self.snr_db),)
        self.snr_variants = tuple(float(s) for s in self.snr_variants)
        intensity = snr_to_intensity(self.snr_db, self.sensor.sigma)
        if self.sensor.intensity != intensity:
            self.sensor = dataclasses.replace(self.sensor, intensity=intensity)

    def with_snr(self, snr_db: float) -> "ScenarioConfig":
        return dataclasses.replace(self, snr_db=float(snr_db))

    def without_object(self) -> "ScenarioConfig":
        """Same grid and noise, but no object on any frame."""
        return dataclasses.replace(self, has_object=False)

    def presence_frames(self) -> range:
        if not self.has_object:
            return range(0)
        return range(self.birth_frame, self.death_frame + 1)


def snr_to_intensity(snr_db: float, sigma: float) -> float:
    """Object intensity for an SNR defined as ``10 log10(I^2 / sigma^2)``."""
    if not (math.isfinite(snr_db) and math.isfinite(sigma)):
        raise ValueError("snr_db and sigma must be finite")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return sigma * 10.0 ** (snr_db / 20.0)


def propagate_state(state: np.ndarray, model: MotionModel, rng: np.random.Generator) -> np.ndarray:
    noise = model.noise_factor @ rng.standard_normal(4)
    return model.F @ np.asarray(state, dtype=float) + noise


def generate_trajectory(cfg: ScenarioConfig, rng: np.random.Generator) -> list[TruthPoint]:
    """Truth for frames ``1..n_frames``.

    A maneuver entry ``(f, (vx, vy))`` replaces the velocity of the state at
    frame ``f`` before it is propagated to frame ``f + 1``.
    """
    overrides = dict(cfg.maneuver_schedule)
    out = []
    state = None
    for k in range(1, cfg.n_frames + 1):
        if cfg.has_object and cfg.birth_frame <= k <= cfg.death_frame:
            if state is None:
                state = cfg.initial_state.copy()
            else:
                state = propagate_state(state, cfg.motion, rng)
            if k in overrides:
                state = state.copy()
                state[VX], state[VY] = overrides[k]
            out.append(TruthPoint(k, True, state.copy()))
        else:
            out.append(TruthPoint(k, False, None))
    return out


def signal_map(state: Optional[np.ndarray], sensor: SensorConfig) -> np.ndarray:
    """Noise-free cell intensities ``h`` for an object at ``state`` (or none)."""
    h = np.zeros(sensor.shape)
    if state is None:
        return h
    px, py = float(state[PX]), float(state[PY])
    if sensor.blur > 0:
        ix = np.arange(1, sensor.n + 1) * sensor.delta_x
        jy = np.arange(1, sensor.m + 1) * sensor.delta_y
        d2 = (ix[:, None] - px) ** 2 + (jy[None, :] - py) ** 2
        scale = sensor.delta_x * sensor.delta_y * sensor.intensity / (2.0 * math.pi * sensor.blur**2)
        return scale * np.exp(-d2 / (2.0 * sensor.blur**2))
    cell = sensor.cell_of(px, py)
    if cell is None:
        logger.warning("object at (%.3f, %.3f) is off the sensor grid; no signal rendered", px, py)
        return h
    h[cell[0] - 1, cell[1] - 1] = sensor.intensity
    return h


def render_frame(
    truth: TruthPoint, sensor: SensorConfig, frame_index: int, rng: np.random.Generator
) -> Frame:
    h = signal_map(truth.state if truth.present else None, sensor)
    w = sensor.sigma * rng.standard_normal(sensor.shape)
    return Frame(h + w, frame_index)


def simulate(cfg: ScenarioConfig, rng: np.random.Generator) -> tuple[list[TruthPoint], list[Frame]]:
    """Truth plus one rendered frame per truth point, sharing one stream."""
    truth = generate_trajectory(cfg, rng)
    frames = [render_frame(t, cfg.sensor, t.frame_index, rng) for t in truth]
    return truth, frames


# Presets. Truth is deterministic (Q = 0) so Monte Carlo runs only redraw
# the sensor noise; shapes are straight legs joined by one turn.

_NO_NOISE = MotionModel(T=1.0, Q=np.zeros((4, 4)))

PRESETS = {
    "ex1": dict(
        birth_frame=10, death_frame=35, snr_variants=(6.0, 12.0),
        initial_state=(2.5, 0.8, 3.5, 0.0),
        maneuver_schedule=[(22, (0.0, 0.8))],
    ),
    "ex2": dict(
        birth_frame=10, death_frame=35, snr_variants=(5.0,),
        initial_state=(3.5, 0.6, 15.5, -0.2),
        maneuver_schedule=[(22, (0.2, -0.6))],
    ),
    "ex3": dict(
        birth_frame=5, death_frame=35, snr_variants=(3.0, 6.0),
        initial_state=(2.5, 0.5, 4.5, 0.2),
        maneuver_schedule=[(20, (0.3, 0.5))],
    ),
    "ex4": dict(
        birth_frame=5, death_frame=35, snr_variants=(3.0, 5.0, 9.0),
        initial_state=(4.5, 0.4, 16.5, -0.4),
        maneuver_schedule=[(20, (0.5, 0.1))],
    ),
    "ex5": dict(
        birth_frame=5, death_frame=35, snr_variants=(3.0,),
        initial_state=(1.5, 1.5, 3.5, 0.0),
        maneuver_schedule=[(16, (-0.3, 0.6)), (28, (-1.5, 0.6))],
    ),
    "ex6": dict(
        birth_frame=5, death_frame=35, snr_variants=(1.0, 2.0, 3.0),
        initial_state=(3.5, 0.4, 3.5, 0.4),
        maneuver_schedule=[(20, (0.5, 0.0))],
    ),
}


def load_scenario(name: str) -> ScenarioConfig:
    try:
        p = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; presets are {sorted(PRESETS)}") from None
    return ScenarioConfig(
        sensor=SensorConfig(n=20, m=20),
        motion=_NO_NOISE,
        n_frames=40,
        birth_frame=p["birth_frame"],
        death_frame=p["death_frame"],
        initial_state=np.array(p["initial_state"], dtype=float),
        snr_db=p["snr_variants"][0],
        maneuver_schedule=list(p["maneuver_schedule"]),
        seed=0,
        name=name,
        snr_variants=p["snr_variants"],
    )


# Serialisation: one JSON object per scenario.

_SENSOR_KEYS = {"n", "m", "delta_x", "delta_y", "sigma", "blur"}
_SCENARIO_KEYS = {
    "name", "sensor", "T", "Q", "n_frames", "birth_frame", "death_frame",
    "initial_state", "snr_db", "snr_variants", "maneuver_schedule", "seed", "has_object",
}


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    s = cfg.sensor
    return {
        "name": cfg.name,
        "sensor": {
            "n": s.n, "m": s.m, "delta_x": s.delta_x, "delta_y": s.delta_y,
            "sigma": s.sigma, "blur": s.blur,
        },
        "T": cfg.motion.T,
        "Q": cfg.motion.Q.tolist(),
        "n_frames": cfg.n_frames,
        "birth_frame": cfg.birth_frame,
        "death_frame": cfg.death_frame,
        "initial_state": cfg.initial_state.tolist(),
        "snr_db": cfg.snr_db,
        "snr_variants": list(cfg.snr_variants),
        "maneuver_schedule": [[f, list(v)] for f, v in cfg.maneuver_schedule],
        "seed": cfg.seed,
        "has_object": cfg.has_object,
    }


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def scenario_from_dict(d: dict) -> ScenarioConfig:
    """Inverse of :func:`scenario_to_dict`; a ``preset`` key starts from a preset."""
    d = dict(d)
    base = None
    if "preset" in d:
        try:
            base = load_scenario(d.pop("preset"))
        except KeyError as e:
            raise ConfigError(f"scenario.preset: {e.args[0]}") from None
    _check_keys(d, _SCENARIO_KEYS, "scenario")
    base_d = scenario_to_dict(base) if base is not None else scenario_to_dict(ScenarioConfig())
    sensor_d = dict(base_d["sensor"])
    if "sensor" in d:
        _check_keys(d["sensor"], _SENSOR_KEYS, "scenario.sensor")
        sensor_d.update(d["sensor"])
    merged = {**base_d, **d}
    if "snr_db" in d and "snr_variants" not in d:
        merged["snr_variants"] = [d["snr_db"]]
    if "snr_variants" in d and "snr_db" not in d:
        merged["snr_db"] = d["snr_variants"][0]
    try:
        return ScenarioConfig(
            sensor=SensorConfig(**sensor_d),
            motion=MotionModel(T=float(merged["T"]), Q=np.array(merged["Q"], dtype=float)),
            n_frames=int(merged["n_frames"]),
            birth_frame=int(merged["birth_frame"]),
            death_frame=int(merged["death_frame"]),
            initial_state=np.array(merged["initial_state"], dtype=float),
            snr_db=float(merged["snr_db"]),
            maneuver_schedule=[(f, v) for f, v in merged["maneuver_schedule"]],
            seed=int(merged["seed"]),
            name=str(merged["name"]),
            snr_variants=tuple(merged["snr_variants"]),
            has_object=bool(merged["has_object"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"scenario: {e}") from None


def save_scenario(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(cfg), indent=2) + "\n")


def read_scenario(path) -> ScenarioConfig:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def write_frames_csv(frames: Iterable[Frame], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "i", "j", "value"])
        for fr in frames:
            n, m = fr.shape
            for i in range(n):
                for j in range(m):
                    w.writerow([fr.frame_index, i + 1, j + 1, repr(float(fr.cells[i, j]))])


def read_frames_csv(path) -> list[Frame]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["frame"]), []).append((int(r["i"]), int(r["j"]), float(r["value"])))
    frames = []
    for k in sorted(rows):
        n = max(i for i, _, _ in rows[k])
        m = max(j for _, j, _ in rows[k])
        cells = np.zeros((n, m))
        for i, j, v in rows[k]:
            cells[i - 1, j - 1] = v
        frames.append(Frame(cells, k))
    return frames


def write_truth_csv(truth: Sequence[TruthPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "present", "px", "vx", "py", "vy"])
        for t in truth:
            if t.present:
                w.writerow([t.frame_index, 1, *(repr(float(v)) for v in t.state)])
            else:
                w.writerow([t.frame_index, 0, "", "", "", ""])
