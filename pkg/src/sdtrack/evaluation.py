"""Seeded Monte Carlo campaigns and the per-frame detection/RMSE metrics.

Run ``i`` of a campaign draws its randomness from
``SeedSequence(master_seed, spawn_key=(i,))``.  That sequence spawns two
children: the first drives truth and frame synthesis, the second the
method.  Every method therefore sees identical frames for the same
``(master_seed, i)``.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cdt import CdtConfig, Detection, detect_frame
from .scenario import PX, PY, VX, VY, ConfigError, MotionModel, ScenarioConfig, simulate
from .sdt import SdtConfig, SequentialDetector
from .tbd import ExistenceModel, TbdConfig, TbdFilter
from .tracker import ModeSet, PdaConfig, Track

METHODS = ("cdt", "sdt", "tbd1", "tbd2", "mmtbd1", "mmtbd2")


# ------------------------------------------------------------ method configs


@dataclass(frozen=True)
class TrackerSettings:
    gate_radius: float = 3.0
    pd_design: float = 0.9
    clutter_density: Optional[float] = None  # default: the feeding detector's p_fa
    n_particles: int = 2000
    max_misses: int = 5

    def pda(self, default_clutter: float) -> PdaConfig:
        return PdaConfig(
            gate_radius=self.gate_radius,
            pd_design=self.pd_design,
            clutter_density=self.clutter_density or default_clutter,
            n_particles=self.n_particles,
            max_misses=self.max_misses,
        )


@dataclass(frozen=True)
class CdtMethod:
    p_fa: float = 1e-4
    declare: str = "track"
    tracker: TrackerSettings = field(default_factory=TrackerSettings)

    def __post_init__(self):
        if self.declare not in ("track", "detection"):
            raise ValueError(f"declare must be 'track' or 'detection', got {self.declare!r}")


@dataclass(frozen=True)
class SdtMethod:
    alpha: float = 1e-4
    beta: float = 0.05
    s_m: int = 3
    p_fa_trunc: float = 1e-6
    radius: int = 1
    seed_exceedance: float = 0.3
    declare: str = "track"
    tracker: TrackerSettings = field(default_factory=TrackerSettings)

    def __post_init__(self):
        if self.declare not in ("track", "detection"):
            raise ValueError(f"declare must be 'track' or 'detection', got {self.declare!r}")


@dataclass(frozen=True)
class TbdMethod:
    p_birth: float = 0.05
    p_death: float = 0.05
    p_init: float = 0.05
    declare_threshold: float = 0.5
    n_particles: int = 4000
    n_birth: int = 1000
    birth_velocity_std: float = 1.0


_METHOD_TYPES = {
    "cdt": CdtMethod, "sdt": SdtMethod,
    "tbd1": TbdMethod, "tbd2": TbdMethod, "mmtbd1": TbdMethod, "mmtbd2": TbdMethod,
}


def method_config(method: str, overrides: Optional[dict] = None):
    """Build a method config from defaults plus overrides; unknown keys are errors."""
    if method not in _METHOD_TYPES:
        raise ConfigError(f"unknown method {method!r}; choose from {{{', '.join(METHODS)}}}")
    cls = _METHOD_TYPES[method]
    overrides = dict(overrides or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown key(s) for method {method}: {', '.join(sorted(unknown))}")
    if "tracker" in overrides and isinstance(overrides["tracker"], dict):
        tnames = {f.name for f in dataclasses.fields(TrackerSettings)}
        bad = set(overrides["tracker"]) - tnames
        if bad:
            raise ConfigError(f"unknown key(s) for {method}.tracker: {', '.join(sorted(bad))}")
        overrides["tracker"] = TrackerSettings(**overrides["tracker"])
    try:
        return cls(**overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{method}: {e}") from None


def method_config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def tbd_mode_set(method: str, T: float = 1.0) -> ModeSet:
    if method.startswith("mm"):
        return ModeSet.default(T)
    return ModeSet.single(MotionModel.cv(0.01, T))


# ------------------------------------------------------------ records


@dataclass
class FramePoint:
    frame_index: int
    present: bool
    truth: Optional[np.ndarray]
    declared: bool
    declared_cell: Optional[tuple]
    estimate: Optional[np.ndarray] = None
    p_exist: Optional[float] = None
    cov_trace: Optional[float] = None


@dataclass
class RunRecord:
    run_seed: tuple  # (master_seed, run_index)
    frames: list
    detections: list = field(default_factory=list)


def run_streams(master_seed: int, run_index: int):
    ss = np.random.SeedSequence(master_seed, spawn_key=(run_index,))
    scene, method = ss.spawn(2)
    return np.random.default_rng(scene), np.random.default_rng(method)


def _best(dets: Sequence[Detection]) -> Optional[Detection]:
    if not dets:
        return None
    return max(dets, key=lambda d: (d.score, d.cell))


def _run_detector(scenario, method, mcfg, truth, frames, rng) -> RunRecord:
    sensor = scenario.sensor
    I, sigma = sensor.intensity, sensor.sigma
    if method == "cdt":
        cdt_cfg = CdtConfig(mcfg.p_fa, I, sigma)
        detector = lambda f: detect_frame(f, cdt_cfg)  # noqa: E731
        clutter = mcfg.p_fa
    else:
        sdt_cfg = SdtConfig(
            intensity=I, sigma=sigma, alpha=mcfg.alpha, beta=mcfg.beta, s_m=mcfg.s_m,
            p_fa_trunc=mcfg.p_fa_trunc, radius=mcfg.radius, seed_exceedance=mcfg.seed_exceedance,
        )
        detector = SequentialDetector(sdt_cfg, sensor.shape)
        clutter = mcfg.p_fa_trunc
    pda = mcfg.tracker.pda(clutter)
    modes = ModeSet.default(scenario.motion.T)
    track = None
    out, all_dets = [], []
    for t, frame in zip(truth, frames):
        dets = detector(frame)
        all_dets.extend(dets)
        if track is not None:
            track.step(frame, dets)
            if not track.alive:
                track = None
        best = _best(dets)
        if track is None and best is not None:
            track = Track(best, pda, modes, sensor, rng, scenario.motion.T)
        if mcfg.declare == "track":
            declared = track is not None
            cell = sensor.cell_of(track.mean[PX], track.mean[PY]) if declared else None
        else:
            declared = best is not None
            cell = best.cell if declared else None
        out.append(
            FramePoint(
                frame_index=frame.frame_index,
                present=t.present,
                truth=t.state,
                declared=declared,
                declared_cell=cell,
                estimate=track.mean.copy() if track is not None else None,
                cov_trace=float(np.trace(track.cov)) if track is not None else None,
            )
        )
    return out, all_dets


def _run_tbd(scenario, method, mcfg: TbdMethod, truth, frames, rng):
    sensor = scenario.sensor
    ex = ExistenceModel(mcfg.p_birth, mcfg.p_death, mcfg.p_init)
    tcfg = TbdConfig(
        n_particles=mcfg.n_particles, n_birth=mcfg.n_birth,
        declare_threshold=mcfg.declare_threshold, birth_velocity_std=mcfg.birth_velocity_std,
    )
    kind = "tbd1" if method in ("tbd1", "mmtbd1") else "tbd2"
    filt = TbdFilter(kind, ex, tbd_mode_set(method, scenario.motion.T), tcfg, sensor, rng)
    out = []
    for t, frame in zip(truth, frames):
        p, declared, est = filt.step(frame)
        cell = sensor.cell_of(est[PX], est[PY]) if declared else None
        out.append(
            FramePoint(
                frame_index=frame.frame_index,
                present=t.present,
                truth=t.state,
                declared=declared,
                declared_cell=cell,
                estimate=est,
                p_exist=p,
            )
        )
    return out, []


def run_single(scenario: ScenarioConfig, method: str, mcfg, master_seed: int, run_index: int) -> RunRecord:
    scene_rng, method_rng = run_streams(master_seed, run_index)
    truth, frames = simulate(scenario, scene_rng)
    if method in ("cdt", "sdt"):
        fps, dets = _run_detector(scenario, method, mcfg, truth, frames, method_rng)
    else:
        fps, dets = _run_tbd(scenario, method, mcfg, truth, frames, method_rng)
    return RunRecord((master_seed, run_index), fps, dets)


def _run_single_star(args):
    return run_single(*args)


def run_monte_carlo(
    scenario: ScenarioConfig,
    method: str,
    method_cfg=None,
    n_runs: int = 100,
    master_seed: int = 0,
    jobs: int = 1,
    first_run: int = 0,
) -> list[RunRecord]:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {{{', '.join(METHODS)}}}")
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    if method_cfg is None or isinstance(method_cfg, dict):
        method_cfg = method_config(method, method_cfg)
    if not isinstance(method_cfg, _METHOD_TYPES[method]):
        raise ConfigError(f"config of type {type(method_cfg).__name__} does not fit method {method}")
    args = [(scenario, method, method_cfg, master_seed, i) for i in range(first_run, first_run + n_runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_single_star, args, chunksize=max(1, n_runs // (4 * jobs))))
    return [run_single(*a) for a in args]


# ------------------------------------------------------------ metrics


def true_cell(fp: FramePoint, sensor) -> Optional[tuple]:
    if not fp.present:
        return None
    return sensor.cell_of(float(fp.truth[PX]), float(fp.truth[PY]))


def is_correct(fp: FramePoint, sensor) -> bool:
    """Declared cell within Chebyshev distance 1 of the true cell."""
    if not (fp.present and fp.declared and fp.declared_cell is not None):
        return False
    c = true_cell(fp, sensor)
    if c is None:
        return False
    return max(abs(fp.declared_cell[0] - c[0]), abs(fp.declared_cell[1] - c[1])) <= 1


@dataclass
class MetricSeries:
    frames: np.ndarray
    present: np.ndarray
    pd: np.ndarray
    rmse_pos: np.ndarray  # NaN where no run contributes
    rmse_vel: np.ndarray
    n_detected: np.ndarray

    def window_mask(self, window) -> np.ndarray:
        lo, hi = window
        return (self.frames >= lo) & (self.frames <= hi)

    def mean_pd(self, window) -> float:
        return float(self.pd[self.window_mask(window)].mean())


def _frame_table(records: Sequence[RunRecord]):
    if not records:
        raise ValueError("no run records")
    n = len(records[0].frames)
    for r in records:
        if len(r.frames) != n:
            raise ValueError("run records differ in length")
    return n


def detection_probability(records: Sequence[RunRecord], scenario: ScenarioConfig) -> np.ndarray:
    """Per-frame share of runs with a correct declaration (any declaration on object-free frames)."""
    n = _frame_table(records)
    pd = np.zeros(n)
    for r in records:
        for k, fp in enumerate(r.frames):
            pd[k] += is_correct(fp, scenario.sensor) if fp.present else fp.declared
    return pd / len(records)


def rmse_series(records: Sequence[RunRecord], scenario: ScenarioConfig):
    """Position and velocity RMSE over runs correctly detecting the object; NaN where none do."""
    n = _frame_table(records)
    se_pos, se_vel, cnt = np.zeros(n), np.zeros(n), np.zeros(n, dtype=int)
    for r in records:
        for k, fp in enumerate(r.frames):
            if fp.estimate is None or not is_correct(fp, scenario.sensor):
                continue
            e = fp.estimate - fp.truth
            se_pos[k] += e[PX] ** 2 + e[PY] ** 2
            se_vel[k] += e[VX] ** 2 + e[VY] ** 2
            cnt[k] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        rp = np.where(cnt > 0, np.sqrt(se_pos / np.maximum(cnt, 1)), np.nan)
        rv = np.where(cnt > 0, np.sqrt(se_vel / np.maximum(cnt, 1)), np.nan)
    return rp, rv, cnt


def compute_metrics(records: Sequence[RunRecord], scenario: ScenarioConfig) -> MetricSeries:
    pd = detection_probability(records, scenario)
    rp, rv, cnt = rmse_series(records, scenario)
    frames = np.array([fp.frame_index for fp in records[0].frames])
    present = np.array([fp.present for fp in records[0].frames])
    return MetricSeries(frames, present, pd, rp, rv, cnt)


def declaration_rate(records: Sequence[RunRecord]) -> float:
    """Share of all (run, frame) pairs carrying any declaration."""
    total = sum(len(r.frames) for r in records)
    return sum(fp.declared for r in records for fp in r.frames) / total


def calibrate_false_alarm(
    scenario: ScenarioConfig,
    method: str,
    knob: str,
    target: float,
    bounds: tuple,
    n_runs: int,
    master_seed: int,
    base: Optional[dict] = None,
    iters: int = 8,
    log: bool = True,
    jobs: int = 1,
) -> tuple[float, float]:
    """Bisect one method knob so the noise-only declaration rate approaches ``target``.

    The knob is assumed monotone in the rate (either direction).  Returns the
    tried value whose rate was closest to the target in ratio terms, and
    that rate.
    """
    if not target > 0:
        raise ValueError("target rate must be positive")
    noise = scenario.without_object()
    base = dict(base or {})
    tried = []

    def rate(v):
        r = declaration_rate(run_monte_carlo(noise, method, {**base, knob: v}, n_runs, master_seed, jobs))
        tried.append((abs(math.log((r + 1e-12) / target)), v, r))
        return r

    lo, hi = bounds
    increasing = rate(hi) >= rate(lo)
    for _ in range(iters):
        mid = math.sqrt(lo * hi) if log else 0.5 * (lo + hi)
        if (rate(mid) < target) == increasing:
            lo = mid
        else:
            hi = mid
    _, value, r = min(tried)
    return value, r


def binomial_band(p: float, n: int, k: float = 3.0) -> tuple[float, float]:
    half = k * math.sqrt(p * (1.0 - p) / n)
    return p - half, p + half


# ------------------------------------------------------------ comparison


@dataclass
class ComparisonRow:
    metric: str
    mean_a: float
    mean_b: float
    delta: float
    dominates: bool


@dataclass
class ComparisonReport:
    window: tuple
    rows: list

    def row(self, metric: str) -> ComparisonRow:
        return next(r for r in self.rows if r.metric == metric)


def compare(a: MetricSeries, b: MetricSeries, window) -> ComparisonReport:
    """Window means of both series; ``dominates`` means ``a`` is strictly better.

    Better is higher for ``pd`` and lower for the RMSEs.  RMSE means only use
    frames where both series are defined.
    """
    if len(a.frames) != len(b.frames) or not np.array_equal(a.frames, b.frames):
        raise ValueError("series cover different frames")
    mask = a.window_mask(window)
    rows = []
    for metric, higher_better in (("pd", True), ("rmse_pos", False), ("rmse_vel", False)):
        xa, xb = getattr(a, metric)[mask], getattr(b, metric)[mask]
        ok = ~(np.isnan(xa) | np.isnan(xb))
        if ok.any():
            ma, mb = float(xa[ok].mean()), float(xb[ok].mean())
            delta = ma - mb
            dom = delta > 0 if higher_better else delta < 0
        else:
            ma = mb = delta = float("nan")
            dom = False
        rows.append(ComparisonRow(metric, ma, mb, delta, bool(dom)))
    return ComparisonReport(tuple(window), rows)


# ------------------------------------------------------------ CSV output


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


METRIC_COLUMNS = ["scenario", "method", "snr_db", "frame", "pd", "rmse_pos", "rmse_vel", "n_detected"]
COMPARISON_COLUMNS = ["window", "metric", "mean_a", "mean_b", "delta", "dominates"]


def write_metrics_csv(series: MetricSeries, scenario: str, method: str, snr_db: float, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for k in range(len(series.frames)):
            w.writerow([
                scenario, method, _fmt(float(snr_db)), _fmt(series.frames[k]), _fmt(series.pd[k]),
                _fmt(series.rmse_pos[k]), _fmt(series.rmse_vel[k]), _fmt(series.n_detected[k]),
            ])


def read_metrics_csv(path):
    """Returns ``(series, meta)`` with ``meta`` holding scenario, method and snr_db."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no metric rows")
    missing = set(METRIC_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    num = lambda s: float(s) if s != "" else float("nan")  # noqa: E731
    series = MetricSeries(
        frames=np.array([int(r["frame"]) for r in rows]),
        present=np.zeros(len(rows), dtype=bool),
        pd=np.array([num(r["pd"]) for r in rows]),
        rmse_pos=np.array([num(r["rmse_pos"]) for r in rows]),
        rmse_vel=np.array([num(r["rmse_vel"]) for r in rows]),
        n_detected=np.array([int(r["n_detected"]) for r in rows]),
    )
    meta = {"scenario": rows[0]["scenario"], "method": rows[0]["method"], "snr_db": float(rows[0]["snr_db"])}
    return series, meta


def write_comparison_csv(report: ComparisonReport, path) -> None:
    win = f"{report.window[0]}-{report.window[1]}"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in report.rows:
            w.writerow([win, r.metric, _fmt(r.mean_a), _fmt(r.mean_b), _fmt(r.delta), _fmt(r.dominates)])


def write_detections_csv(dets: Sequence[Detection], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "cell_i", "cell_j", "statistic", "iterations", "path"])
        for d in dets:
            path_s = ";".join(f"{f}:{i}:{j}" for f, (i, j) in (d.path or ((d.frame_index, d.cell),)))
            w.writerow([d.frame_index, d.cell[0], d.cell[1], _fmt(d.statistic), d.iterations, path_s])


def write_estimates_csv(record: RunRecord, path) -> None:
    """Tracker estimate stream, one row per frame with a live track."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "px", "vx", "py", "vy", "trace_cov"])
        for fp in record.frames:
            if fp.estimate is None:
                continue
            w.writerow([fp.frame_index, *(_fmt(v) for v in fp.estimate), _fmt(fp.cov_trace)])


def write_tbd_csv(record: RunRecord, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "p_exist", "declared", "px", "vx", "py", "vy"])
        for fp in record.frames:
            est = fp.estimate if fp.estimate is not None else [None] * 4
            w.writerow([fp.frame_index, _fmt(fp.p_exist), _fmt(fp.declared), *(_fmt(v) for v in est)])
