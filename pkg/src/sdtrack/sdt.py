"""Sequential detection over drifting-cell track hypotheses.

Every hypothesis is a short cell path, one cell per frame, whose consecutive
cells are within ``radius`` of each other (Chebyshev distance).  Its
statistic is the sum of the path's measurements ``T_M``.  With Gaussian
cells the log of the product of per-cell likelihood ratios is

    log L_M = (I / sigma^2) T_M - M I^2 / (2 sigma^2)

so the two-threshold test on ``L_M`` is an exact test on ``T_M`` with
thresholds that grow by ``I / 2`` per iteration.  After ``s_m`` iterations
the test is truncated to a single threshold ``tau``.

Hypotheses are held in a :class:`HypothesisBank` of parallel arrays; the
bank iterates as :class:`TrackHypothesis` objects for inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional

import numpy as np
from scipy.stats import norm

from .cdt import Detection


class SequencingError(ValueError):
    """A frame arrived out of order."""


class Decision(Enum):
    ACCEPT_H0 = 0
    CONTINUE = 1
    ACCEPT_H1 = 2


def wald_thresholds(alpha: float, beta: float) -> tuple[float, float]:
    """Wald's approximate likelihood-ratio thresholds ``(beta/(1-alpha), (1-beta)/alpha)``."""
    if not (0.0 < alpha < 1.0 and 0.0 < beta < 1.0) or alpha + beta >= 1.0:
        raise ValueError(f"need 0 < alpha, beta and alpha + beta < 1, got {alpha}, {beta}")
    th1 = beta / (1.0 - alpha)
    th2 = (1.0 - beta) / alpha
    if not th1 < 1.0 < th2:
        raise ValueError("degenerate thresholds")
    return th1, th2


def truncated_tau(s_m: int, sigma: float, p_fa_trunc: float) -> float:
    """Threshold on ``T_{s_m}`` exceeded with probability ``p_fa_trunc`` by one noise-only path."""
    if not 0.0 < p_fa_trunc < 1.0:
        raise ValueError(f"p_fa_trunc must lie in (0, 1), got {p_fa_trunc}")
    return float(math.sqrt(s_m) * sigma * norm.isf(p_fa_trunc))


@dataclass(frozen=True)
class SdtConfig:
    intensity: float
    sigma: float = 1.0
    alpha: float = 0.01
    beta: float = 0.05
    s_m: int = 3
    p_fa_trunc: float = 1e-3
    radius: int = 1
    seed_exceedance: float = 0.3
    th1: Optional[float] = None
    th2: Optional[float] = None
    tau: Optional[float] = None
    seed_threshold: Optional[float] = None

    def __post_init__(self):
        if self.s_m < 1 or self.radius < 1:
            raise ValueError("s_m and radius must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.th1 is None or self.th2 is None:
            th1, th2 = wald_thresholds(self.alpha, self.beta)
            object.__setattr__(self, "th1", th1 if self.th1 is None else self.th1)
            object.__setattr__(self, "th2", th2 if self.th2 is None else self.th2)
        if not 0.0 < self.th1 < 1.0 < self.th2:
            raise ValueError("need 0 < th1 < 1 < th2")
        if self.tau is None:
            object.__setattr__(self, "tau", truncated_tau(self.s_m, self.sigma, self.p_fa_trunc))
        if self.seed_threshold is None:
            object.__setattr__(
                self, "seed_threshold", float(self.sigma * norm.isf(self.seed_exceedance))
            )


def thresholds_for_iteration(cfg: SdtConfig, M) -> tuple:
    """Sum-statistic thresholds ``(sigma^2/I) ln(th_j) + M I / 2`` at iteration ``M``."""
    I, s2 = cfg.intensity, cfg.sigma**2
    if I <= 0:
        raise ValueError("the sequential test is degenerate for zero intensity")
    drift = np.asarray(M, dtype=float) * I / 2.0
    lo = s2 / I * math.log(cfg.th1) + drift
    hi = s2 / I * math.log(cfg.th2) + drift
    if np.ndim(lo) == 0:
        return float(lo), float(hi)
    return lo, hi


def log_likelihood_ratio(T, M, I: float, sigma: float):
    return (I / sigma**2) * np.asarray(T) - np.asarray(M) * I**2 / (2.0 * sigma**2)


@dataclass
class TrackHypothesis:
    path: tuple  # ((frame_index, (i, j)), ...), 1-based cells
    sum_stat: float

    @property
    def iteration(self) -> int:
        return len(self.path)

    @property
    def terminal(self) -> tuple[int, int]:
        return self.path[-1][1]


class HypothesisBank:
    """Parallel arrays of hypotheses that all end on frame ``frame_index``.

    ``paths[h, t]`` is the 0-based cell of hypothesis ``h`` on its ``t``-th
    frame (``-1`` past its length), ``M[h]`` its length and ``T[h]`` its sum.
    """

    def __init__(self, paths: np.ndarray, M: np.ndarray, T: np.ndarray, frame_index: int):
        self.paths = paths
        self.M = M
        self.T = T
        self.frame_index = frame_index

    @classmethod
    def empty(cls, s_m: int, frame_index: int = 0) -> "HypothesisBank":
        return cls(
            np.full((0, s_m, 2), -1, dtype=np.int32),
            np.zeros(0, dtype=np.int32),
            np.zeros(0),
            frame_index,
        )

    def __len__(self) -> int:
        return len(self.M)

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[np.arange(len(self)), self.M - 1]

    def subset(self, mask) -> "HypothesisBank":
        return HypothesisBank(self.paths[mask], self.M[mask], self.T[mask], self.frame_index)

    @staticmethod
    def concat(a: "HypothesisBank", b: "HypothesisBank") -> "HypothesisBank":
        return HypothesisBank(
            np.concatenate([a.paths, b.paths]),
            np.concatenate([a.M, b.M]),
            np.concatenate([a.T, b.T]),
            b.frame_index,
        )

    def hypothesis(self, h: int) -> TrackHypothesis:
        M = int(self.M[h])
        first = self.frame_index - M + 1
        path = tuple(
            (first + t, (int(self.paths[h, t, 0]) + 1, int(self.paths[h, t, 1]) + 1))
            for t in range(M)
        )
        return TrackHypothesis(path, float(self.T[h]))

    def __iter__(self) -> Iterator[TrackHypothesis]:
        for h in range(len(self)):
            yield self.hypothesis(h)


@dataclass
class SdtState:
    active: HypothesisBank
    used_cells: np.ndarray  # (n, m) bool, cells claimed on frame ``frame_index``
    frame_index: int = 0

    @classmethod
    def initial(cls, shape: tuple[int, int], cfg: SdtConfig) -> "SdtState":
        return cls(HypothesisBank.empty(cfg.s_m), np.zeros(shape, dtype=bool), 0)


def _offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    return np.stack([di.ravel(), dj.ravel()], axis=1).astype(np.int32)


def seed_candidates(frame, state: SdtState, cfg: SdtConfig) -> HypothesisBank:
    """One single-frame hypothesis per unused cell above the seed threshold.

    ``state.used_cells`` must refer to ``frame``.
    """
    mask = frame.cells > cfg.seed_threshold
    if state.frame_index == frame.frame_index:
        mask &= ~state.used_cells
    cells = np.argwhere(mask).astype(np.int32)
    paths = np.full((len(cells), cfg.s_m, 2), -1, dtype=np.int32)
    paths[:, 0] = cells
    T = frame.cells[cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0)
    return HypothesisBank(paths, np.ones(len(cells), dtype=np.int32), T.astype(float), frame.frame_index)


def expand_hypotheses(state: SdtState, frame, cfg: SdtConfig) -> tuple[HypothesisBank, np.ndarray]:
    """Branch every active hypothesis into its clipped ``radius`` neighbourhood.

    Returns the children and the cells of ``frame`` they claim.
    """
    n, m = frame.shape
    used = np.zeros((n, m), dtype=bool)
    bank = state.active
    if len(bank) == 0:
        return HypothesisBank.empty(cfg.s_m, frame.frame_index), used
    if np.any(bank.M >= cfg.s_m):
        raise ValueError("hypotheses at s_m must be resolved before expansion")
    off = _offsets(cfg.radius)
    term = bank.terminal
    child = term[:, None, :] + off[None, :, :]  # (H, K, 2)
    ok = (child[..., 0] >= 0) & (child[..., 0] < n) & (child[..., 1] >= 0) & (child[..., 1] < m)
    parent, k = np.nonzero(ok)
    cells = child[parent, k]
    used[cells[:, 0], cells[:, 1]] = True
    paths = bank.paths[parent].copy()
    M = bank.M[parent] + 1
    paths[np.arange(len(parent)), M - 1] = cells
    T = bank.T[parent] + frame.cells[cells[:, 0], cells[:, 1]]
    return HypothesisBank(paths, M.astype(np.int32), T, frame.frame_index), used


def merge_hypotheses(bank: HypothesisBank, shape: tuple[int, int]) -> HypothesisBank:
    """Keep the largest-sum hypothesis per (terminal cell, iteration)."""
    if len(bank) == 0:
        return bank
    n, m = shape
    term = bank.terminal
    key = (bank.M.astype(np.int64) - 1) * (n * m) + term[:, 0] * m + term[:, 1]
    order = np.lexsort((-bank.T, key))
    k_sorted = key[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = k_sorted[1:] != k_sorted[:-1]
    keep = np.sort(order[first])
    return bank.subset(keep)


def decide(M, T, cfg: SdtConfig) -> np.ndarray:
    """Vectorised decisions as ``Decision`` values (0 = H0, 1 = continue, 2 = H1)."""
    M = np.asarray(M)
    T = np.asarray(T, dtype=float)
    lo, hi = thresholds_for_iteration(cfg, M)
    out = np.full(T.shape, Decision.CONTINUE.value, dtype=np.int8)
    out[T < lo] = Decision.ACCEPT_H0.value
    out[T > hi] = Decision.ACCEPT_H1.value
    trunc = M >= cfg.s_m
    out[trunc] = np.where(T[trunc] > cfg.tau, Decision.ACCEPT_H1.value, Decision.ACCEPT_H0.value)
    return out


def sprt_decide(hyp: TrackHypothesis, cfg: SdtConfig) -> Decision:
    return Decision(int(decide(np.array([hyp.iteration]), np.array([hyp.sum_stat]), cfg)[0]))


def sdt_step(state: SdtState, frame, cfg: SdtConfig) -> tuple[list[Detection], SdtState]:
    """Process one frame: extend, seed, decide, prune, merge."""
    if state.frame_index and frame.frame_index != state.frame_index + 1:
        raise SequencingError(
            f"expected frame {state.frame_index + 1}, got frame {frame.frame_index}"
        )
    shape = frame.shape
    children, used = expand_hypotheses(state, frame, cfg)
    seeds = seed_candidates(frame, SdtState(children, used, frame.frame_index), cfg)
    bank = merge_hypotheses(HypothesisBank.concat(children, seeds), shape)

    dec = decide(bank.M, bank.T, cfg)
    detections = []
    keep = dec == Decision.CONTINUE.value
    winners = np.nonzero(dec == Decision.ACCEPT_H1.value)[0]
    if len(winners):
        score = bank.T / (cfg.sigma * np.sqrt(bank.M))
        winners = winners[np.argsort(-score[winners], kind="stable")]
        # claimed[d, i, j]: cell (i, j) on frame frame_index - d belongs to a detection
        claimed = np.zeros((cfg.s_m, *shape), dtype=bool)
        for h in winners:
            M = int(bank.M[h])
            cells = bank.paths[h, :M]
            back = M - 1 - np.arange(M)
            if claimed[back, cells[:, 0], cells[:, 1]].any():
                continue
            claimed[back, cells[:, 0], cells[:, 1]] = True
            hyp = bank.hypothesis(h)
            detections.append(
                Detection(
                    frame_index=frame.frame_index,
                    cell=hyp.terminal,
                    statistic=hyp.sum_stat,
                    source="SDT",
                    path=hyp.path,
                    iterations=M,
                    score=float(score[h]),
                )
            )
        survivors = np.nonzero(keep)[0]
        if len(survivors):
            t = np.arange(cfg.s_m)
            Ms = bank.M[survivors]
            valid = t[None, :] < Ms[:, None]
            back = np.where(valid, Ms[:, None] - 1 - t[None, :], 0)
            p = bank.paths[survivors]
            hit = claimed[back, np.maximum(p[..., 0], 0), np.maximum(p[..., 1], 0)] & valid
            keep[survivors[hit.any(axis=1)]] = False
    return detections, SdtState(bank.subset(keep), used, frame.frame_index)


def path_velocity(path, delta=(1.0, 1.0), T: float = 1.0) -> tuple[float, float]:
    """Velocity implied by a detection path: end-to-end displacement over its duration."""
    if path is None or len(path) < 2:
        return (0.0, 0.0)
    (_, (i0, j0)), (_, (i1, j1)) = path[0], path[-1]
    steps = (len(path) - 1) * T
    return ((i1 - i0) * delta[0] / steps, (j1 - j0) * delta[1] / steps)


class SequentialDetector:
    """Stateful wrapper feeding frames through :func:`sdt_step`."""

    def __init__(self, cfg: SdtConfig, shape: tuple[int, int]):
        self.cfg = cfg
        self.state = SdtState.initial(shape, cfg)

    def __call__(self, frame) -> list[Detection]:
        dets, self.state = sdt_step(self.state, frame, self.cfg)
        return dets
