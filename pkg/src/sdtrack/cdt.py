"""One-frame, per-cell likelihood-ratio detector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .scenario import Frame

_MAX_EXP = 700.0


@dataclass(frozen=True)
class Detection:
    """A declared cell.

    ``statistic`` is what was compared to the threshold (``z`` for CDT, the
    path sum for SDT).  ``score`` puts both on the same footing: the
    statistic standardised under the noise-only hypothesis,
    ``statistic / (sigma * sqrt(iterations))``.
    """

    frame_index: int
    cell: tuple[int, int]
    statistic: float
    source: str = "CDT"
    path: Optional[tuple] = None
    iterations: int = 1
    score: float = 0.0


@dataclass(frozen=True)
class CdtConfig:
    p_fa: float
    intensity: float
    sigma: float
    threshold: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "threshold", cdt_threshold(self.p_fa, self.sigma))

    @property
    def lr_threshold(self) -> float:
        """Equivalent threshold on the likelihood ratio itself."""
        I, s2 = self.intensity, self.sigma**2
        return math.exp(I * (2.0 * self.threshold - I) / (2.0 * s2))


def cell_likelihood_ratio(z, I: float, sigma: float):
    """``f(z | object) / f(z | noise)`` for a Gaussian cell, ``exp(-I (I - 2z) / 2 sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    expo = -I * (I - 2.0 * np.asarray(z, dtype=float)) / (2.0 * sigma**2)
    out = np.exp(np.minimum(expo, _MAX_EXP))
    return float(out) if np.ndim(out) == 0 else out


def cdt_threshold(p_fa: float, sigma: float) -> float:
    """Intensity threshold with per-cell false-alarm probability ``p_fa``."""
    if not 0.0 < p_fa < 1.0:
        raise ValueError(f"p_fa must lie in (0, 1), got {p_fa}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return float(sigma * norm.isf(p_fa))


def detect_frame(frame: Frame, cfg: CdtConfig) -> list[Detection]:
    hits = np.argwhere(frame.cells > cfg.threshold)
    out = []
    for i, j in hits:
        z = float(frame.cells[i, j])
        out.append(
            Detection(
                frame_index=frame.frame_index,
                cell=(int(i) + 1, int(j) + 1),
                statistic=z,
                source="CDT",
                iterations=1,
                score=z / cfg.sigma,
            )
        )
    return out
