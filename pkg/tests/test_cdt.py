import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdtrack.cdt import CdtConfig, cdt_threshold, cell_likelihood_ratio, detect_frame
from sdtrack.scenario import Frame

# inverse normal CDF values from statistics.NormalDist (independent of scipy)
Z_0158655 = 1.0000010494310452  # NormalDist().inv_cdf(1 - 0.158655)
Z_099 = 2.3263478740408408


def test_likelihood_ratio_values():
    assert cell_likelihood_ratio(1.0, 2.0, 1.0) == 1.0
    assert cell_likelihood_ratio(0.75, 1.5, 0.7) == 1.0
    assert cell_likelihood_ratio(2.0, 2.0, 1.0) == pytest.approx(math.e**2, rel=1e-15)
    assert cell_likelihood_ratio(0.0, 2.0, 1.0) == pytest.approx(math.e**-2, rel=1e-15)


def test_likelihood_ratio_vectorised_and_overflow_safe():
    z = np.array([-1e6, 0.0, 1e6])
    L = cell_likelihood_ratio(z, 2.0, 1.0)
    assert L.shape == (3,) and np.all(np.isfinite(L))
    assert L[0] == 0.0 and L[2] > 1e300


@given(st.floats(-10, 10), st.floats(0.01, 5), st.floats(0.1, 3), st.floats(0.001, 2))
def test_likelihood_ratio_increasing_in_z(z, I, sigma, dz):
    lo, hi = cell_likelihood_ratio(z, I, sigma), cell_likelihood_ratio(z + dz, I, sigma)
    assert hi >= lo
    if 1e-300 < lo and hi < 1e300:
        assert hi > lo


def test_cdt_threshold_values():
    assert cdt_threshold(0.5, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert cdt_threshold(0.158655, 1.0) == pytest.approx(Z_0158655, abs=1e-9)
    assert cdt_threshold(0.01, 2.0) == pytest.approx(2 * Z_099, abs=1e-12)
    assert cdt_threshold(0.01, 2.0) == pytest.approx(4.6527, abs=1e-4)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_cdt_threshold_rejects_bad_probability(p):
    with pytest.raises(ValueError):
        cdt_threshold(p, 1.0)


def test_detect_frame_examples():
    cfg = CdtConfig(p_fa=0.158655, intensity=2.0, sigma=1.0)
    assert detect_frame(Frame(np.zeros((20, 20)), 1), cfg) == []
    cells = np.zeros((20, 20))
    cells[3, 7] = 10.0
    dets = detect_frame(Frame(cells, 4), cfg)
    assert len(dets) == 1
    d = dets[0]
    assert d.cell == (4, 8) and d.frame_index == 4 and d.statistic == 10.0 and d.source == "CDT"


def test_lr_form_equals_threshold_form():
    rng = np.random.default_rng(0)
    cfg = CdtConfig(p_fa=0.01, intensity=1.7, sigma=1.3)
    z = rng.normal(0.0, 3.0, 100_000)
    lr_side = cell_likelihood_ratio(z, cfg.intensity, cfg.sigma) > cfg.lr_threshold
    z_side = z > cfg.threshold
    away = np.abs(z - cfg.threshold) > 1e-9
    assert np.array_equal(lr_side[away], z_side[away])


def test_detection_sets_nest_with_threshold():
    rng = np.random.default_rng(1)
    fr = Frame(rng.standard_normal((20, 20)), 1)
    loose = {d.cell for d in detect_frame(fr, CdtConfig(0.1, 1.0, 1.0))}
    tight = {d.cell for d in detect_frame(fr, CdtConfig(0.01, 1.0, 1.0))}
    assert tight <= loose


def test_false_alarm_rate_calibrated():
    rng = np.random.default_rng(2)
    cfg = CdtConfig(p_fa=0.01, intensity=1.0, sigma=1.0)
    hits = sum(len(detect_frame(Frame(rng.standard_normal((20, 20)), k), cfg)) for k in range(250))
    n = 250 * 400
    band = 3 * math.sqrt(0.01 * 0.99 / n)
    assert abs(hits / n - 0.01) < band


def test_detection_probability_under_h1():
    rng = np.random.default_rng(3)
    I, sigma, p = 2.0, 1.0, 0.01
    cfg = CdtConfig(p, I, sigma)
    z = I + sigma * rng.standard_normal(10_000)
    emp = float(np.mean(z > cfg.threshold))
    from statistics import NormalDist
    exact = 1 - NormalDist().cdf((cfg.threshold - I) / sigma)
    assert abs(emp - exact) < 3 * math.sqrt(exact * (1 - exact) / 10_000)
