import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdtrack.scenario import (
    PRESETS,
    ConfigError,
    Frame,
    MotionModel,
    ScenarioConfig,
    SensorConfig,
    TruthPoint,
    cell_indices,
    generate_trajectory,
    load_scenario,
    propagate_state,
    read_frames_csv,
    render_frame,
    scenario_from_dict,
    scenario_to_dict,
    signal_map,
    simulate,
    snr_to_intensity,
    state_vector,
    transition_matrix,
    white_noise_acceleration_q,
    write_frames_csv,
)

# 10**(snr/20) evaluated with 40-digit decimal arithmetic
I_6DB = 2.000000019968104625
I_3DB_SIGMA2 = 2.825075089245508604


def test_snr_to_intensity_values():
    assert snr_to_intensity(0.0, 1.0) == 1.0
    assert snr_to_intensity(6.0206, 1.0) == pytest.approx(I_6DB, rel=1e-14)
    assert snr_to_intensity(3.0, 2.0) == pytest.approx(I_3DB_SIGMA2, rel=1e-14)


@pytest.mark.parametrize("snr,sigma", [(math.nan, 1.0), (math.inf, 1.0), (3.0, math.nan), (3.0, 0.0)])
def test_snr_to_intensity_rejects_bad_input(snr, sigma):
    with pytest.raises(ValueError):
        snr_to_intensity(snr, sigma)


@given(st.floats(-20, 30), st.floats(0.1, 10))
def test_snr_round_trip(snr, sigma):
    I = snr_to_intensity(snr, sigma)
    assert 10 * math.log10(I**2 / sigma**2) == pytest.approx(snr, abs=1e-9)


def test_transition_matrix_block_structure():
    F = transition_matrix(2.0)
    block = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.array_equal(F[:2, :2], block) and np.array_equal(F[2:, 2:], block)
    assert not F[:2, 2:].any() and not F[2:, :2].any()


def test_motion_model_rejects_bad_q():
    with pytest.raises(ValueError):
        MotionModel(T=1.0, Q=np.diag([1.0, -1.0, 1.0, 1.0]))
    Q = np.eye(4)
    Q[0, 1] = 0.5
    with pytest.raises(ValueError):
        MotionModel(T=1.0, Q=Q)


@given(st.floats(0.0, 5.0), st.floats(0.1, 3.0))
def test_cv_q_is_psd(q, T):
    Q = white_noise_acceleration_q(q, T)
    assert np.allclose(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() >= -1e-12


def test_propagate_state_deterministic_cases():
    rng = np.random.default_rng(0)
    still = MotionModel(T=1.0, Q=np.zeros((4, 4)))
    assert np.array_equal(propagate_state(state_vector(0, 1, 0, 0), still, rng), [1, 1, 0, 0])
    assert np.array_equal(propagate_state(state_vector(5, 0, 5, 0), still, rng), [5, 0, 5, 0])


def test_propagate_state_monte_carlo_mean():
    rng = np.random.default_rng(1)
    model = MotionModel(T=1.0, Q=np.eye(4))
    s = state_vector(1.0, 0.5, -2.0, 0.25)
    n = 100_000
    draws = s @ model.F.T + rng.standard_normal((n, 4)) @ model.noise_factor.T
    assert np.all(np.abs(draws.mean(axis=0) - model.F @ s) < 3 / math.sqrt(n))
    # the single-draw function agrees with the batched form in distribution
    one = np.array([propagate_state(s, model, rng) for _ in range(2000)])
    assert np.all(np.abs(one.mean(axis=0) - model.F @ s) < 5 / math.sqrt(2000))


def test_presence_intervals():
    ex1 = load_scenario("ex1")
    truth = generate_trajectory(ex1, np.random.default_rng(0))
    assert [t.frame_index for t in truth if t.present] == list(range(10, 36))
    ex3 = load_scenario("ex3")
    truth = generate_trajectory(ex3, np.random.default_rng(0))
    assert [t.frame_index for t in truth if t.present] == list(range(5, 36))
    assert all(t.state is None for t in truth if not t.present)


def test_straight_line_trajectory():
    cfg = ScenarioConfig(
        motion=MotionModel(T=1.0, Q=np.zeros((4, 4))), birth_frame=3, death_frame=12,
        initial_state=state_vector(1, 1, 1, 1),
    )
    truth = generate_trajectory(cfg, np.random.default_rng(0))
    for t in truth:
        if t.present:
            k = t.frame_index - 3
            assert t.state[0] == pytest.approx(1 + k) and t.state[2] == pytest.approx(1 + k)


def test_maneuver_sets_velocity_before_propagation():
    cfg = ScenarioConfig(
        motion=MotionModel(T=1.0, Q=np.zeros((4, 4))), birth_frame=1, death_frame=5,
        initial_state=state_vector(1, 1, 1, 0), maneuver_schedule=[(3, (0.0, 2.0))],
    )
    truth = generate_trajectory(cfg, np.random.default_rng(0))
    pos = [(t.state[0], t.state[2]) for t in truth if t.present]
    assert pos == [(1, 1), (2, 1), (3, 1), (3, 3), (3, 5)]


def test_maneuver_outside_presence_is_config_error():
    with pytest.raises(ConfigError):
        ScenarioConfig(birth_frame=10, death_frame=20, maneuver_schedule=[(25, (0.0, 1.0))])


@pytest.mark.parametrize("kw", [dict(n_frames=0), dict(birth_frame=0), dict(birth_frame=30, death_frame=20),
                                dict(death_frame=50)])
def test_scenario_bounds(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)


def test_cell_mapping_is_one_based_ceiling():
    s = SensorConfig(n=20, m=20)
    assert s.cell_of(0.5, 0.5) == (1, 1)
    assert s.cell_of(1.0, 1.0) == (1, 1)
    assert s.cell_of(1.0001, 19.99) == (2, 20)
    assert s.cell_of(0.0, 5.0) is None
    assert s.cell_of(20.5, 5.0) is None
    assert s.cell_center((5, 5)) == (4.5, 4.5)
    i, j, inside = cell_indices(np.array([0.5, 20.5]), np.array([3.2, 1.0]), s)
    assert (i[0], j[0], inside[0]) == (0, 3, True) and not inside[1]


def test_render_absent_object_is_pure_noise():
    s = SensorConfig(n=20, m=20, intensity=2.0, sigma=1.0)
    rng = np.random.default_rng(2)
    cells = np.concatenate([render_frame(TruthPoint(1, False), s, 1, rng).cells.ravel() for _ in range(250)])
    assert len(cells) == 100_000
    assert abs(cells.mean()) < 0.01
    assert abs(cells.var() - 1.0) < 0.03


def test_render_noise_free_limit():
    s = SensorConfig(n=20, m=20, intensity=2.0, sigma=1e-12)
    fr = render_frame(TruthPoint(1, True, state_vector(4.5, 0, 4.5, 0)), s, 1, np.random.default_rng(0))
    h = np.round(fr.cells, 9)
    assert h[4, 4] == 2.0
    h[4, 4] = 0.0
    assert not h.any()


def test_occupied_cell_mean():
    s = SensorConfig(n=20, m=20, intensity=1.5, sigma=1.0)
    rng = np.random.default_rng(3)
    tp = TruthPoint(1, True, state_vector(7.2, 0, 3.9, 0))
    z = np.array([render_frame(tp, s, 1, rng).cells[7, 3] for _ in range(10_000)])
    assert abs(z.mean() - 1.5) < 3 / math.sqrt(10_000)


def test_blur_peak_value():
    I = 3.0
    s = SensorConfig(n=20, m=20, intensity=I, sigma=1.0, blur=1.0)
    # with blur the reference point of cell i is i * delta
    h = signal_map(state_vector(5.0, 0, 7.0, 0), s)
    assert h[4, 6] == pytest.approx(I / (2 * math.pi), rel=1e-15)
    assert h[4, 6] == h.max()


def test_off_grid_object_warns_and_renders_nothing(caplog):
    s = SensorConfig(n=20, m=20, intensity=2.0, sigma=1.0)
    with caplog.at_level(logging.WARNING):
        h = signal_map(state_vector(25.0, 0, 3.0, 0), s)
    assert not h.any()
    assert "off the sensor grid" in caplog.text


def test_frame_rejects_nonfinite():
    with pytest.raises(ValueError):
        Frame(np.array([[0.0, np.nan]]), 1)


def test_presets():
    assert set(PRESETS) == {"ex1", "ex2", "ex3", "ex4", "ex5", "ex6"}
    assert load_scenario("ex4").snr_variants == (3.0, 5.0, 9.0)
    assert load_scenario("ex6").snr_variants == (1.0, 2.0, 3.0)
    for name in PRESETS:
        sc = load_scenario(name)
        assert sc.sensor.shape == (20, 20) and sc.n_frames == 40
    with pytest.raises(KeyError, match="ex1"):
        load_scenario("nope")


def _cell_steps(sc):
    truth = generate_trajectory(sc, np.random.default_rng(0))
    cells = [sc.sensor.cell_of(t.state[0], t.state[2]) for t in truth if t.present]
    assert None not in cells
    frames = [t.frame_index for t in truth if t.present]
    steps = [max(abs(a[0] - b[0]), abs(a[1] - b[1])) for a, b in zip(cells, cells[1:])]
    return frames[1:], steps


@pytest.mark.parametrize("name", ["ex1", "ex2", "ex3", "ex4", "ex6"])
def test_presets_move_at_most_one_cell(name):
    _, steps = _cell_steps(load_scenario(name))
    assert max(steps) <= 1


def test_ex5_fast_and_slow_segments():
    sc = load_scenario("ex5")
    frames, steps = _cell_steps(sc)
    by_frame = dict(zip(frames, steps))
    assert any(by_frame[k] > 1 for k in range(6, 17))
    assert any(by_frame[k] > 1 for k in range(30, 36))
    assert all(by_frame[k] <= 1 for k in range(18, 29))
    assert [f for f, _ in sc.maneuver_schedule] == [16, 28]


def test_simulate_is_deterministic():
    sc = load_scenario("ex3")
    t1, f1 = simulate(sc, np.random.default_rng(42))
    t2, f2 = simulate(sc, np.random.default_rng(42))
    assert all(np.array_equal(a.cells, b.cells) for a, b in zip(f1, f2))
    assert all((a.state is None and b.state is None) or np.array_equal(a.state, b.state) for a, b in zip(t1, t2))


def test_without_object_and_with_snr():
    sc = load_scenario("ex4")
    quiet = sc.without_object()
    truth, _ = simulate(quiet, np.random.default_rng(0))
    assert not any(t.present for t in truth)
    assert quiet.sensor.intensity == sc.sensor.intensity
    assert sc.with_snr(9.0).sensor.intensity == pytest.approx(snr_to_intensity(9.0, 1.0))


def test_scenario_dict_round_trip():
    sc = load_scenario("ex5")
    d = scenario_to_dict(sc)
    back = scenario_from_dict(json.loads(json.dumps(d)))
    assert scenario_to_dict(back) == d
    tweaked = scenario_from_dict({"preset": "ex3", "snr_db": 9.0})
    assert tweaked.snr_variants == (9.0,) and tweaked.birth_frame == 5
    with pytest.raises(ConfigError, match="bogus"):
        scenario_from_dict({"preset": "ex3", "bogus": 1})
    with pytest.raises(ConfigError, match="colour"):
        scenario_from_dict({"sensor": {"colour": 1}})


def test_frames_csv_round_trip(tmp_path):
    _, frames = simulate(load_scenario("ex1"), np.random.default_rng(0))
    p = tmp_path / "f.csv"
    write_frames_csv(frames[:3], p)
    back = read_frames_csv(p)
    assert len(back) == 3
    assert all(np.array_equal(a.cells, b.cells) and a.frame_index == b.frame_index for a, b in zip(frames, back))


@settings(max_examples=25)
@given(st.integers(1, 30), st.integers(1, 30), st.floats(-5, 40), st.floats(-5, 40))
def test_cell_of_matches_vectorised(n, m, px, py):
    s = SensorConfig(n=n, m=m)
    i, j, inside = cell_indices(np.array([px]), np.array([py]), s)
    c = s.cell_of(px, py)
    if c is None:
        assert not inside[0]
    else:
        assert inside[0] and (i[0] + 1, j[0] + 1) == c
