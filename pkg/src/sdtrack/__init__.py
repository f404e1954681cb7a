"""Sequential detection and tracking of very low SNR point objects on pixel grids."""

from .cdt import CdtConfig, Detection, cdt_threshold, cell_likelihood_ratio, detect_frame
from .evaluation import (
    METHODS,
    MetricSeries,
    RunRecord,
    calibrate_false_alarm,
    compare,
    compute_metrics,
    declaration_rate,
    detection_probability,
    method_config,
    rmse_series,
    run_monte_carlo,
)
from .scenario import (
    ConfigError,
    Frame,
    MotionModel,
    ScenarioConfig,
    SensorConfig,
    generate_trajectory,
    load_scenario,
    propagate_state,
    render_frame,
    simulate,
    snr_to_intensity,
)
from .sdt import (
    Decision,
    SdtConfig,
    SdtState,
    SequentialDetector,
    SequencingError,
    TrackHypothesis,
    sdt_step,
    truncated_tau,
    wald_thresholds,
)
from .tbd import ExistenceModel, NoEstimateError, TbdConfig, TbdFilter, tbd_estimate
from .tracker import ModeSet, PdaConfig, Track, track_step

__version__ = "0.1.0"
