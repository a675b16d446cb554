"""Fuse several object trackers and a detector through an HMM over which trackers are correct."""
from .detector import (
    CorrespondenceDecision,
    FeatureMatchStats,
    correspondence_test,
    detection_threshold,
    feature_type_weights,
    inlier_cost,
    normal_cdf,
)
from .emissions import (
    BetaShape,
    ObservableLayout,
    ObservableModel,
    TiedBetaEstimator,
    beta_logpdf,
    beta_pdf,
    default_observable_model,
    estimate_beta_per_state,
    estimate_beta_pooled,
    shape_from_moments,
)
from .evaluation import Evaluation, channel_recalls, evaluate_boxes, evaluate_trace
from .fusion import (
    BBox,
    DetectionEvent,
    FusionConfig,
    FusionEngine,
    FusionOutput,
    ReinitDirective,
    TrackerReport,
    average_bbox,
    detection_gate,
    iou,
)
from .hmm import (
    AnnotatedHistory,
    HmmParams,
    InfeasibleAnnotationError,
    default_transition_matrix,
    emission_log_density,
    expected_transition_counts,
    filter_posterior,
    forward_backward,
    forward_pass,
    log_likelihood,
    pairwise_posterior,
    reestimate_transitions,
    smoothed_posteriors,
    train,
)
from .oracle import brute_force, brute_force_likelihood, brute_force_posterior
from .simulator import (
    ChannelConfig,
    DetectorConfig,
    MotionConfig,
    ScenarioConfig,
    TraceRecord,
    generate_scenario,
    replay,
    run_closed_loop,
)
from .states import StateSpace, build_state_space, most_probable_state

__version__ = "0.1.0"
