"""Multi-output Gaussian Process gait modeling with HMM segmentation.

The package covers the full pipeline: gait-signal preprocessing,
composite-kernel multi-output GP regression under an intrinsic
coregionalization model, Adam-based hyperparameter fitting, a four-state
Gaussian-emission HMM for phase segmentation and anomaly extraction,
evaluation metrics (MAE, R², DTW/aDTW), corpus I/O with
leave-one-subject-out splitting, a synthetic-data generator, and the
``gaitmogp`` command-line front end.
"""

from .errors import GaitPipelineError, NumericError, ValidationError
from .kernels import (CompositeKernelSpec, CoregionalizationFactor,
                      SubKernelParams, eval_composite, eval_matern32,
                      eval_periodic, eval_se, gram_matrix, icm_covariance)
from .mogp import (MoGPModel, OptimizerConfig, PosteriorPrediction,
                   TrainingSet, export_coregionalization, fit,
                   initialize_model, lml_gradient, log_marginal_likelihood,
                   predict)
from .hmm import (AnomalousSegment, BaumWelchConfig, DecodedStates, HmmModel,
                  ObservationSequence, anomalous_segments, baum_welch_fit,
                  default_model, emission_logpdf, forward_log_likelihood,
                  init_emissions_from_data, viterbi_decode)
from .gait_signal import (CHANNELS, GaitEvents, JointTrajectory3D,
                          PhaseDurations, TrajectorySet, detect_events,
                          impute_missing, knee_angle, lowpass_filter,
                          normalize_and_align, phase_durations)
from .metrics import (MetricReport, adtw, compute_report, dtw, mae,
                      r_squared)
from .dataio import (AnomalySpec, RawCycle, SubjectRecord, SynthConfig,
                     generate_synthetic, load_corpus, loso_splits,
                     save_corpus)

__version__ = "0.1.0"

__all__ = [
    "GaitPipelineError", "NumericError", "ValidationError",
    "CompositeKernelSpec", "CoregionalizationFactor", "SubKernelParams",
    "eval_composite", "eval_matern32", "eval_periodic", "eval_se",
    "gram_matrix", "icm_covariance",
    "MoGPModel", "OptimizerConfig", "PosteriorPrediction", "TrainingSet",
    "export_coregionalization", "fit", "initialize_model", "lml_gradient",
    "log_marginal_likelihood", "predict",
    "AnomalousSegment", "BaumWelchConfig", "DecodedStates", "HmmModel",
    "ObservationSequence", "anomalous_segments", "baum_welch_fit",
    "default_model", "emission_logpdf", "forward_log_likelihood",
    "init_emissions_from_data", "viterbi_decode",
    "CHANNELS", "GaitEvents", "JointTrajectory3D", "PhaseDurations",
    "TrajectorySet", "detect_events", "impute_missing", "knee_angle",
    "lowpass_filter", "normalize_and_align", "phase_durations",
    "MetricReport", "adtw", "compute_report", "dtw", "mae", "r_squared",
    "AnomalySpec", "RawCycle", "SubjectRecord", "SynthConfig",
    "generate_synthetic", "load_corpus", "loso_splits", "save_corpus",
    "__version__",
]
