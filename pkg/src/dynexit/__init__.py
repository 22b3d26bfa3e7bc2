"""Dynamic multi-exit temporal boundary detection on per-frame features."""

from .detector import (
    BoundaryDetector,
    DetectorConfig,
    ScoreSequence,
    pairwise_similarity,
    temporal_difference,
)
from .errors import (
    AlignmentError,
    ConfigurationError,
    DataError,
    DynexitError,
    NumericFault,
    UsageError,
)
from .evalproto import (
    AnnotationSet,
    EvalReport,
    MatchResult,
    corpus_eval,
    match_boundaries,
    rel_dis,
    video_f1,
)
from .features import (
    BackboneStage,
    FrameFeatureSequence,
    MultiScaleFeature,
    WindowTensor,
    aggregate_scales,
    run_stage,
    unfold_windows,
)
from .model import ModelConfig, MultiExitModel, build_model
from .scheduler import (
    ExitMask,
    ExitState,
    FlopsLedger,
    build_exit_mask,
    compact,
    estimate_peaks,
    pad_to_full,
    run_dynamic_inference,
)
from .synthetic import SyntheticSpec, VideoRecord, generate_synthetic, synthesize_corpus
from .training import (
    SoftLabelSequence,
    TrainConfig,
    TrainingVideo,
    backward,
    detector_loss,
    fit,
    make_soft_labels,
    total_loss,
)

__version__ = "0.1.0"
