"""Target-speaker guided speaker embeddings on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward, finite_difference_check
from .errors import (
    CheckpointError,
    DivergenceError,
    EmptyTargetMask,
    GradientCheckError,
    InfeasibleMixture,
    MissingMask,
    NotInitializedError,
    ShapeError,
    TapeError,
)
from .estimator import GuidedSpeakerEmbedder
from .evaluation import (
    DiarHypothesis,
    TrialScore,
    bootstrap_compare,
    compute_der,
    compute_eer,
    cosine_score,
    run_diarization,
    sweep_nontarget_duration,
)
from .features import (
    ActivityAnnotation,
    ActivityMask,
    FeatureSequence,
    load_wav,
    logmel_features,
    rasterize_activities,
)
from .models import ModelConfig, build_model, extract_embedding, load_checkpoint, save_checkpoint
from .synth import (
    Mixture,
    SyntheticSpeaker,
    build_trial_set,
    scale_nontarget_duration,
    synth_mixture,
    synth_speaker_bank,
)
from .training import AAMHead, LRSchedule, aam_softmax_loss, adam_step, cyclical_lr, train_run

__version__ = "0.1.0"
