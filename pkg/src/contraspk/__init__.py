"""Contrastive speaker embeddings with sequential disentanglement."""

from .config import RunConfig, desk_profile, paper_profile, profile_config, test_profile
from .dataset import (
    AugmentationPolicy,
    AudioCorpus,
    FeatureCorpus,
    PairBatch,
    SyntheticSpec,
    Trial,
    generate_synthetic,
    make_trials,
    sample_pair_batch,
)
from .errors import (
    ContraspkError,
    NumericalError,
    ResourceError,
    TooShortError,
    TrainingError,
    ValidationError,
)
from .evaluation import (
    EmbeddingArchive,
    EvalReport,
    ProbeReport,
    TrialScoreSet,
    compute_eer,
    compute_min_dcf,
    extract_embeddings,
    probe_speaker_leakage,
    score_trials,
)
from .featio import (
    AugmentationKind,
    AugmentationSpec,
    FeatureSequence,
    Waveform,
    apply_cmn,
    augment,
    extract_fbank,
    shuffle_frames,
)
from .losses import (
    ContrastiveConfig,
    DenominatorRule,
    LossBreakdown,
    kl_content,
    kl_speaker,
    mi_terms,
    nt_xent,
    reconstruction_loss,
    total_loss,
)
from .model import (
    ContentPosterior,
    ContentPrior,
    ModelConfig,
    SpeakerContentVAE,
    SpeakerPosterior,
    reparameterize,
    tiny_config,
)
from .train import TrainConfig, load_checkpoint, lr_at, model_from_checkpoint

__version__ = "0.1.0"
