"""Speaker-adaptive lip reading on a synthetic talking-face benchmark."""

from .config import (
    AdaptConfig,
    ConfigError,
    DataConfig,
    ExperimentConfig,
    ModelSection,
    StageConfig,
    parse_config,
)
from .data import (
    DatasetSplits,
    SpeakerProfile,
    VideoClip,
    budget_subset,
    build_splits,
    make_speaker_profile,
    render_clip,
)
from .evaluation import (
    MetricsReport,
    edit_distance,
    greedy_ctc_decode,
    layer_probe,
    score_split,
    weight_separability,
)
from .losses import (
    InfeasibleLabelError,
    LossConfig,
    cross_entropy,
    ctc_loss,
    squared_distance,
    stage_loss,
    triplet_loss,
)
from .model import (
    BackboneActivations,
    LipAdaptModel,
    ModelConfig,
    build_model,
    sigma_enhance,
    sigma_suppress,
)
from .training import (
    StageOrderError,
    TrainState,
    TripletBatch,
    adapt,
    adaptation_sweep,
    run_stage,
    sample_triplet,
    train_full,
)

__version__ = "0.1.0"
