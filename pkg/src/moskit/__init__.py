"""Multi-axis audio quality scoring on precomputed embeddings: differentiable
heads, four training objectives, the challenge metric protocol, and ensemble
selection tooling."""

from .data import (
    AxisScores,
    EmbeddingSequence,
    EmbeddingStore,
    Manifest,
    NormStats,
    SynthSpec,
    Utterance,
    align_and_fuse,
    apply_norm,
    fit_norm,
    random_crop,
    read_embedding,
    stratified_split,
    synth_corpus,
    write_embedding,
)
from .ensemble import (
    EnsembleSpec,
    Leaderboard,
    LeaderboardRow,
    compare_strategies,
    ensemble_predict,
    rank_models,
    select_all,
    select_explicit,
    select_intersection,
    select_topk,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DomainError,
    MoskitError,
    SelectionError,
    TrainingError,
)
from .losses import (
    LossConfig,
    axis_mean_loss,
    ccc_loss,
    clipped_mse,
    contrastive_loss,
    dcq_loss,
    utmos_loss,
)
from .metrics import (
    AXES,
    MetricReport,
    composite_score,
    evaluate,
    kendall_tau_b,
    mse,
    pearson_lcc,
    spearman_srcc,
    system_level,
)
from .model import (
    ModelConfig,
    ScoringModel,
    build_model,
    head_independence_check,
    load_checkpoint,
    predict_manifest,
    save_checkpoint,
)
from .nn import (
    AdamState,
    Blstm,
    ParamTensor,
    SequenceBatch,
    adam_step,
    affine_forward,
    blstm_forward,
    grad_check,
    masked_mean_pool,
)
from .training import (
    GridCell,
    TrainConfig,
    TrainHistory,
    run_ablation_grid,
    standard_grid,
    train,
)

__version__ = "0.1.0"
