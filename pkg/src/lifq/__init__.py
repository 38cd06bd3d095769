"""Quality-score decoding library with a verifiable numpy autodiff core.

Public surface re-exported here: the tensor engine, the decoder stack, the
mixture-of-experts head, losses and metrics, the LIFQ interchange format,
and the training harness.
"""

from .data import (
    FeatureRecord,
    Manifest,
    SplitSpec,
    median_of_runs,
    planted_score,
    read_checkpoint,
    read_feature_file,
    split,
    synth_generate,
    write_checkpoint,
    write_feature_file,
)
from .decoder import (
    AttentionParams,
    DecoderConfig,
    DecoderParams,
    FfnParams,
    GcnBlockParams,
    LinearParams,
    StageFeatures,
    cross_attend,
    decoder_forward,
    ffn,
    gcn_refine,
    init_queries,
    layer_norm,
    partition_pool,
)
from .errors import (
    ConfigError,
    FormatError,
    LifqError,
    MetricError,
    OracleError,
    RoutingError,
    ShapeError,
    TrainingAbort,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    l1_main,
    load_balance_loss,
    plcc,
    srocc,
    total_loss,
    weighted_total,
    z_loss,
)
from .model import ModelConfig, QualityModel
from .moe import (
    ExpertParams,
    GateParams,
    MoEConfig,
    MoEHeadParams,
    RoutingRecord,
    bypass_combine,
    expert_param_count,
    ffn_param_count,
    gate,
    gate_param_count,
    moe_forward,
    moe_head_forward,
    moe_param_count,
    route,
    score_from_tokens,
)
from .tensor import (
    Parameter,
    Tensor,
    global_average_pool,
    gradient_check,
    gradient_check_report,
    matmul,
    relu,
    set_precision,
    softmax_lastdim,
    topk_indices,
)
from .train import (
    AdamState,
    MosNormalizer,
    TrainConfig,
    TrainResult,
    adam_step,
    evaluate,
    evaluate_model,
    lr_at,
    oracle_predictor,
    run_gradcheck_suite,
    train,
)

__version__ = "0.1.0"
