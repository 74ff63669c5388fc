"""Pair-specific text proxies for embedding-based text-video retrieval."""

from .errors import (
    BadMagic,
    BatchTooSmall,
    DegenerateDirector,
    EmptyInput,
    InvalidConfig,
    MissingGroundTruth,
    NonFiniteData,
    NonPositiveTemperature,
    NonSquareBatch,
    ShapeMismatch,
    TensorFormatError,
    TextProxyError,
    TruncatedPayload,
    UnsupportedVersion,
    ZeroVector,
)
from .generator import (
    GeneratorParams,
    ProjectionSet,
    ProxyGrid,
    assemble_proxy,
    compute_director,
    init_params,
    leader_path,
    leader_step,
    load_params,
    make_proxy,
    proxy_grid,
    save_params,
    scalar_dash,
    vector_dash,
)
from .objectives import (
    LossBreakdown,
    ScoreGrids,
    build_grids,
    infonce_bidirectional,
    loss_backward,
    loss_total,
    loss_value,
)
from .retrieval import (
    IdentityCheckReport,
    RetrievalReport,
    ScoreMatrix,
    combined_query,
    combined_scores,
    evaluate,
    export_report,
    factored_scores,
    identity_check,
    text_only_scores,
)
from .store import (
    EmbeddingDataset,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    make_batches,
    read_tensor,
    save_dataset,
    write_tensor,
)
from .trainer import (
    AdamWConfig,
    GradCheckReport,
    OptimizerState,
    TrainConfig,
    TrainResult,
    adamw_step,
    grad_check,
    train,
)

__version__ = "0.1.0"
