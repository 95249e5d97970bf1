"""Cluster-aware federated LoRA aggregation with split diffusion inference.

Desk-scale reference implementation. The pieces:

- lowrank: adapter algebra (align, average, stack, singular-value energy)
- diffusion: toy conditional denoiser, training steps, ancestral sampling
- federation: domain embeddings, clustering, aggregation rules, baselines
- protocol: message schema, training rounds, hybrid split inference
- metrics: 2-d Gaussian fits, Frechet distance, purity, energy reports
- config / scenario / cli: reproducible end-to-end runs
"""

from .errors import (
    ConfigError,
    DimensionError,
    FedstackError,
    NumericError,
    ProtocolError,
    RankOverflowError,
)
from .lowrank import (
    AdapterSet,
    EnergyProfile,
    LoraAdapter,
    adapter_from_delta,
    align_rank,
    apply_delta,
    average_adapters,
    energy_trace,
    median_rank,
    snt_distance,
    snt_profile,
    stack_adapters,
    svd,
)
from .diffusion import (
    STYLES,
    Denoiser,
    DenoiserLayer,
    DiffusionSchedule,
    SampleBatch,
    StyleToken,
    ddpm_sample,
    denoising_loss,
    denoising_loss_and_grads,
    forward_diffuse,
    learn_style_token,
    make_style_dataset,
    predict_noise,
    pretrain_backbone,
    time_embedding,
    training_step,
)
from .federation import (
    AggregationCoefficients,
    ClientProfile,
    ClusterAssignment,
    ClusterCoefficient,
    DomainEmbedding,
    cluster_clients,
    compute_coefficients,
    ded,
    encode_domain,
    fedavg_aggregate,
    geomed_aggregate,
    inter_cluster_aggregate,
    intra_cluster_aggregate,
    local_finetune,
)
from .metrics import (
    GaussianFit,
    LayerEnergyRow,
    cluster_purity,
    energy_report,
    fit_gaussian,
    frechet_2d,
    frechet_points,
    neutrality_score,
)
from .protocol import (
    ALL_CLIENTS,
    IES,
    TES,
    AdapterUpload,
    ClusterModelDown,
    GlobalLoraToIES,
    HybridConfig,
    InferRequest,
    LatentHandoff,
    MessageLog,
    RoundConfig,
    RoundEnd,
    RoundReport,
    RoundStart,
    World,
    hybrid_infer,
    isolation_audit,
    message_size,
    parse_message,
    run_training_round,
    serialize_message,
    server_steps,
)
from .rng import stream, stream_from_id, stream_id
from .wire import parse_denoiser, serialize_denoiser
from .config import (
    HybridGrid,
    PretrainConfig,
    ScenarioConfig,
    ScheduleConfig,
    StyleBlock,
    load_config,
)
from .scenario import (
    RunArtifacts,
    read_adapters,
    render_report,
    run_scenario,
    sweep,
)

__version__ = "0.1.0"
