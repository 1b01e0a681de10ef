"""Desk-scale simulator of federated contrastive representation learning
with similarity-matrix ensemble distillation, weight-averaging baselines,
and linear-probe evaluation.
"""

from .autodiff import Tensor
from .contrastive import (
    ContrastiveConfig,
    ProxConfig,
    SupervisedConfig,
    info_nce_loss,
    train_simclr_local,
    train_supervised_local,
)
from .data import (
    AugmentationConfig,
    Dataset,
    PartitionConfig,
    augment,
    dirichlet_partition,
    load_csv_dataset,
    split_dataset,
    synth_gaussian_blobs,
)
from .encoder import (
    EncoderConfig,
    EncoderParams,
    encode,
    init_encoder,
    serialize_params,
    deserialize_params,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    ParameterError,
    PartitionError,
    ShapeError,
    SimError,
)
from .esd import (
    EsdConfig,
    MomentumQueue,
    distill,
    ema_update,
    esd_loss,
    queue_push,
    student_probs,
    target_probs,
)
from .federation import (
    CommunicationLedger,
    FederationConfig,
    MetricsRecord,
    comm_cost_check,
    run_fedavg,
    run_fedprox,
    run_flesd,
    run_min_local,
    sample_clients,
    weight_average,
)
from .optim import Adam, AdamState, adam_step, finite_diff_gradient, init_adam_state
from .probe import ProbeConfig, linear_probe
from .similarity import (
    EnsembleTarget,
    RepresentationMatrix,
    SimilarityMatrix,
    ensemble,
    infer_representations,
    sharpen,
    similarity_matrix,
)

__version__ = "0.1.0"
