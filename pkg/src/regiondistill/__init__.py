"""Region-affinity distillation: masked moment statistics, affinity graphs,
distillation losses, and a deterministic toy training harness."""

from .aoi import AoiMasks, LabelMaps, downsample_aoi, generate_aoi, one_hot
from .distill import (
    AffinityGraph,
    LossReport,
    MomentSet,
    affinity_loss,
    attention_loss,
    attention_map,
    build_affinity_graph,
    export_graph,
    import_graph,
    kd_probability_loss,
    moment_pool,
    moment_pool_backward,
    total_loss,
)
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .model import (
    LossConfig,
    Network,
    NetworkConfig,
    TapPairing,
    build_network,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_step,
)
from .ops import (
    conv2d,
    conv2d_backward,
    fd_check,
    relu,
    relu_backward,
    resize_nearest,
    weighted_softmax_ce,
)

__version__ = "0.1.0"
