"""Slice-context enhancement for 2D segmentation networks on volumetric images."""

from .backbone import MiniUNet, build_backbone
from .ce_block import (
    ContextBlock,
    ContextOutputs,
    brute_force_matching,
    build_context_block,
    ce_forward,
    distance_from_squared,
    neighbor_indices,
    neighboring_matching,
    pairwise_embedding_distance,
)
from .config import (
    ModelConfig,
    PhantomSpec,
    RunConfig,
    TrainConfig,
    load_run_config,
)
from .data import (
    MaskVolume,
    SliceStack,
    Volume,
    augment,
    generate_dataset,
    generate_phantom_case,
    load_manifest,
    load_volume,
    preprocess_ct,
    preprocess_mr,
    save_volume,
)
from .metrics import (
    MetricsReport,
    assd,
    dice_loss,
    dsc_3d,
    extract_surface,
    hd95,
    paired_wilcoxon,
    precision,
    sensitivity,
    surface_distances,
)
from .training import build_model, count_parameters, evaluate, predict_volume, train

__version__ = "0.1.0"
