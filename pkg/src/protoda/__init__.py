"""Desk-scale lab for prototype-based universal domain-adaptive segmentation.

Everything runs on a procedural synthetic benchmark with configurable
common/private class sets: a fixed ETF prototype bank, three prototype
losses with a pixel-wise weight factor, unknown-aware pseudo-labeling with
an EMA teacher, rarity-weighted source-image matching, and H-score
evaluation.
"""

from ._malloc import tune_malloc

tune_malloc()

from .bench import (
    DomainShift,
    ScenarioConfig,
    SegDataset,
    SegSample,
    class_mix,
    generate_domain_pair,
    scenario_presets,
)
from .etf import (
    SOURCE,
    TARGET,
    DimensionError,
    PrototypeBank,
    build_etf,
    cosine_pair,
    prototype_of,
)
from .matching import (
    ClassDistribution,
    SourceIndex,
    class_frequency,
    index_from_labels,
    match_score,
    overlap_classes,
    rarity_weights,
    select_source,
    target_rcs_sample,
)
from .metrics import MetricsReport, evaluate, format_report_table, h_score
from .net import PixelNet, load_checkpoint, save_checkpoint, sgd_step
from .proto_losses import (
    WEIGHT_VARIANTS,
    ProtoLossConfig,
    ppc_loss,
    ppd_loss,
    proto_ce_loss,
    proto_loss,
    proto_loss_batch,
    weight_map,
    weight_scale,
)
from .pseudo import (
    PseudoLabelMap,
    assign_pseudo_labels,
    ema_update,
    image_reliability,
    save_pseudo_label_map,
)
from .seg_losses import LossBreakdown, one_hot, source_seg_loss, target_seg_loss
from .trainer import (
    AblationRow,
    ExperimentConfig,
    Hyperparams,
    StepLog,
    Toggles,
    TrainingDiverged,
    TrainResult,
    ablate,
    format_ablation_table,
    standard_grid,
    train,
    weight_variant_grid,
)

__version__ = "0.1.0"
