"""Class-agnostic, anchor-free bounding-box regression at desk scale."""

from .boxes import (
    Box,
    Offsets,
    apply_offsets,
    center_from_corner,
    corner_from_center,
    encode_offsets,
    iou,
    match_nearest_gt,
)
from .errors import DataFormatError
from .features import FEATURE_STRIDE, FeatureMap, roi_align
from .losses import LossConfig, batch_iou_loss, iou_loss, iou_loss_grad, smooth_l1_grad, smooth_l1_loss
from .model import (
    EpochStats,
    RegressorModel,
    TrainConfig,
    TrainingDiverged,
    forward,
    init_model,
    load_model,
    refine,
    save_model,
    train,
)
from .metrics import EvalRecord, corloc, make_record, mean_iou_trajectory, recall_at, recall_curve
from .proposals import (
    Proposal,
    SeedGridConfig,
    decay_nms,
    generate_proposals,
    load_proposals,
    save_proposals,
    score_proposals,
    seed_grid,
)
from .sampling import SampleBudgetWarning, SamplerConfig, generate_training_boxes, sample_offsets
from .scenes import Scene, SynthConfig, filter_categories, load_annotations, load_scenes, save_scenes, synth_scenes

__version__ = "0.1.0"
