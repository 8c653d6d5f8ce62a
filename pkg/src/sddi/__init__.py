"""Siamese metric learning for drug-drug interaction prediction from
molecular structure images.

The public surface groups into:

- tensor ops with reverse-mode autodiff (:mod:`sddi.tensor`)
- the convolutional tower, spatial transformer, and autoencoder
  (:mod:`sddi.network`)
- the contrastive objective and embedding distances (:mod:`sddi.objective`)
- optimizers (:mod:`sddi.optim`)
- image ingestion, pair building, and dataset splits (:mod:`sddi.data`)
- the training loop (:mod:`sddi.training`)
- evaluation, threshold selection, and similarity baselines
  (:mod:`sddi.eval`)
- binary model checkpoints (:mod:`sddi.checkpoint`)
- scikit-learn style estimators (:mod:`sddi.estimators`)
- the command line entry point (:mod:`sddi.cli`)
"""

from sddi.checkpoint import (
    CheckpointData,
    CheckpointError,
    load_checkpoint,
    pack_model,
    pack_optimizer,
    save_checkpoint,
    unpack_model,
    unpack_optimizer,
)
from sddi.data import (
    DrugRecord,
    GrayImage,
    IngestionError,
    PairExample,
    SplitDataset,
    build_pairs,
    fetch_pubchem_png,
    load_image,
    read_interactions,
    read_manifest,
    rotate90,
    save_image,
    split,
    write_interactions,
    write_manifest,
)
from sddi.estimators import SiameseInteractionClassifier, SsimInteractionClassifier
from sddi.eval import (
    EvalReport,
    PRCurve,
    SsimBreakdown,
    SsimConfig,
    ae_similarity,
    classify_and_report,
    pr_curve,
    ssim,
    ssim_classify,
)
from sddi.network import (
    AutoencoderSpec,
    AutoencoderState,
    ConfigError,
    ModelState,
    StnSpec,
    StnState,
    TowerSpec,
    autoencoder_forward,
    init_autoencoder,
    init_model,
    siamese_forward,
    stn_forward,
    tower_forward,
)
from sddi.objective import ContrastiveConfig, DistanceKind, contrastive_loss, distance
from sddi.optim import OptimizerKind, OptimizerState, step
from sddi.tensor import ShapeError, Tensor, grad_check
from sddi.training import (
    PairBatch,
    TrainConfig,
    TrainingError,
    TrainResult,
    embed_images,
    pair_distances,
    train,
    train_autoencoder,
)

__version__ = "0.1.0"

__all__ = [
    "AutoencoderSpec",
    "AutoencoderState",
    "CheckpointData",
    "CheckpointError",
    "ConfigError",
    "ContrastiveConfig",
    "DistanceKind",
    "DrugRecord",
    "EvalReport",
    "GrayImage",
    "IngestionError",
    "ModelState",
    "OptimizerKind",
    "OptimizerState",
    "PRCurve",
    "PairBatch",
    "PairExample",
    "ShapeError",
    "SiameseInteractionClassifier",
    "SplitDataset",
    "SsimBreakdown",
    "SsimConfig",
    "SsimInteractionClassifier",
    "StnSpec",
    "StnState",
    "Tensor",
    "TowerSpec",
    "TrainConfig",
    "TrainResult",
    "TrainingError",
    "ae_similarity",
    "autoencoder_forward",
    "build_pairs",
    "classify_and_report",
    "contrastive_loss",
    "distance",
    "embed_images",
    "fetch_pubchem_png",
    "grad_check",
    "init_autoencoder",
    "init_model",
    "load_checkpoint",
    "load_image",
    "pack_model",
    "pack_optimizer",
    "pair_distances",
    "pr_curve",
    "read_interactions",
    "read_manifest",
    "rotate90",
    "save_checkpoint",
    "save_image",
    "siamese_forward",
    "split",
    "ssim",
    "ssim_classify",
    "step",
    "stn_forward",
    "tower_forward",
    "train",
    "train_autoencoder",
    "unpack_model",
    "unpack_optimizer",
    "write_interactions",
    "write_manifest",
]
