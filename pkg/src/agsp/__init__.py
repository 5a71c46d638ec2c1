"""Augmentation invariance and adaptive sampling for semantic segmentation, at desk scale."""

from .augment import AugRecord, GeometricOp, PhotometricOp, apply_full, apply_geometric, apply_photometric, invert_geometric, sample_aug
from .datamodel import ClassTaxonomy, Dataset, DatasetIndex, Sample, compute_dist, concat_nir, generate_synthetic, load_dataset
from .losses import LossReport, ai_loss, seg_loss, total_loss
from .metrics import MetricsAccumulator
from .model import Arch, SegModel, expand_input_nir, load_model, save_model
from .sampler import ConfidenceTracker, SamplerState, adaptive_scores
from .trainer import TrainConfig, fit, train_step

__version__ = "0.1.0"
