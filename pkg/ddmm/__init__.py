"""
ddmm: a small, deterministic multi-branch denoising diffusion model that
samples radiograph-like images together with their lung masks.
"""
from __future__ import annotations

__version__ = "0.1.0"

import logging

from .errors import CheckpointError, ConfigError, DdmmError, NumericFailure, ValidationError
from .schedule import NoiseSchedule, ScheduleConfig, make_cosine_schedule, make_linear_schedule
from .kernel import DiffusionKernel
from .denoiser import Arch, DenoiserNet, UNet, parameter_count
from .trainer import DdmmModel, OptimState, TrainConfig, TrainingLog, fit, supervised_step, train_batch, unsupervised_step
from .phantom import PairDataset, PhantomConfig, generate_phantom, ingest_folder, make_splits, oracle_segment
from .sampler import SamplePair, SamplerConfig, consistency_scores, sample_batch, sample_pair
from .metrics import MetricsConfig, QualityReport, dice, fid, kid, quality_report, rand_score, scc, ssim, uqi
from .segmenter import SegConfig, SegEvaluation, evaluate_segmenter, train_segmenter
from .config import RunConfig

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "Arch", "CheckpointError", "ConfigError", "DdmmError", "DdmmModel", "DenoiserNet", "DiffusionKernel",
    "MetricsConfig", "NoiseSchedule", "NumericFailure", "OptimState", "PairDataset", "PhantomConfig",
    "QualityReport", "RunConfig", "SamplePair", "SamplerConfig", "ScheduleConfig", "SegConfig",
    "SegEvaluation", "TrainConfig", "TrainingLog", "UNet", "ValidationError", "consistency_scores", "dice",
    "evaluate_segmenter", "fid", "fit", "generate_phantom", "ingest_folder", "kid", "make_cosine_schedule",
    "make_linear_schedule", "make_splits", "oracle_segment", "parameter_count", "quality_report",
    "rand_score", "sample_batch", "sample_pair", "scc", "ssim", "supervised_step", "train_batch",
    "train_segmenter", "unsupervised_step", "uqi",
]
