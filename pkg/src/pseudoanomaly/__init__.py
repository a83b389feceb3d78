"""Reconstruction-based anomaly detection with contextual adversarial training
and optional supervision from a small pool of labelled anomalies."""

from .datasets import BatchSpec, ImageCorpus, OneClassSplit, build_one_class_split, make_synthetic_corpus
from .losses import LossBreakdown, LossWeights
from .models import BNStrategy, GeneratorSpec, build_discriminator, build_generator
from .scoring import ScoreReport, aggregate_benchmark, anomaly_score, auroc, tukey_filter
from .trainer import CheckpointBundle, RunRecord, TrainConfig, train_multi_seed, train_run, train_step

__version__ = "0.1.0"
