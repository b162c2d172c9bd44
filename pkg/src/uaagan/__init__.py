"""Unsupervised adversarial perturbations against deep-feature image retrieval."""
from .discriminator import Discriminator, DiscriminatorSpec, build_discriminator
from .errors import (CheckpointError, ConfigurationError, ContaminationError, DomainError,
                     IncompatibleCheckpointError, ManifestError, ShapeError, TrainingError, UAAError)
from .generator import Generator, GeneratorSpec, build_generator, clip_perturbation, compose_adversarial, perturb
from .losses import LossRecord, LossWeights
from .retrieval import EvalReport, GalleryIndex, QuerySet, TransferMatrix, build_index, evaluate, rank
from .targets import AggregationSpec, TargetModel, ToyBackboneSpec, aggregate
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
