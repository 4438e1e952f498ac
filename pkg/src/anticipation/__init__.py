"""Surgical event anticipation from per-frame box detections."""

from .config import RunConfig
from .errors import (AnticipationError, ConfigError, DimensionError, DomainError, IngestionError,
                     LabelError, NonFiniteError, TrainingError)
from .graphs import CandidateGraphSet, enumerate_candidates, gumbel_sinkhorn
from .network import AnticipationModel, ModelDims
from .objective import HorizonSpec, clip_output, compute_metrics, compute_rsd_metrics, multi_horizon_loss
from .streaming import StreamingPredictor
from .synth import default_template, generate, validate_dataset

__version__ = "0.1.0"
