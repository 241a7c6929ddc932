"""Retrieval-enhanced real estate appraisal.

Learns which past transactions to use as comparables (geographic + embedding
retrieval) jointly with a price model that attends over them.
"""

from .data import Dataset, PropertyRecord, SplitSpec, TargetTransform, generate_synthetic, load_csv
from .geo import GeoIndex, RetrievalFilter, candidate_pool, haversine, knn_geo
from .model import ComparableSet, ModelParams, model_forward, param_count
from .trainer import TrainConfig, evaluate, prepare, train

__version__ = "0.1.0"
