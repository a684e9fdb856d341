"""Egocentric activity indexing from sparse optical flow with a compact 3D CNN."""

from .ego_net import (
    STANDARD,
    TINY,
    Architecture,
    NetworkModel,
    TrainConfig,
    count_parameters,
    forward,
    init_model,
    load_model,
    save_model,
    train,
)
from .errors import EgoFlowError
from .flow_grid import FlowField, Frame, GridGeometry, LkConfig, extract_flow, lk_cell_flow
from .temporal_segmenter import ScoreSeries, aggregate_labels, labels_to_timeline
from .volume_builder import FlowVolume, NormStats, VolumeDataset, build_volumes, fit_norm_stats

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "EgoFlowError",
    "FlowField",
    "FlowVolume",
    "Frame",
    "GridGeometry",
    "LkConfig",
    "NetworkModel",
    "NormStats",
    "STANDARD",
    "ScoreSeries",
    "TINY",
    "TrainConfig",
    "VolumeDataset",
    "aggregate_labels",
    "build_volumes",
    "count_parameters",
    "extract_flow",
    "fit_norm_stats",
    "forward",
    "init_model",
    "labels_to_timeline",
    "lk_cell_flow",
    "load_model",
    "save_model",
    "train",
]
