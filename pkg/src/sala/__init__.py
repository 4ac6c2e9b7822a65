"""Soft-assignment local aggregation (SALA) for point cloud segmentation.

Subpackages of note: :mod:`sala.autodiff` (tape-based reverse mode),
:mod:`sala.geometry` (subsampling, neighbor search, pyramids),
:mod:`sala.aggregation` (the operators), :mod:`sala.network`,
:mod:`sala.training`, :mod:`sala.cost` and the ``sala`` command line.
"""

from .aggregation import Aggregator, AggregatorConfig, Family
from .estimator import SALASegmenter
from .geometry import NeighborIndex, PointCloud, ball_query, build_pyramid, grid_subsample, nn_interpolate_map
from .network import NetworkSpec, SegmentationNet
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .training import TrainConfig, miou, train, vote_inference

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "AggregatorConfig", "Family", "SALASegmenter", "NeighborIndex", "PointCloud", "ball_query",
    "build_pyramid", "grid_subsample", "nn_interpolate_map", "NetworkSpec", "SegmentationNet", "TrainConfig",
    "miou", "train", "vote_inference", "SyntheticSceneSpec", "generate_synthetic",
]
