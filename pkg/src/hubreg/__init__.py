"""Groupwise registration of 3D volumes from keypoint matches, without a
reference image."""

from .evaluation import LandmarkSet, evaluate_landmarks
from .keypoints import DetectorParams, KeypointSet, extract
from .matching import MatchCriteria, MatchGraph, build_graph
from .optimizer import OptimizerConfig, register
from .robust import MixtureParams, em_fit
from .synthetic import SyntheticSpec, generate_synthetic
from .transforms import HalfTransform, LinearTransform, SplineGrid
from .volume_io import Volume, load_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "DetectorParams", "HalfTransform", "KeypointSet", "LandmarkSet", "LinearTransform",
    "MatchCriteria", "MatchGraph", "MixtureParams", "OptimizerConfig", "SplineGrid",
    "SyntheticSpec", "Volume", "build_graph", "em_fit", "evaluate_landmarks", "extract",
    "generate_synthetic", "load_volume", "register", "write_volume",
]
