"""Desk-scale video-denoiser demonstration of the alignment losses."""

from .scene import SceneObject, SyntheticScene, generate_scene, make_dataset
from .schedule import NoiseSchedule, cosine_schedule, forward_noise
from .trainer import NumericalFailure, ToyExperiment, TrainRun, sweep, train

__all__ = [
    "NoiseSchedule", "NumericalFailure", "SceneObject", "SyntheticScene", "ToyExperiment",
    "TrainRun", "cosine_schedule", "forward_noise", "generate_scene", "make_dataset",
    "sweep", "train",
]
