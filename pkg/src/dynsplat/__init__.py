"""Uncertainty-aware dynamic Gaussian splatting on synthetic scenes."""
from .scene import (Camera, DynamicGaussians, GaussianState, GaussianTrajectory, SceneConfig,
                    SyntheticScene, covariance_of, make_orbit_scene)
from .renderer import project_gaussian, render_frame, render_sequence
from .uncertainty import UncertaintyConfig, UncertaintyField, estimate_field
from .graph import GraphConfig, MotionGraph, build_graph
from .deform import DualQuaternion, RigidTransform, dqb
from .losses import LossWeights, LossReport
from .optim import (PretrainedSnapshot, ScheduleConfig, optimize, optimize_vanilla, pretrain_vanilla,
                    simulate_pretrained_drift)
from .evaluate import MetricReport, view_range_eval
from .config import PipelineConfig

__version__ = "0.1.0"

__all__ = [
    "Camera", "DynamicGaussians", "GaussianState", "GaussianTrajectory", "SceneConfig",
    "SyntheticScene", "covariance_of", "make_orbit_scene", "project_gaussian", "render_frame",
    "render_sequence", "UncertaintyConfig", "UncertaintyField", "estimate_field", "GraphConfig",
    "MotionGraph", "build_graph", "DualQuaternion", "RigidTransform", "dqb", "LossWeights",
    "LossReport", "PretrainedSnapshot", "ScheduleConfig", "optimize", "optimize_vanilla",
    "pretrain_vanilla", "simulate_pretrained_drift", "MetricReport", "view_range_eval",
    "PipelineConfig",
]
