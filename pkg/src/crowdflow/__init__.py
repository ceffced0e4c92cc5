"""Crowd trajectory simulation with a conditional diffusion model over accelerations.

Each pedestrian's next acceleration is sampled from a denoiser conditioned on
environment, social-interaction and history features; a classical
destination force is added and a kinematic integrator advances the state.
"""

from .config import RunConfig, load_config
from .metrics import MetricReport, evaluate
from .model import CrowdModel
from .scenarios import ScenarioSpec, gen_scenario
from .scene import Episode, SceneEnvironment, load_scene, load_trajectories
from .training import simulate, train

__all__ = [
    "CrowdModel",
    "Episode",
    "MetricReport",
    "RunConfig",
    "ScenarioSpec",
    "SceneEnvironment",
    "evaluate",
    "gen_scenario",
    "load_config",
    "load_scene",
    "load_trajectories",
    "simulate",
    "train",
]
