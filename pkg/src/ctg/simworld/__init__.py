"""Synthetic traffic scenes, closed-loop simulation and evaluation metrics."""
from .context import agent_context, build_contexts, crop_map, local_start, to_local
from .maps import ARCHETYPES, SceneMap, build_map
from .metrics import failed_agents, failure_rate, histogram_distance, histogram_w1, kinematic_properties, realism_deviation
from .scenes import (
    AgentSpec,
    LaneFollower,
    Route,
    Scene,
    SceneConfig,
    SceneGenerationError,
    generate_scene,
    generate_scenes,
    load_scenes,
    recipe,
    rle_decode,
    rle_encode,
    save_scenes,
    training_examples,
)
from .simulate import SimReport, SimulationError, evaluate_rollout, simulate, simulate_many

__all__ = [name for name in dir() if not name.startswith("_")]
