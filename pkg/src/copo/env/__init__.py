from copo.env.scene import Destination, Lane, Obstacle, SceneError, SceneSpec, SpawnPoint, dump_scene, load_scene
from copo.env.scenes import BUILTIN_SCENES, builtin_scene
from copo.env.simulator import (
    CRASH,
    OUT_OF_ROAD,
    SUCCESS,
    TRUNCATED,
    EnvConfig,
    KinematicAction,
    SimulationError,
    Simulator,
    StepOutcome,
    VehicleState,
    compute_reward,
    lidar_scan,
    neighborhood_query,
    reset,
    step,
)
