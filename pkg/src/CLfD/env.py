"""Pick-and-place MDP whose observations and rewards come from the frozen encoder.

One environment instance covers one stage (pick or place); each stage is trained
as its own task against the embedding of that stage's last demonstration frame.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from CLfD.exceptions import ConfigError, DatasetError, EpisodeError, ShapeError
from CLfD.models import EMBEDDING_DIM, CLfDModel, embed_frames
from CLfD.scene import (
    EVALUATION_CAMERA,
    HOVER_Z,
    NUM_JOINTS,
    PLACEMENT_RANGE,
    STAGES,
    Camera,
    CameraRig,
    SceneState,
    render_view,
    sample_placement,
    scripted_trajectory,
    step_scene,
)
from CLfD.utils import rng_for

logger = logging.getLogger(__name__)

STATE_DIM = EMBEDDING_DIM + 2 * NUM_JOINTS + 1
ACTION_DIM = NUM_JOINTS + 1
REWARD_NORMS = ("l2", "l1")
GOAL_MODES = ("demo", "scene")


@dataclass
class EnvConfig:
    stage: str = "pick"
    max_steps: int = 100
    v_max: float = 0.05
    camera: int = EVALUATION_CAMERA
    reward_norm: str = "l2"
    success_percentile: float = 5.0
    goal_demo: Optional[int] = None
    goal_mode: str = "demo"
    goal_frames: int = 40
    placement_range: float = PLACEMENT_RANGE
    image_size: int = 64

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not self.v_max > 0:
            raise ConfigError(f"v_max must be > 0, got {self.v_max}")
        if self.reward_norm not in REWARD_NORMS:
            raise ConfigError(f"reward_norm must be one of {REWARD_NORMS}, got {self.reward_norm!r}")
        if self.goal_mode not in GOAL_MODES:
            raise ConfigError(f"goal_mode must be one of {GOAL_MODES}, got {self.goal_mode!r}")
        if not 0 <= self.success_percentile <= 100:
            raise ConfigError(f"success_percentile must be in [0, 100], got {self.success_percentile}")
        if self.goal_frames < 2:
            raise ConfigError("goal_frames must be >= 2")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EnvConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class MDPState:
    """Encoder embedding of the current frame, joint angles and velocities, gripper flag (41 values)."""

    embedding: np.ndarray
    joints: np.ndarray
    velocities: np.ndarray
    gripper_closed: bool

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.embedding, self.joints, self.velocities, [1.0 if self.gripper_closed else 0.0]]
        ).astype(np.float32)


@dataclass
class Action:
    velocity: np.ndarray
    gripper: float

    @classmethod
    def clamped(cls, values: Sequence[float], v_max: float) -> "Action":
        """Joint velocities clipped to [-v_max, v_max], gripper command to [-1, 1]."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (ACTION_DIM,):
            raise ShapeError(f"action: expected {ACTION_DIM} values, got shape {list(values.shape)}")
        return cls(np.clip(values[:NUM_JOINTS], -v_max, v_max), float(np.clip(values[NUM_JOINTS], -1.0, 1.0)))

    @classmethod
    def from_normalized(cls, values: Sequence[float], v_max: float) -> "Action":
        """Map a policy output in [-1, 1]^5 to joint velocities scaled by v_max."""
        values = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
        return cls.clamped(np.concatenate([values[:NUM_JOINTS] * v_max, values[NUM_JOINTS:]]), v_max)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.velocity, [self.gripper]])


def compute_reward(current: np.ndarray, goal: np.ndarray, norm: str = "l2") -> float:
    """R = -||f(current) - f(goal)||; zero only when the embeddings coincide."""
    current, goal = np.asarray(current, dtype=np.float64), np.asarray(goal, dtype=np.float64)
    if current.shape != goal.shape:
        raise ShapeError(f"compute_reward: shapes differ {list(current.shape)} vs {list(goal.shape)}")
    if norm == "l2":
        return -float(np.linalg.norm(current - goal))
    if norm == "l1":
        return -float(np.abs(current - goal).sum())
    raise ConfigError(f"reward_norm must be one of {REWARD_NORMS}, got {norm!r}")


def stage_predicate(scene: SceneState, stage: str) -> bool:
    """Geometric success: pick holds the box, place has it released on the goal."""
    return scene.holding if stage == "pick" else scene.box_on_goal()


def last_stage_frame(stages: Sequence[str], stage: str) -> int:
    indices = [t for t, s in enumerate(stages) if s == stage]
    if not indices:
        raise DatasetError(f"stage {stage!r} does not occur in the demonstration")
    return indices[-1]


def select_goal(
    encoder: CLfDModel, dataset, demo: int, stage: str, camera: int = EVALUATION_CAMERA
) -> np.ndarray:
    """Embedding of the last frame of `stage` in a held-out test demonstration."""
    if demo not in dataset.split("test"):
        raise DatasetError(f"goal demonstration {demo} is not in the test split")
    t = last_stage_frame(list(dataset.stages(demo)), stage)
    return embed_frames(encoder, dataset.frame(demo, camera, t)[None])[0]


def success_threshold(
    encoder: CLfDModel, dataset, demos: Sequence[int], camera: int = EVALUATION_CAMERA, percentile: float = 5.0
) -> float:
    """Percentile of consecutive-frame embedding distances pooled over the given demonstrations."""
    if not demos:
        raise DatasetError("success threshold needs at least one demonstration")
    steps = []
    for demo in demos:
        embeddings = embed_frames(encoder, dataset.video(demo, camera))
        steps.append(np.linalg.norm(np.diff(embeddings, axis=0), axis=1))
    return float(np.percentile(np.concatenate(steps), percentile))


def quantize(frame: np.ndarray) -> np.ndarray:
    """Round a rendered frame to the 8-bit levels stored in datasets."""
    return (np.clip(np.rint(frame * 255.0), 0, 255) / 255.0).astype(np.float32)


def place_start(scene: SceneState) -> SceneState:
    """Box grasped and lifted above its start position: where the pick stage ends."""
    scene.gripper = np.array([scene.box[0], scene.box[1], HOVER_Z])
    scene.box = scene.gripper.copy()
    scene.gripper_closed = True
    scene.holding = True
    scene.stage = "place"
    return scene


class PickPlaceEnv:
    """Single-stage environment; not thread safe, use one instance per worker."""

    def __init__(
        self,
        encoder: CLfDModel,
        config: EnvConfig,
        goal_embedding: Optional[np.ndarray],
        threshold: float,
        rig: Optional[CameraRig] = None,
    ):
        config.validate()
        self.encoder = encoder
        self.config = config
        self.rig = rig or CameraRig()
        self.threshold = float(threshold)
        self._demo_goal = None if goal_embedding is None else np.asarray(goal_embedding, dtype=np.float64)
        if config.goal_mode == "demo" and self._demo_goal is None:
            raise ConfigError("goal_mode 'demo' needs a goal embedding")
        self.scene: Optional[SceneState] = None
        self.goal_embedding: Optional[np.ndarray] = self._demo_goal
        self.state: Optional[MDPState] = None
        self.steps = 0
        self.done = True
        self.reached = False
        self.info: Dict[str, Any] = {}

    def clone(self) -> "PickPlaceEnv":
        """Fresh environment with the same goal and threshold, for another worker."""
        return PickPlaceEnv(self.encoder, self.config, self._demo_goal, self.threshold, self.rig)

    @property
    def camera(self) -> Camera:
        return self.rig[self.config.camera]

    def observe(self, velocities: np.ndarray) -> MDPState:
        frame = quantize(render_view(self.scene, self.camera, self.config.image_size))
        return MDPState(
            embedding=embed_frames(self.encoder, frame[None])[0],
            joints=self.scene.joints(),
            velocities=np.asarray(velocities, dtype=np.float64),
            gripper_closed=self.scene.gripper_closed,
        )

    def scene_goal(self, start: SceneState) -> np.ndarray:
        states = scripted_trajectory(start, self.config.goal_frames)
        t = last_stage_frame([s.stage for s in states], self.config.stage)
        frame = quantize(render_view(states[t], self.camera, self.config.image_size))
        return embed_frames(self.encoder, frame[None])[0]

    def reset(self, seed: int, episode: int = 0, stream: str = "env") -> MDPState:
        """Re-sample box and goal, move the robot home (or to the grasp for the place stage)."""
        rng = rng_for(seed, stream, episode)
        start = sample_placement(rng, placement_range=self.config.placement_range)
        if self.config.goal_mode == "scene":
            self.goal_embedding = self.scene_goal(start)
        self.scene = place_start(start.copy()) if self.config.stage == "place" else start
        self.steps = 0
        self.done = False
        self.reached = stage_predicate(self.scene, self.config.stage)
        self.state = self.observe(np.zeros(NUM_JOINTS))
        self.info = {"steps": 0, "success": self.reached}
        return self.state

    def reward(self, state: MDPState) -> float:
        return compute_reward(state.embedding, self.goal_embedding, self.config.reward_norm)

    def step(self, action: Union[Action, Sequence[float]]) -> Tuple[MDPState, float, bool]:
        if self.scene is None or self.done:
            raise EpisodeError(f"step called on a finished episode (steps={self.steps}); call reset first")
        if not isinstance(action, Action):
            action = Action.clamped(action, self.config.v_max)
        else:
            action = Action.clamped(action.vector(), self.config.v_max)

        before = self.scene.joints()
        step_scene(self.scene, action.velocity[:3], action.gripper, float(action.velocity[3]))
        velocities = self.scene.joints() - before
        self.steps += 1

        self.state = self.observe(velocities)
        reward = self.reward(self.state)
        geometric = stage_predicate(self.scene, self.config.stage)
        self.reached = self.reached or geometric
        embedded = float(np.linalg.norm(self.state.embedding - self.goal_embedding)) <= self.threshold
        success = bool(geometric and embedded)
        self.done = success or self.steps >= self.config.max_steps
        self.info = {"steps": self.steps, "success": success, "geometric": geometric, "reached": self.reached}
        return self.state, reward, self.done


def make_env(encoder: CLfDModel, dataset, config: EnvConfig) -> PickPlaceEnv:
    """Environment whose goal and success threshold come from a held-out demonstration."""
    config.validate()
    test_demos = dataset.split("test")
    if not test_demos:
        raise DatasetError("no test demonstrations to take the goal from")
    demo = test_demos[0] if config.goal_demo is None else config.goal_demo
    goal = select_goal(encoder, dataset, demo, config.stage, config.camera)
    threshold = success_threshold(encoder, dataset, test_demos, config.camera, config.success_percentile)
    logger.info(f"{config.stage} goal from test demo {demo}, success threshold {threshold:.4f}")
    return PickPlaceEnv(encoder, config, goal, threshold, rig=dataset.manifest.camera_rig)
