"""Table-top pick-and-place scene: state, cameras, renderer and scripted demonstrator.

World frame: x, y on the table in [-0.5, 0.5] m, z up from the table surface.
The robot is a 4-joint abstraction: joints 0-2 are the gripper position
(identity forward map) and joint 3 is the wrist yaw, which the task ignores.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from CLfD.exceptions import DatasetError

logger = logging.getLogger(__name__)

WORKSPACE_HALF = 0.5
WORKSPACE_TOP = 0.5
BOX_HALF = 0.04
BOX_REST_Z = BOX_HALF
GOAL_HALF = 0.06
GRIPPER_RADIUS = 0.035
GRASP_RADIUS = 0.03
PLACE_TOLERANCE = 0.02
HOVER_Z = 0.15
HOME = (0.0, 0.0, 0.3)

PLACEMENT_RANGE = 0.35
REACH = 0.45
MIN_SEPARATION = 0.15
MAX_PLACEMENT_ATTEMPTS = 100

NUM_JOINTS = 4
STAGES = ("pick", "place")

BACKGROUND = (1.0, 1.0, 1.0)
GOAL_COLOR = (0.1, 0.7, 0.2)
BOX_COLOR = (0.85, 0.1, 0.1)
GRIPPER_OPEN_COLOR = (0.6, 0.6, 0.6)
GRIPPER_CLOSED_COLOR = (0.2, 0.2, 0.2)


@dataclass
class SceneState:
    gripper: np.ndarray
    box: np.ndarray
    goal: np.ndarray
    gripper_closed: bool = False
    holding: bool = False
    stage: str = "pick"
    wrist: float = 0.0

    def copy(self) -> "SceneState":
        return replace(self, gripper=self.gripper.copy(), box=self.box.copy(), goal=self.goal.copy())

    def joints(self) -> np.ndarray:
        return np.array([*self.gripper, self.wrist], dtype=np.float64)

    def box_on_goal(self) -> bool:
        return (not self.holding) and planar_distance(self.box, self.goal) <= PLACE_TOLERANCE


def planar_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


@dataclass(frozen=True)
class Camera:
    name: str
    azimuth: float
    elevation: float
    scale: float = 1.0

    def project(self, point: Sequence[float], size: int) -> Tuple[float, float]:
        """World point -> (row, col) pixel coordinates of an orthographic view."""
        x, y, z = point
        ca, sa = math.cos(self.azimuth), math.sin(self.azimuth)
        xr = ca * x + sa * y
        yr = -sa * x + ca * y
        u = xr
        v = yr * math.cos(self.elevation) + z * math.sin(self.elevation)
        px_per_m = self.pixels_per_meter(size)
        return size / 2 - v * px_per_m, size / 2 + u * px_per_m

    def pixels_per_meter(self, size: int) -> float:
        return self.scale * size / (2 * WORKSPACE_HALF)


IDENTITY_CAMERA = Camera("identity", 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class CameraRig:
    cameras: Tuple[Camera, ...] = field(
        default_factory=lambda: (
            Camera("top", 0.0, 0.0, 1.0),
            Camera("front", 0.0, 1.0, 0.9),
            Camera("right", math.pi / 2, 0.9, 0.9),
            Camera("behind", math.pi, 0.8, 0.85),
            Camera("left", -2.2, 0.6, 1.0),
        )
    )

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> Camera:
        return self.cameras[index]

    def to_dict(self) -> List[dict]:
        return [
            {"name": c.name, "azimuth": c.azimuth, "elevation": c.elevation, "scale": c.scale}
            for c in self.cameras
        ]

    @classmethod
    def from_dict(cls, cameras: List[dict]) -> "CameraRig":
        return cls(tuple(Camera(c["name"], float(c["azimuth"]), float(c["elevation"]), float(c["scale"])) for c in cameras))


SEEN_VIEWS = (0, 1, 2)
UNSEEN_VIEWS = (3, 4)
ALL_VIEWS = (0, 1, 2, 3, 4)
EVALUATION_CAMERA = 1


def render_view(scene: SceneState, camera: Camera, size: int = 64) -> np.ndarray:
    """Orthographic RGB render in [0, 1], shape [size, size, 3].

    Painter's order is goal, box, gripper on a white background.
    """
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = BACKGROUND
    centers = np.arange(size) + 0.5
    rows, cols = np.meshgrid(centers, centers, indexing="ij")
    px_per_m = camera.pixels_per_meter(size)

    def square(center, half, color):
        r, c = camera.project(center, size)
        half_px = half * px_per_m
        mask = (np.abs(rows - r) <= half_px) & (np.abs(cols - c) <= half_px)
        image[mask] = color

    def disc(center, radius, color):
        r, c = camera.project(center, size)
        mask = (rows - r) ** 2 + (cols - c) ** 2 <= (radius * px_per_m) ** 2
        image[mask] = color

    square(scene.goal, GOAL_HALF, GOAL_COLOR)
    square(scene.box, BOX_HALF, BOX_COLOR)
    disc(scene.gripper, GRIPPER_RADIUS, GRIPPER_CLOSED_COLOR if scene.gripper_closed else GRIPPER_OPEN_COLOR)
    return image


def sample_placement(
    rng: np.random.Generator,
    placement_range: float = PLACEMENT_RANGE,
    reach: float = REACH,
    min_separation: float = MIN_SEPARATION,
) -> SceneState:
    """Randomized box and goal positions with the robot at its home pose."""
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        box_xy = rng.uniform(-placement_range, placement_range, size=2)
        goal_xy = rng.uniform(-placement_range, placement_range, size=2)
        reachable = np.hypot(*box_xy) <= reach and np.hypot(*goal_xy) <= reach
        if reachable and np.hypot(*(box_xy - goal_xy)) >= min_separation:
            return SceneState(
                gripper=np.array(HOME, dtype=np.float64),
                box=np.array([box_xy[0], box_xy[1], BOX_REST_Z]),
                goal=np.array([goal_xy[0], goal_xy[1], 0.0]),
            )
    raise DatasetError(f"placement: no reachable box/goal configuration after {MAX_PLACEMENT_ATTEMPTS} attempts")


def step_scene(scene: SceneState, velocity: np.ndarray, gripper_command: float, wrist_velocity: float = 0.0) -> None:
    """Kinematic update in place.

    The gripper integrates the velocity within the workspace. A positive
    command closes the gripper and grasps the box when it is within
    GRASP_RADIUS; a negative command opens it and drops a held box at the
    gripper's table projection; exactly zero keeps the gripper as it is.
    """
    low = np.array([-WORKSPACE_HALF, -WORKSPACE_HALF, BOX_REST_Z])
    high = np.array([WORKSPACE_HALF, WORKSPACE_HALF, WORKSPACE_TOP])
    scene.gripper = np.clip(scene.gripper + np.asarray(velocity, dtype=np.float64), low, high)
    scene.wrist = float(np.clip(scene.wrist + wrist_velocity, -math.pi, math.pi))

    if gripper_command > 0:
        scene.gripper_closed = True
        if not scene.holding and np.linalg.norm(scene.gripper - scene.box) <= GRASP_RADIUS:
            scene.holding = True
            scene.stage = "place"
    elif gripper_command < 0:
        scene.gripper_closed = False
        if scene.holding:
            scene.holding = False
            scene.box = np.array([scene.gripper[0], scene.gripper[1], BOX_REST_Z])

    if scene.holding:
        scene.box = scene.gripper.copy()


def demonstration_waypoints(scene: SceneState) -> Tuple[List[np.ndarray], int, int]:
    """Waypoints of the scripted demonstrator plus the indices where it grasps and releases."""
    box, goal = scene.box, scene.goal
    waypoints = [
        scene.gripper.copy(),
        np.array([box[0], box[1], HOVER_Z]),
        np.array([box[0], box[1], BOX_REST_Z]),
        np.array([box[0], box[1], HOVER_Z]),
        np.array([goal[0], goal[1], HOVER_Z]),
        np.array([goal[0], goal[1], BOX_REST_Z]),
        np.array([goal[0], goal[1], HOVER_Z]),
    ]
    return waypoints, 2, 5


def scripted_trajectory(scene: SceneState, frames: int) -> List[SceneState]:
    """Sample the scripted pick-and-place path at `frames` evenly spaced arc positions.

    The stage switches to place at the first frame at or past the grasp and
    the final frame has the box released on the goal.
    """
    waypoints, grasp_index, release_index = demonstration_waypoints(scene)
    lengths = [float(np.linalg.norm(b - a)) for a, b in zip(waypoints[:-1], waypoints[1:])]
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cumulative[-1]
    s_grasp, s_release = cumulative[grasp_index], cumulative[release_index]
    resting_box = np.array([scene.goal[0], scene.goal[1], BOX_REST_Z])

    states = []
    for t in range(frames):
        s = total * t / (frames - 1)
        segment = min(int(np.searchsorted(cumulative, s, side="right")) - 1, len(lengths) - 1)
        fraction = 0.0 if lengths[segment] == 0 else (s - cumulative[segment]) / lengths[segment]
        gripper = waypoints[segment] + fraction * (waypoints[segment + 1] - waypoints[segment])
        holding = s_grasp <= s < s_release
        if s < s_grasp:
            box = scene.box.copy()
        elif holding:
            box = gripper.copy()
        else:
            box = resting_box.copy()
        states.append(
            SceneState(
                gripper=gripper,
                box=box,
                goal=scene.goal.copy(),
                gripper_closed=holding,
                holding=holding,
                stage="place" if s >= s_grasp else "pick",
            )
        )
    return states


def scripted_action(scene: SceneState, stage: str, max_speed: float) -> Tuple[np.ndarray, float]:
    """Privileged closed-loop demonstrator: velocity toward the next waypoint and a gripper command."""
    box, goal, gripper = scene.box, scene.goal, scene.gripper

    def toward(target) -> np.ndarray:
        delta = np.asarray(target, dtype=np.float64) - gripper
        distance = float(np.linalg.norm(delta))
        if distance <= max_speed:
            return delta
        return delta * (max_speed / distance)

    if stage == "pick" or not scene.holding:
        if np.linalg.norm(gripper - box) <= GRASP_RADIUS:
            return np.zeros(3), 1.0
        if planar_distance(gripper, box) > PLACE_TOLERANCE / 2:
            return toward([box[0], box[1], max(gripper[2], HOVER_Z)]), -1.0
        return toward(box), -1.0

    if planar_distance(gripper, goal) <= PLACE_TOLERANCE / 2:
        if gripper[2] <= BOX_REST_Z + 1e-9:
            return np.zeros(3), -1.0
        return toward([goal[0], goal[1], BOX_REST_Z]), 1.0
    return toward([goal[0], goal[1], max(gripper[2], HOVER_Z)]), 1.0
