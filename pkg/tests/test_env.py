import math

import numpy as np
import pytest

from CLfD.env import (
    ACTION_DIM,
    STATE_DIM,
    Action,
    EnvConfig,
    PickPlaceEnv,
    compute_reward,
    make_env,
    select_goal,
    success_threshold,
)
from CLfD.exceptions import ConfigError, DatasetError, EpisodeError
from CLfD.models import EMBEDDING_DIM, build_model, embed_frames
from CLfD.scene import render_view


@pytest.fixture(scope="module")
def encoder():
    return build_model(seed=0)


@pytest.fixture
def env(encoder, tiny_dataset):
    return make_env(encoder, tiny_dataset, EnvConfig(max_steps=10))


def test_reward_examples():
    assert compute_reward(np.ones(4), np.ones(4)) == 0.0
    e = np.zeros(EMBEDDING_DIM)
    g = np.zeros(EMBEDDING_DIM)
    e[0], g[1] = 1.0, 1.0
    assert compute_reward(e, g) == pytest.approx(-math.sqrt(2))
    assert compute_reward(2 * e, 2 * g) == pytest.approx(2 * compute_reward(e, g))
    assert compute_reward(e, g, norm="l1") == pytest.approx(-2.0)


def test_action_clamping():
    action = Action.clamped([1.0, -1.0, 0.01, 0.0, 5.0], v_max=0.05)
    assert np.allclose(action.velocity, [0.05, -0.05, 0.01, 0.0])
    assert action.gripper == 1.0


def test_state_has_41_values(env):
    state = env.reset(seed=0)
    assert state.vector().shape == (STATE_DIM,) == (41,)
    assert not state.gripper_closed
    assert not env.scene.holding


def test_reset_is_seeded(env):
    a = env.reset(seed=3).vector()
    b = env.reset(seed=3).vector()
    c = env.reset(seed=4).vector()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_embedding_comes_from_current_render(env, encoder):
    state = env.reset(seed=1)
    frame = np.rint(render_view(env.scene, env.camera) * 255) / 255
    assert np.allclose(state.embedding, embed_frames(encoder, frame[None].astype(np.float32))[0], atol=1e-6)


def test_zero_action_changes_only_step_counter(env):
    state = env.reset(seed=2)
    _, first_reward, _ = env.step(np.zeros(ACTION_DIM))
    after, reward, done = env.step(np.zeros(ACTION_DIM))
    assert np.array_equal(after.vector(), state.vector())
    assert reward == first_reward
    assert env.steps == 2 and not done


def test_grasp_rules(env):
    env.reset(seed=0)
    env.step([0.0, 0.0, 0.0, 0.0, 1.0])
    assert not env.scene.holding
    env.reset(seed=0)
    env.scene.gripper = env.scene.box.copy()
    env.step([0.0, 0.0, 0.0, 0.0, 1.0])
    assert env.scene.holding


def test_step_limit_and_step_after_done(env):
    env.reset(seed=0)
    done = False
    for _ in range(10):
        assert not done
        _, reward, done = env.step(np.zeros(ACTION_DIM))
        assert reward <= 0
    assert done
    with pytest.raises(EpisodeError):
        env.step(np.zeros(ACTION_DIM))


def test_place_stage_starts_holding(encoder, tiny_dataset):
    env = make_env(encoder, tiny_dataset, EnvConfig(stage="place"))
    env.reset(seed=0)
    assert env.scene.holding and env.scene.gripper_closed


def test_select_goal(encoder, tiny_dataset):
    demo = tiny_dataset.split("test")[0]
    place = select_goal(encoder, tiny_dataset, demo, "place")
    final_frame = tiny_dataset.video(demo, 1)[-1]
    assert np.allclose(place, embed_frames(encoder, final_frame[None])[0])
    stages = list(tiny_dataset.stages(demo))
    last_pick = len(stages) - 1 - stages[::-1].index("pick")
    pick = select_goal(encoder, tiny_dataset, demo, "pick")
    assert np.allclose(pick, embed_frames(encoder, tiny_dataset.video(demo, 1)[last_pick][None])[0])


def test_goal_must_come_from_test_split(encoder, tiny_dataset):
    with pytest.raises(DatasetError):
        select_goal(encoder, tiny_dataset, tiny_dataset.split("train")[0], "pick")


def test_goal_constant_within_episode(env):
    env.reset(seed=0)
    goal = env.goal_embedding.copy()
    env.step(np.full(ACTION_DIM, 0.5))
    assert np.array_equal(env.goal_embedding, goal)


def test_scene_goal_mode(encoder):
    env = PickPlaceEnv(encoder, EnvConfig(goal_mode="scene"), None, threshold=0.1)
    env.reset(seed=0)
    assert env.goal_embedding.shape == (EMBEDDING_DIM,)


def test_demo_goal_mode_needs_goal(encoder):
    with pytest.raises(ConfigError):
        PickPlaceEnv(encoder, EnvConfig(), None, threshold=0.1)


def test_environment_is_deterministic(env):
    actions = np.random.default_rng(0).uniform(-1, 1, size=(5, ACTION_DIM))
    runs = []
    for _ in range(2):
        env.reset(seed=9)
        runs.append([env.step(a)[1] for a in actions])
    assert runs[0] == runs[1]


def test_success_threshold_pools_test_demos(encoder, tiny_dataset):
    demos = tiny_dataset.split("test")
    assert len(demos) == 2
    steps = []
    for demo in demos:
        embeddings = embed_frames(encoder, tiny_dataset.video(demo, 1))
        steps.extend(np.linalg.norm(np.diff(embeddings, axis=0), axis=1))
    expected = np.percentile(steps, 5.0)
    assert success_threshold(encoder, tiny_dataset, demos, camera=1) == pytest.approx(expected)
    env = make_env(encoder, tiny_dataset, EnvConfig(camera=1))
    assert env.threshold == pytest.approx(expected)


def test_success_threshold_needs_demos(encoder, tiny_dataset):
    with pytest.raises(DatasetError):
        success_threshold(encoder, tiny_dataset, [])
