"""DDPG with target networks and hindsight relabelling in embedding space."""
import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from CLfD.backbone import AdamOptimizer, ParameterSet, adam_step, backward, forward_op, load_archive, save_archive
from CLfD.env import (
    ACTION_DIM,
    REWARD_NORMS,
    STATE_DIM,
    Action,
    EnvConfig,
    MDPState,
    PickPlaceEnv,
    compute_reward,
)
from CLfD.exceptions import CheckpointError, ConfigError, DivergenceError
from CLfD.models import EMBEDDING_DIM, reset_parameters
from CLfD.scene import STAGES, scripted_action
from CLfD.utils import rng_for

logger = logging.getLogger(__name__)

HER_STRATEGIES = ("final", "future")
EPISODE_COLUMNS = ["episode", "accumulated_reward", "steps", "success"]
OUTPUT_INIT = 3e-3


@dataclass
class DDPGConfig:
    stage: str = "pick"
    gamma: float = 0.99
    hidden: List[int] = field(default_factory=lambda: [128, 128])
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 0.005
    noise_std: float = 0.1
    buffer_capacity: int = 100_000
    batch_size: int = 128
    episodes: int = 3000
    her_k: int = 4
    her_strategy: str = "final"
    reward_norm: str = "l2"
    updates_per_episode: Optional[int] = None
    seed: int = 0
    log_every: int = 50

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"soft-update rate must be in [0, 1], got {self.tau}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.buffer_capacity < 1 or self.batch_size < 1 or self.episodes < 1:
            raise ConfigError("buffer_capacity, batch_size and episodes must be >= 1")
        if self.her_k < 0:
            raise ConfigError(f"her_k must be >= 0, got {self.her_k}")
        if self.her_strategy not in HER_STRATEGIES:
            raise ConfigError(f"her_strategy must be one of {HER_STRATEGIES}, got {self.her_strategy!r}")
        if self.reward_norm not in REWARD_NORMS:
            raise ConfigError(f"reward_norm must be one of {REWARD_NORMS}, got {self.reward_norm!r}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be >= 1, got {self.hidden}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DDPGConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    goal: np.ndarray
    achieved: np.ndarray


class MLP(nn.Module):
    def __init__(self, input_dim: int, hidden: Sequence[int], output_dim: int):
        super().__init__()
        sizes = [input_dim, *hidden, output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = forward_op("linear", x, layer.weight, layer.bias)
            if i < len(self.layers) - 1:
                x = forward_op("relu", x)
        return x


class Actor(nn.Module):
    """pi(s, g) -> normalized action in [-1, 1]^5."""

    def __init__(self, hidden: Sequence[int] = (128, 128)):
        super().__init__()
        self.net = MLP(STATE_DIM + EMBEDDING_DIM, hidden, ACTION_DIM)

    def forward(self, state: torch.Tensor, goal: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.net(torch.cat([state, goal], dim=1)))


class Critic(nn.Module):
    """Q(s, g, a)."""

    def __init__(self, hidden: Sequence[int] = (128, 128)):
        super().__init__()
        self.net = MLP(STATE_DIM + EMBEDDING_DIM + ACTION_DIM, hidden, 1)

    def forward(self, state: torch.Tensor, goal: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([state, goal, action], dim=1)).squeeze(1)


def init_network(module: nn.Module, seed: int) -> None:
    reset_parameters(module, seed)
    last = module.net.layers[-1]
    generator = torch.Generator().manual_seed(int(seed) + 1)
    with torch.no_grad():
        last.weight.uniform_(-OUTPUT_INIT, OUTPUT_INIT, generator=generator)


def soft_update(target: nn.Module, online: nn.Module, rate: float) -> None:
    """target <- (1 - rate) * target + rate * online."""
    if not 0 <= rate <= 1:
        raise ConfigError(f"soft-update rate must be in [0, 1], got {rate}")
    with torch.no_grad():
        for target_param, param in zip(target.parameters(), online.parameters()):
            target_param.mul_(1.0 - rate).add_(param, alpha=rate)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.states = np.zeros((capacity, STATE_DIM), dtype=np.float32)
        self.actions = np.zeros((capacity, ACTION_DIM), dtype=np.float32)
        self.rewards = np.zeros(capacity, dtype=np.float32)
        self.next_states = np.zeros((capacity, STATE_DIM), dtype=np.float32)
        self.dones = np.zeros(capacity, dtype=np.float32)
        self.goals = np.zeros((capacity, EMBEDDING_DIM), dtype=np.float32)
        self.achieved = np.zeros((capacity, EMBEDDING_DIM), dtype=np.float32)
        self.idx = 0
        self.size = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition) -> None:
        i = self.idx
        self.states[i] = transition.state
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_states[i] = transition.next_state
        self.dones[i] = float(transition.done)
        self.goals[i] = transition.goal
        self.achieved[i] = transition.achieved
        self.idx = (self.idx + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        index = rng.integers(0, self.size, size=batch_size)
        return {
            "states": torch.from_numpy(self.states[index]),
            "actions": torch.from_numpy(self.actions[index]),
            "rewards": torch.from_numpy(self.rewards[index]),
            "next_states": torch.from_numpy(self.next_states[index]),
            "dones": torch.from_numpy(self.dones[index]),
            "goals": torch.from_numpy(self.goals[index]),
        }


def relabel(transition: Transition, goal: np.ndarray, reward_norm: str) -> Transition:
    reward = compute_reward(transition.achieved, goal, reward_norm)
    return Transition(
        state=transition.state,
        action=transition.action,
        reward=reward,
        next_state=transition.next_state,
        done=reward == 0.0,
        goal=np.asarray(goal),
        achieved=transition.achieved,
    )


def her_relabel(
    episode: List[Transition],
    k: int,
    strategy: str = "final",
    rng: Optional[np.random.Generator] = None,
    reward_norm: str = "l2",
) -> List[Transition]:
    """k hindsight copies per transition with rewards recomputed against the substituted goal.

    ``final`` uses the episode's last achieved embedding for every copy; ``future``
    draws each copy's goal from an achieved embedding at the same or a later step.
    """
    if strategy not in HER_STRATEGIES:
        raise ConfigError(f"her_strategy must be one of {HER_STRATEGIES}, got {strategy!r}")
    if not episode or k == 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    final_goal = episode[-1].achieved
    relabelled = []
    for t, transition in enumerate(episode):
        for _ in range(k):
            if strategy == "final":
                goal = final_goal
            else:
                goal = episode[int(rng.integers(t, len(episode)))].achieved
            relabelled.append(relabel(transition, goal, reward_norm))
    return relabelled


class DDPGAgent:
    def __init__(self, config: DDPGConfig):
        config.validate()
        self.config = config
        self.actor = Actor(config.hidden)
        self.critic = Critic(config.hidden)
        init_network(self.actor, int(rng_for(config.seed, "init", 0).integers(2**31)))
        init_network(self.critic, int(rng_for(config.seed, "init", 1).integers(2**31)))
        self.target_actor = copy.deepcopy(self.actor)
        self.target_critic = copy.deepcopy(self.critic)
        for p in [*self.target_actor.parameters(), *self.target_critic.parameters()]:
            p.requires_grad_(False)
        self.actor_params = ParameterSet.from_module(self.actor)
        self.critic_params = ParameterSet.from_module(self.critic)
        self.actor_optimizer = AdamOptimizer(self.actor_params, lr=config.actor_lr)
        self.critic_optimizer = AdamOptimizer(self.critic_params, lr=config.critic_lr)

    def act(self, state: np.ndarray, goal: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            s = torch.as_tensor(state, dtype=torch.float32)[None]
            g = torch.as_tensor(goal, dtype=torch.float32)[None]
            return self.actor(s, g)[0].numpy().astype(np.float64)

    def update(self, batch: Dict[str, torch.Tensor]) -> Tuple[float, float]:
        """One critic and one actor step, then soft target updates; returns both losses."""
        states, goals, actions = batch["states"], batch["goals"], batch["actions"]
        with torch.no_grad():
            next_actions = self.target_actor(batch["next_states"], goals)
            next_q = self.target_critic(batch["next_states"], goals, next_actions)
            target = batch["rewards"] + self.config.gamma * (1.0 - batch["dones"]) * next_q

        critic_loss = F.mse_loss(self.critic(states, goals, actions), target)
        critic_value = float(critic_loss.item())
        if not np.isfinite(critic_value):
            return critic_value, float("nan")
        adam_step(self.critic_optimizer, backward(critic_loss, self.critic_params))

        actor_loss = -self.critic(states, goals, self.actor(states, goals)).mean()
        actor_value = float(actor_loss.item())
        adam_step(self.actor_optimizer, backward(actor_loss, self.actor_params))

        soft_update(self.target_critic, self.critic, self.config.tau)
        soft_update(self.target_actor, self.actor, self.config.tau)
        return critic_value, actor_value


class Policy:
    """Maps the current environment state to an action."""

    name = "policy"

    def act(self, env: PickPlaceEnv, state: MDPState, rng: np.random.Generator) -> Action:
        raise NotImplementedError


class DDPGPolicy(Policy):
    name = "ddpg"

    def __init__(self, actor: Actor):
        self.actor = actor
        self.actor.eval()

    def act(self, env: PickPlaceEnv, state: MDPState, rng: np.random.Generator) -> Action:
        with torch.no_grad():
            s = torch.as_tensor(state.vector(), dtype=torch.float32)[None]
            g = torch.as_tensor(env.goal_embedding, dtype=torch.float32)[None]
            output = self.actor(s, g)[0].numpy()
        return Action.from_normalized(output, env.config.v_max)


class RandomPolicy(Policy):
    name = "random"

    def act(self, env: PickPlaceEnv, state: MDPState, rng: np.random.Generator) -> Action:
        return Action.from_normalized(rng.uniform(-1.0, 1.0, size=ACTION_DIM), env.config.v_max)


class ScriptedPolicy(Policy):
    """Privileged oracle that reads the true scene, as the demonstration generator does."""

    name = "scripted"

    def act(self, env: PickPlaceEnv, state: MDPState, rng: np.random.Generator) -> Action:
        velocity, command = scripted_action(env.scene, env.config.stage, env.config.v_max)
        return Action.clamped([*velocity, 0.0, command], env.config.v_max)


@dataclass
class DDPGResult:
    agent: DDPGAgent
    episodes: pd.DataFrame
    buffer: Optional[ReplayBuffer] = None

    @property
    def policy(self) -> DDPGPolicy:
        return DDPGPolicy(self.agent.actor)


def ddpg_train(
    config: DDPGConfig, env: PickPlaceEnv, out_dir: Optional[Path] = None
) -> DDPGResult:
    """Train one stage policy; the episode log gets one row per episode."""
    config.validate()
    if env.config.stage != config.stage:
        raise ConfigError(f"environment stage {env.config.stage!r} != agent stage {config.stage!r}")
    if env.config.reward_norm != config.reward_norm:
        # relabelled rewards must use the same norm as the environment's
        raise ConfigError(
            f"environment reward norm {env.config.reward_norm!r} != agent reward norm {config.reward_norm!r}"
        )
    agent = DDPGAgent(config)
    buffer = ReplayBuffer(config.buffer_capacity)
    rows: List[Dict[str, Any]] = []
    recent_losses: List[float] = []
    logger.info(f"Training {config.stage} policy for {config.episodes} episodes")

    for episode in range(config.episodes):
        noise_rng = rng_for(config.seed, "noise", episode)
        state = env.reset(config.seed, episode)
        goal = env.goal_embedding
        transitions: List[Transition] = []
        accumulated = 0.0
        done = False
        while not done:
            action = agent.act(state.vector(), goal)
            if config.noise_std > 0:
                action = action + noise_rng.normal(0.0, config.noise_std, size=ACTION_DIM)
            action = np.clip(action, -1.0, 1.0)
            next_state, reward, done = env.step(Action.from_normalized(action, env.config.v_max))
            transitions.append(
                Transition(
                    state=state.vector(),
                    action=action,
                    reward=reward,
                    next_state=next_state.vector(),
                    done=bool(env.info["success"]),
                    goal=goal,
                    achieved=next_state.embedding,
                )
            )
            accumulated += reward
            state = next_state

        for transition in transitions:
            buffer.add(transition)
        her_rng = rng_for(config.seed, "her", episode)
        for transition in her_relabel(transitions, config.her_k, config.her_strategy, her_rng, config.reward_norm):
            buffer.add(transition)

        if len(buffer) >= config.batch_size:
            batch_rng = rng_for(config.seed, "batch", episode)
            updates = config.updates_per_episode or len(transitions)
            for update in range(updates):
                critic_loss, _ = agent.update(buffer.sample(config.batch_size, batch_rng))
                recent_losses = (recent_losses + [critic_loss])[-5:]
                if not np.isfinite(critic_loss):
                    logger.error(f"Critic loss diverged at episode {episode} update {update}")
                    raise DivergenceError(
                        f"non-finite critic loss at episode {episode}, update {update}; "
                        f"recent critic losses {recent_losses}"
                    )

        rows.append(
            {
                "episode": episode,
                "accumulated_reward": accumulated,
                "steps": len(transitions),
                "success": int(env.reached),
            }
        )
        if (episode + 1) % config.log_every == 0:
            window = rows[-config.log_every :]  # noqa
            logger.info(
                f"Episode {episode + 1}/{config.episodes}: "
                f"mean reward {np.mean([r['accumulated_reward'] for r in window]):.3f}, "
                f"success {np.mean([r['success'] for r in window]):.2f}"
            )

    episodes = pd.DataFrame(rows, columns=EPISODE_COLUMNS)
    result = DDPGResult(agent=agent, episodes=episodes, buffer=buffer)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        episodes.to_csv(out_dir / "episodes.csv", index=False)
        save_policy(out_dir / "policy.ckpt", agent, env.config)
    return result


@dataclass
class PolicyReport:
    success_rate: float
    mean_return: float
    episodes: int
    policy: str
    per_episode: List[Dict[str, Any]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "mean_return": self.mean_return,
        }


def run_episode(env: PickPlaceEnv, policy: Policy, seed: int, episode: int) -> Dict[str, Any]:
    rng = rng_for(seed, "eval", episode)
    state = env.reset(seed, episode, stream="eval-env")
    total, done = 0.0, False
    while not done:
        state, reward, done = env.step(policy.act(env, state, rng))
        total += reward
    return {"episode": episode, "return": total, "steps": env.steps, "success": int(env.reached)}


def evaluate_policy(
    policy: Policy,
    env_factory: Callable[[], PickPlaceEnv],
    episodes: int = 100,
    seed: int = 0,
    threads: int = 1,
) -> PolicyReport:
    """Noise-free rollouts; success is the geometric stage predicate within the step limit."""
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")
    workers = max(1, min(threads, episodes))
    chunks = [list(range(episodes))[w::workers] for w in range(workers)]

    def work(indices: List[int]) -> List[Dict[str, Any]]:
        env = env_factory()
        return [run_episode(env, policy, seed, i) for i in indices]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = sorted((row for chunk in pool.map(work, chunks) for row in chunk), key=lambda r: r["episode"])
    report = PolicyReport(
        success_rate=float(np.mean([r["success"] for r in rows])),
        mean_return=float(np.mean([r["return"] for r in rows])),
        episodes=episodes,
        policy=policy.name,
        per_episode=rows,
    )
    logger.info(f"{policy.name} policy: success rate {report.success_rate:.2f} over {episodes} episodes")
    return report


def save_policy(path: Path, agent: DDPGAgent, env_config: EnvConfig) -> str:
    tensors = {f"actor.{n}": p.detach() for n, p in agent.actor.named_parameters()}
    tensors.update({f"critic.{n}": p.detach() for n, p in agent.critic.named_parameters()})
    metadata = {"kind": "policy", "ddpg": agent.config.to_dict(), "env": env_config.to_dict()}
    return save_archive(path, tensors, metadata, precision="float32")


def load_policy(path: Path) -> Tuple[DDPGPolicy, DDPGConfig, EnvConfig]:
    tensors, meta = load_archive(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path}: not a policy checkpoint")
    try:
        config = DDPGConfig.from_dict(meta["ddpg"])
        env_config = EnvConfig.from_dict(meta["env"])
        actor = Actor(config.hidden)
        state = {n[len("actor."):]: t for n, t in tensors.items() if n.startswith("actor.")}
        actor.load_state_dict(state, strict=True)
    except (KeyError, RuntimeError, TypeError) as e:
        logger.error(f"Failed to restore policy {path}: {e}")
        raise CheckpointError(f"{path}: incompatible policy checkpoint: {e}") from e
    return DDPGPolicy(actor), config, env_config
