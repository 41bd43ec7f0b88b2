"""
Grid warehouse task-allocation game

N agents choose among the K nearest open tasks (or skip). A bound agent walks one
Manhattan step per tick toward the pickup cell, then toward the drop corner.
Every delivery spawns a replacement task, so the pool size never changes.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

import config
from numcore import Rng
from scalecomm_utils import ConfigError, DomainError, StructuralError
from trajectory_buffer import TrajectoryBuffer, TrajectoryRecord

OPEN = "open"
ASSIGNED = "assigned"
CARRIED = "carried"
DELIVERED = "delivered"


@dataclass
class RewardConfig:
    r_assign: float = config.R_ASSIGN
    r_pick: float = config.R_PICK
    r_drop: float = config.R_DROP
    r_unassigned: float = config.R_UNASSIGNED

    def validate(self):
        if not (self.r_drop > self.r_pick > self.r_assign > 0):
            raise ConfigError("rewards must satisfy r_drop > r_pick > r_assign > 0")
        if self.r_unassigned >= 0:
            raise ConfigError("r_unassigned must be negative")


@dataclass
class WarehouseConfig:
    width: int = config.GRID_WIDTH
    height: int = config.GRID_HEIGHT
    n_agents: int = config.N_AGENTS
    k_candidates: int = config.K_CANDIDATES
    episode_length: int = config.EPISODE_LENGTH
    task_pool_size: int = config.TASK_POOL_SIZE
    rewards: RewardConfig = field(default_factory=RewardConfig)

    @property
    def obs_dim(self):
        return config.SELF_FEATURE_DIM + config.TASK_FEATURE_DIM * self.k_candidates

    @property
    def n_actions(self):
        return self.k_candidates + 1

    @property
    def distance_norm(self):
        # agent -> pickup -> drop spans at most two grid diameters
        return 2.0 * ((self.width - 1) + (self.height - 1))

    def corners(self):
        w, h = self.width - 1, self.height - 1
        return [(0, 0), (w, 0), (0, h), (w, h)]

    def validate(self):
        if self.width < 4 or self.height < 4:
            raise ConfigError(f"grid must be at least 4x4, got {self.width}x{self.height}")
        if self.n_agents < 1:
            raise ConfigError("n_agents must be >= 1")
        if self.k_candidates < 1:
            raise ConfigError("k_candidates must be >= 1")
        if self.episode_length < 1:
            raise ConfigError("episode_length must be >= 1")
        if self.task_pool_size <= self.n_agents:
            raise ConfigError("task_pool_size must exceed n_agents so a task is always open")
        if self.n_agents > self.width * self.height:
            raise ConfigError(
                f"{self.n_agents} agents do not fit on {self.width * self.height} free cells"
            )
        self.rewards.validate()


@dataclass
class TaskDescriptor:
    task_id: int
    pickup: Tuple[int, int]
    drop: Tuple[int, int]
    category: int
    status: str = OPEN

    def heuristic_distance(self, agent_pos, cfg: WarehouseConfig):
        """Manhattan agent -> pickup -> drop, scaled into [0, 1]"""
        raw = _manhattan(agent_pos, self.pickup) + _manhattan(self.pickup, self.drop)
        return raw / cfg.distance_norm

    def features(self, agent_pos, cfg: WarehouseConfig):
        return np.array([
            self.pickup[0] / cfg.width,
            self.pickup[1] / cfg.height,
            self.drop[0] / cfg.width,
            self.drop[1] / cfg.height,
            self.heuristic_distance(agent_pos, cfg),
        ])


@dataclass
class WarehouseState:
    cfg: WarehouseConfig
    positions: List[Tuple[int, int]]
    carrying: List[bool]
    bound: List[Optional[int]]
    tasks: Dict[int, TaskDescriptor]
    rng: Rng
    t: int = 0
    next_task_id: int = 0
    delivered: int = 0

    @property
    def done(self):
        return self.t >= self.cfg.episode_length

    def open_tasks(self):
        return [task for task in self.tasks.values() if task.status == OPEN]

    def check_invariants(self):
        for i, (x, y) in enumerate(self.positions):
            if not (0 <= x < self.cfg.width and 0 <= y < self.cfg.height):
                raise StructuralError(f"agent {i} outside the grid at {(x, y)}")
            if self.carrying[i] and self.bound[i] is None:
                raise StructuralError(f"agent {i} carries without a bound task")


@dataclass
class Observation:
    self_features: np.ndarray
    candidates: np.ndarray
    mask: np.ndarray
    candidate_ids: List[int]
    label: int

    def vector(self):
        return np.concatenate([self.self_features, self.candidates.reshape(-1)])


@dataclass
class StepRecord:
    t: int
    actions: List[int]
    rewards: np.ndarray
    bound: List[bool]
    assignments: int = 0
    pickups: int = 0
    deliveries: int = 0
    idle: int = 0


def _manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def _step_toward(pos, target):
    x, y = pos
    if x != target[0]:
        x += 1 if target[0] > x else -1
    elif y != target[1]:
        y += 1 if target[1] > y else -1
    return (x, y)


def _spawn_task(state: WarehouseState):
    cfg = state.cfg
    corners = cfg.corners()
    while True:
        pickup = (int(state.rng.integers(0, cfg.width)), int(state.rng.integers(0, cfg.height)))
        if pickup not in corners:
            break
    category = int(state.rng.integers(0, len(corners)))
    task = TaskDescriptor(state.next_task_id, pickup, corners[category], category)
    state.tasks[task.task_id] = task
    state.next_task_id += 1
    return task


def candidate_tasks(state: WarehouseState, agent):
    """Up to K open tasks nearest to the agent by heuristic distance, ties broken by task id"""
    pos = state.positions[agent]
    ranked = sorted(
        state.open_tasks(),
        key=lambda task: (task.heuristic_distance(pos, state.cfg), task.task_id),
    )
    return ranked[:state.cfg.k_candidates]


def observe(state: WarehouseState):
    """One fixed-size Observation per agent"""
    cfg = state.cfg
    observations = []
    for i in range(cfg.n_agents):
        x, y = state.positions[i]
        ranked = candidate_tasks(state, i)
        candidates = np.zeros((cfg.k_candidates, config.TASK_FEATURE_DIM))
        mask = np.zeros(cfg.k_candidates, dtype=bool)
        ids = [-1] * cfg.k_candidates
        for k, task in enumerate(ranked):
            candidates[k] = task.features((x, y), cfg)
            mask[k] = True
            ids[k] = task.task_id
        observations.append(Observation(
            self_features=np.array([x / cfg.width, y / cfg.height, float(state.carrying[i])]),
            candidates=candidates,
            mask=mask,
            candidate_ids=ids,
            label=ranked[0].category if ranked else -1,
        ))
    return observations


def reset(seed, cfg: Optional[WarehouseConfig] = None):
    """
    Start a new episode

    Args:
        seed: Integer seed; the same seed always yields the same state
        cfg: WarehouseConfig (defaults from config.py)

    Returns:
        (WarehouseState, list of Observation)
    """
    cfg = cfg or WarehouseConfig()
    cfg.validate()
    rng = Rng(seed)
    cells = rng.permutation(cfg.width * cfg.height)[:cfg.n_agents]
    positions = [(int(c) % cfg.width, int(c) // cfg.width) for c in cells]
    state = WarehouseState(
        cfg=cfg,
        positions=positions,
        carrying=[False] * cfg.n_agents,
        bound=[None] * cfg.n_agents,
        tasks={},
        rng=rng,
    )
    for _ in range(cfg.task_pool_size):
        _spawn_task(state)
    return state, observe(state)


def step(state: WarehouseState, joint_action):
    """
    Advance the game by one tick (mutates and returns state)

    Actions are 1-based: 1..K pick a candidate, K+1 skips. Unbound agents are
    resolved in index order so the lower index wins a contested task. Actions of
    agents that already hold a task are ignored.

    Returns:
        (state, observations, rewards, done, StepRecord)
    """
    cfg = state.cfg
    rewards_cfg = cfg.rewards
    if state.done:
        raise DomainError("episode already finished; call reset")
    actions = [int(a) for a in joint_action]
    if len(actions) != cfg.n_agents:
        raise StructuralError(f"expected {cfg.n_agents} actions, got {len(actions)}")
    for a in actions:
        if not 1 <= a <= cfg.n_actions:
            raise DomainError(f"action {a} outside 1..{cfg.n_actions}")

    rewards = np.zeros(cfg.n_agents)
    record = StepRecord(t=state.t, actions=actions, rewards=rewards, bound=[])
    candidates = [candidate_tasks(state, i) for i in range(cfg.n_agents)]

    for i, a in enumerate(actions):
        if state.bound[i] is not None:
            continue
        if a <= cfg.k_candidates and a - 1 < len(candidates[i]):
            task = candidates[i][a - 1]
            if task.status == OPEN:
                task.status = ASSIGNED
                state.bound[i] = task.task_id
                rewards[i] += rewards_cfg.r_assign
                record.assignments += 1
                continue
        rewards[i] += rewards_cfg.r_unassigned
        record.idle += 1

    record.bound = [b is not None for b in state.bound]

    for i in range(cfg.n_agents):
        if state.bound[i] is None:
            continue
        task = state.tasks[state.bound[i]]
        if not state.carrying[i]:
            if state.positions[i] != task.pickup:
                state.positions[i] = _step_toward(state.positions[i], task.pickup)
            if state.positions[i] == task.pickup:
                state.carrying[i] = True
                task.status = CARRIED
                rewards[i] += rewards_cfg.r_pick
                record.pickups += 1
        else:
            state.positions[i] = _step_toward(state.positions[i], task.drop)
            if state.positions[i] == task.drop:
                task.status = DELIVERED
                del state.tasks[task.task_id]
                state.bound[i] = None
                state.carrying[i] = False
                state.delivered += 1
                rewards[i] += rewards_cfg.r_drop
                record.deliveries += 1
                _spawn_task(state)

    state.t += 1
    return state, observe(state), rewards, state.done, record


def episode_kpis(records: List[StepRecord]):
    """
    Deliveries and unassigned share of one episode

    Returns:
        Dict with 'deliveries' and 'unassigned_pct' (idle agent-steps / (N*T) * 100)
    """
    if not records:
        raise DomainError("episode_kpis needs at least one step")
    n_agents = len(records[0].rewards)
    idle = sum(r.idle for r in records)
    return {
        'deliveries': float(sum(r.deliveries for r in records)),
        'unassigned_pct': 100.0 * idle / (n_agents * len(records)),
    }


def greedy_action(obs: Observation, cfg: WarehouseConfig):
    """Nearest-task heuristic: first-ranked candidate, or skip when none is open"""
    return 1 if obs.mask[0] else cfg.n_actions


def collect_heuristic_dataset(episodes, steps, seed, cfg: Optional[WarehouseConfig] = None):
    """
    Roll out the nearest-task greedy policy and record every agent-step

    Args:
        episodes: Number of episodes E
        steps: Steps per episode T
        seed: Base seed; episode e uses a child stream of it
        cfg: WarehouseConfig (episode_length is replaced by steps)

    Returns:
        TrajectoryBuffer with E*T*N records
    """
    if episodes < 1 or steps < 1:
        raise ConfigError("episodes and steps must be >= 1")
    cfg = replace(cfg or WarehouseConfig(), episode_length=steps)
    base = Rng(seed)
    buffer = TrajectoryBuffer(obs_dim=cfg.obs_dim, k_candidates=cfg.k_candidates)
    for episode in range(episodes):
        state, observations = reset(base.child("collect", episode).seed, cfg)
        for t in range(steps):
            actions = [greedy_action(obs, cfg) for obs in observations]
            state, next_obs, rewards, done, _ = step(state, actions)
            for agent, obs in enumerate(observations):
                buffer.add(TrajectoryRecord(
                    episode=episode,
                    t=t,
                    agent=agent,
                    obs=obs.vector(),
                    mask=obs.mask.copy(),
                    action=actions[agent],
                    reward=float(rewards[agent]),
                    done=bool(done),
                    label=obs.label,
                ))
            observations = next_obs
    return buffer


def render_ascii(state: WarehouseState):
    """
    Text picture of the grid (row y=0 first)

    Agents show as their index (upper-case letter when carrying), open pickups as
    'P', drop corners as 'D', empty cells as '-'.
    """
    cfg = state.cfg
    open_pickups = {task.pickup for task in state.open_tasks()}
    corners = set(cfg.corners())
    lines = [f"t={state.t}/{cfg.episode_length} delivered={state.delivered}"]
    for y in range(cfg.height):
        row = ""
        for x in range(cfg.width):
            agents = [i for i, pos in enumerate(state.positions) if pos == (x, y)]
            if len(agents) > 1:
                row += "X "
            elif agents:
                i = agents[0]
                row += (chr(ord('A') + i % 26) if state.carrying[i] else str(i % 10)) + " "
            elif (x, y) in open_pickups:
                row += "P "
            elif (x, y) in corners:
                row += "D "
            else:
                row += "- "
        lines.append(row.rstrip())
    return "\n".join(lines)
