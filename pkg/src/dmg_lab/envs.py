"""Synthetic environments, seeded offline-dataset generators and score utilities."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import Dataset, TabularMdp, Transition

STD_FLOOR = 1e-3


def make_chain_mdp(gamma: float = 0.5) -> TabularMdp:
    """Two states, actions stay (coordinate 0) and go (coordinate 1).

    s0: stay -> s0, go -> s1, both reward 0.  s1: stay -> s1 with reward 1,
    go -> s0 with reward 0.  d0 is uniform.
    """
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = P[0, 1, 1] = P[1, 0, 1] = P[1, 1, 0] = 1.0
    R = np.array([[0.0, 0.0], [1.0, 0.0]])
    return TabularMdp(P, R, gamma, np.array([0.5, 0.5]), np.array([[0.0], [1.0]]), r_max=1.0,
                      action_names=("stay", "go"))


def chain_dataset() -> Dataset:
    """Canonical narrow chain dataset: only 'stay' is ever logged, in both states."""
    return Dataset((Transition(0, 0, 0.0, 0, False), Transition(1, 0, 1.0, 1, False)),
                   provenance="chain:stay-only")


class TabularEnv:
    """Simulator view of a TabularMdp with an optional absorbing terminal set."""

    def __init__(self, mdp: TabularMdp, horizon: int = 200, terminal_states=()):
        self.mdp = mdp
        self.horizon = horizon
        self.terminal_states = frozenset(int(s) for s in terminal_states)
        self.state = 0
        self.t = 0
        self._rng = np.random.default_rng(0)

    n_actions = property(lambda self: self.mdp.n_actions)

    def reset(self, rng: np.random.Generator) -> int:
        self._rng = rng
        self.state = int(rng.choice(self.mdp.n_states, p=self.mdp.d0))
        self.t = 0
        return self.state

    def step(self, action: int):
        s = self.state
        a = int(action)
        if not 0 <= a < self.mdp.n_actions:
            raise ValueError(f"invalid action {a}")
        r = float(self.mdp.R[s, a])
        s2 = int(self._rng.choice(self.mdp.n_states, p=self.mdp.P[s, a]))
        self.state = s2
        self.t += 1
        terminal = s2 in self.terminal_states
        done = terminal or self.t >= self.horizon
        return s2, r, done, terminal


@dataclass(frozen=True)
class GridWorldSpec:
    width: int = 3
    height: int = 3
    goals: tuple[tuple[int, int], ...] = ((2, 2),)
    start: tuple[int, int] = (0, 0)
    goal_reward: float = 1.0
    step_reward: float = 0.0
    obstacles: tuple[tuple[int, int], ...] = ()
    # AntMaze-style: generated datasets subtract 1 from every reward.
    sparse: bool = False
    gamma: float = 0.9
    horizon: int = 100

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")
        for g in self.goals:
            if not (0 <= g[0] < self.width and 0 <= g[1] < self.height):
                raise ValueError(f"goal {g} outside the grid")
            if g in self.obstacles:
                raise ValueError(f"goal {g} is an obstacle")
        if not self.goals:
            raise ValueError("need at least one goal")
        if self.start in self.obstacles:
            raise ValueError("start cell is an obstacle")
        if self.goal_reward < 0 or self.step_reward < 0:
            raise ValueError("gridworld rewards must be non-negative; use sparse=True for the -1 convention")


GRID_MOVES = ((0, 1), (0, -1), (-1, 0), (1, 0))  # up, down, left, right
GRID_ACTION_NAMES = ("up", "down", "left", "right")


class GridWorld(TabularEnv):
    def __init__(self, spec: GridWorldSpec):
        self.spec = spec
        cells = [(x, y) for y in range(spec.height) for x in range(spec.width) if (x, y) not in spec.obstacles]
        self.cells = cells
        self.index = {c: i for i, c in enumerate(cells)}
        goals = {self.index[g] for g in spec.goals}
        S, A = len(cells), len(GRID_MOVES)
        P = np.zeros((S, A, S))
        R = np.zeros((S, A))
        for i, (x, y) in enumerate(cells):
            for a, (dx, dy) in enumerate(GRID_MOVES):
                if i in goals:
                    P[i, a, i] = 1.0
                    continue
                nxt = (x + dx, y + dy)
                j = self.index.get(nxt, i)
                P[i, a, j] = 1.0
                R[i, a] = spec.goal_reward if j in goals else spec.step_reward
        d0 = np.zeros(S)
        d0[self.index[spec.start]] = 1.0
        r_max = max(spec.goal_reward, spec.step_reward, 1e-12)
        mdp = TabularMdp(P, R, spec.gamma, d0, np.array(GRID_MOVES, dtype=float), r_max=r_max,
                         action_names=GRID_ACTION_NAMES)
        if not self._goal_reachable(mdp, goals):
            raise ValueError("no goal is reachable from the start cell")
        super().__init__(mdp, spec.horizon, goals)

    def _goal_reachable(self, mdp, goals) -> bool:
        return self.shortest_path_length(mdp, goals) is not None

    def shortest_path_length(self, mdp=None, goals=None) -> int | None:
        """Breadth-first number of moves from start to the nearest goal."""
        mdp = self.mdp if mdp is None else mdp
        goals = self.terminal_states if goals is None else goals
        start = self.index[self.spec.start]
        dist = {start: 0}
        queue = deque([start])
        while queue:
            s = queue.popleft()
            if s in goals:
                return dist[s]
            for a in range(mdp.n_actions):
                for t in np.flatnonzero(mdp.P[s, a] > 0):
                    if int(t) not in dist:
                        dist[int(t)] = dist[s] + 1
                        queue.append(int(t))
        return None


def make_gridworld(spec: GridWorldSpec | None = None) -> GridWorld:
    return GridWorld(GridWorldSpec() if spec is None else spec)


@dataclass(frozen=True)
class PointMassSpec:
    dt: float = 0.1
    a_max: float = 1.0
    goal: tuple[float, float] = (0.5, 0.5)
    bound: float = 1.0
    horizon: int = 50
    # Initial positions are uniform on this box.
    start_low: tuple[float, float] = (-1.0, -1.0)
    start_high: tuple[float, float] = (-0.5, -0.5)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


class PointMass:
    """x' = clip(x + a dt, -bound, bound) with reward -||x' - goal|| and ||a|| <= a_max."""

    state_dim = 2
    action_dim = 2

    def __init__(self, spec: PointMassSpec | None = None):
        self.spec = PointMassSpec() if spec is None else spec
        self.goal = np.array(self.spec.goal, dtype=float)
        self.state = np.zeros(2)
        self.t = 0
        self.horizon = self.spec.horizon

    @property
    def r_max(self) -> float:
        """Largest possible reward magnitude."""
        b = self.spec.bound
        corners = np.array([[b, b], [b, -b], [-b, b], [-b, -b]])
        return float(np.linalg.norm(corners - self.goal, axis=1).max())

    @property
    def max_action(self) -> float:
        return self.spec.a_max

    def clip_action(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        n = np.linalg.norm(a)
        return a * (self.spec.a_max / n) if n > self.spec.a_max else a

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = rng.uniform(self.spec.start_low, self.spec.start_high)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        a = self.clip_action(action)
        b = self.spec.bound
        self.state = np.clip(self.state + a * self.spec.dt, -b, b)
        self.t += 1
        r = -float(np.linalg.norm(self.state - self.goal))
        return self.state.copy(), r, self.t >= self.horizon, False

    def expert_action(self, x) -> np.ndarray:
        """Proportional controller that stops exactly on the goal when it can."""
        return self.clip_action((self.goal - np.asarray(x)) / self.spec.dt)


def make_pointmass(spec: PointMassSpec | None = None) -> PointMass:
    return PointMass(spec)


@dataclass(frozen=True)
class ScoreReference:
    random_return: float
    expert_return: float

    def __post_init__(self):
        if not self.expert_return > self.random_return:
            raise ValueError("expert_return must exceed random_return")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"random_return": self.random_return,
                                          "expert_return": self.expert_return}) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreReference":
        d = json.loads(Path(path).read_text())
        return cls(float(d["random_return"]), float(d["expert_return"]))


def normalized_score(ret: float, ref: ScoreReference) -> float:
    return 100.0 * (ret - ref.random_return) / (ref.expert_return - ref.random_return)


# ----------------------------------------------------------------------------
# behaviors and dataset generation


def parse_behavior(text: str) -> tuple[str, dict]:
    """'random' | 'expert' | 'mediocre:0.3' | 'slow:0.5,0.05' | 'mixture:expert=0.5,random=0.5'."""
    name, _, arg = text.partition(":")
    name = name.strip()
    if name in ("random", "expert"):
        if arg:
            raise ValueError(f"behavior {name!r} takes no argument")
        return name, {}
    if name == "mediocre":
        p = float(arg)
        if not 0.0 <= p <= 1.0:
            raise ValueError("mediocre(p) needs p in [0, 1]")
        return name, {"p": p}
    if name == "slow":
        parts = [float(v) for v in arg.split(",")] if arg else [0.5, 0.0]
        speed, noise = (parts + [0.0])[:2]
        return name, {"speed": speed, "noise": noise}
    if name == "mixture":
        weights = {}
        for item in arg.split(","):
            k, _, v = item.partition("=")
            parse_behavior(k)
            weights[k.strip()] = float(v)
        total = sum(weights.values())
        if total <= 0 or any(w < 0 for w in weights.values()):
            raise ValueError("mixture weights must be non-negative with a positive sum")
        return name, {"weights": {k: w / total for k, w in weights.items()}}
    raise ValueError(f"unknown behavior {text!r}")


def _tabular_expert(env: TabularEnv) -> np.ndarray:
    from .mdp import optimal_values

    _, pi = optimal_values(env.mdp)
    return pi


def _act(env, name: str, args: dict, state, rng: np.random.Generator, cache: dict):
    if isinstance(env, PointMass):
        if name == "random":
            while True:
                a = rng.uniform(-env.spec.a_max, env.spec.a_max, size=2)
                if np.linalg.norm(a) <= env.spec.a_max:
                    return a
        if name == "expert":
            return env.expert_action(state)
        if name == "mediocre":
            if rng.random() < args["p"]:
                return env.expert_action(state)
            return _act(env, "random", {}, state, rng, cache)
        if name == "slow":
            a = args["speed"] * env.expert_action(state)
            if args["noise"] > 0:
                a = a + rng.normal(0.0, args["noise"], size=2)
            return env.clip_action(a)
    else:
        if name == "random":
            return int(rng.integers(env.n_actions))
        if "expert" not in cache:
            cache["expert"] = _tabular_expert(env)
        if name == "expert":
            return int(cache["expert"][state])
        if name == "mediocre":
            if rng.random() < args["p"]:
                return int(cache["expert"][state])
            return int(rng.integers(env.n_actions))
    raise ValueError(f"behavior {name!r} not supported for {type(env).__name__}")


def generate_dataset(env, behavior: str, n: int, seed: int, reward_shift: float | None = None) -> Dataset:
    """Roll out ``behavior`` until exactly ``n`` transitions are logged.

    Mixtures draw one component per trajectory; labels record it per transition.
    Gridworlds with ``spec.sparse`` shift rewards by -1 unless ``reward_shift``
    says otherwise.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    name, args = parse_behavior(behavior)
    rng = np.random.default_rng(seed)
    if reward_shift is None:
        reward_shift = -1.0 if getattr(getattr(env, "spec", None), "sparse", False) else 0.0
    tabular = not isinstance(env, PointMass)
    cache: dict = {}
    transitions, labels = [], []
    reached_goal = False
    while len(transitions) < n:
        if name == "mixture":
            comps = list(args["weights"])
            probs = np.array([args["weights"][c] for c in comps])
            label = comps[int(rng.choice(len(comps), p=probs))]
        else:
            label = behavior
        comp_name, comp_args = parse_behavior(label) if name == "mixture" else (name, args)
        s = env.reset(rng)
        done = False
        while not done and len(transitions) < n:
            a = _act(env, comp_name, comp_args, s, rng, cache)
            s2, r, done, terminal = env.step(a)
            if tabular:
                tr = Transition(int(s), int(a), r + reward_shift, int(s2), bool(terminal))
                reached_goal |= terminal
            else:
                tr = Transition(tuple(map(float, s)), tuple(map(float, np.asarray(a, float))), r + reward_shift,
                                tuple(map(float, s2)), bool(terminal))
                reached_goal |= float(np.linalg.norm(np.asarray(s2) - env.goal)) <= 0.1
            transitions.append(tr)
            labels.append(label)
            s = s2
    warnings = []
    if not reached_goal:
        warnings.append("behavior never reached a goal in this dataset")
    prov = f"generator={type(env).__name__} behavior={behavior} n={n} seed={seed} reward_shift={reward_shift}"
    return Dataset(tuple(transitions), provenance=prov, labels=tuple(labels), warnings=tuple(warnings))


# ----------------------------------------------------------------------------
# state normalization


@dataclass(frozen=True)
class StateStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "StateStats":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def normalize_states(dataset: Dataset) -> tuple[Dataset, StateStats]:
    if dataset.is_tabular:
        raise ValueError("state normalization needs continuous states")
    arr = dataset.arrays()
    mean = arr["states"].mean(axis=0)
    std = np.maximum(arr["states"].std(axis=0), STD_FLOOR)
    stats = StateStats(mean, std)
    ts = tuple(
        Transition(tuple(map(float, stats.normalize(t.state))), t.action, t.reward,
                   tuple(map(float, stats.normalize(t.next_state))), t.terminal)
        for t in dataset
    )
    return Dataset(ts, dataset.provenance + " normalized", dataset.labels, dataset.warnings), stats
