"""Deterministic tabular gridworld mazes (single- and multi-agent).

Coordinates are 0-indexed ``(x, y)`` with ``y = 0`` the top row, so the
"upper-left corner" landmark sits at ``(0, 0)``.  Agents that step onto a
target collect its reward and are frozen there; the episode ends once every
agent is frozen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Coord = tuple[int, int]

MOVES: dict[str, Coord] = {
    "up": (0, -1),
    "down": (0, 1),
    "left": (-1, 0),
    "right": (1, 0),
    "stay": (0, 0),
}
DEFAULT_MOVES = ("up", "down", "left", "right")

DEFAULT_STATE_CAP = 100_000


class MazeError(ValueError):
    """Invalid maze specification or invalid input to the dynamics."""


@dataclass(frozen=True)
class Target:
    pos: Coord
    reward: float


@dataclass(frozen=True)
class MazeSpec:
    width: int
    height: int
    targets: tuple[Target, ...]
    obstacles: tuple[Coord, ...] = ()
    obstacle_penalty: float = -5.0
    horizon: int = 10
    n_agents: int = 1
    moves: tuple[str, ...] = DEFAULT_MOVES
    gamma: float = 0.99
    group_bonus: float = 0.0
    agent_collision_penalty: float = 0.0
    start_cells: tuple[Coord, ...] | None = None
    name: str = "maze"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MazeError("width and height must be positive")
        if self.horizon < 1:
            raise MazeError("horizon must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise MazeError("gamma must lie in (0, 1)")
        if self.n_agents < 1:
            raise MazeError("n_agents must be >= 1")
        if not self.targets:
            raise MazeError("at least one target is required")
        for m in self.moves:
            if m not in MOVES:
                raise MazeError(f"unknown move {m!r}; choose from {sorted(MOVES)}")
        tpos = [t.pos for t in self.targets]
        for p in tpos + list(self.obstacles):
            if not self.inside(p):
                raise MazeError(f"cell {p} lies outside the {self.width}x{self.height} grid")
        if len(set(tpos)) != len(tpos):
            raise MazeError("duplicate target positions")
        if set(tpos) & set(self.obstacles):
            raise MazeError("targets and obstacles overlap")
        if self.start_cells is not None:
            for p in self.start_cells:
                if not self.inside(p):
                    raise MazeError(f"start cell {p} lies outside the grid")

    def inside(self, p: Coord) -> bool:
        return 0 <= p[0] < self.width and 0 <= p[1] < self.height

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def n_moves(self) -> int:
        return len(self.moves)

    @property
    def n_joint_states(self) -> int:
        return self.n_cells**self.n_agents

    @property
    def n_joint_actions(self) -> int:
        return self.n_moves**self.n_agents

    def target_reward(self, p: Coord) -> float | None:
        for t in self.targets:
            if t.pos == p:
                return t.reward
        return None

    def start_distribution(self) -> list[Coord]:
        """Cells a single agent may start in (uniform initial distribution)."""
        if self.start_cells is not None:
            return list(self.start_cells)
        blocked = {t.pos for t in self.targets} | set(self.obstacles)
        return [c for c in iter_cells(self) if c not in blocked]

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = [{"pos": list(t.pos), "reward": t.reward} for t in self.targets]
        d["obstacles"] = [list(p) for p in self.obstacles]
        d["moves"] = list(self.moves)
        if self.start_cells is not None:
            d["start_cells"] = [list(p) for p in self.start_cells]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MazeSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise MazeError(f"unknown maze fields: {sorted(unknown)}")
        for req in ("width", "height", "targets"):
            if req not in d:
                raise MazeError(f"maze document is missing required field {req!r}")
        try:
            d["targets"] = tuple(
                Target((int(t["pos"][0]), int(t["pos"][1])), float(t["reward"])) for t in d["targets"]
            )
            d["obstacles"] = tuple((int(p[0]), int(p[1])) for p in d.get("obstacles", ()))
            if d.get("start_cells") is not None:
                d["start_cells"] = tuple((int(p[0]), int(p[1])) for p in d["start_cells"])
            if "moves" in d:
                d["moves"] = tuple(d["moves"])
        except (KeyError, TypeError, IndexError) as exc:
            raise MazeError(f"malformed maze document: {exc}") from exc
        return cls(**d)


def load_maze(path: str | Path) -> MazeSpec:
    with open(path) as fh:
        return MazeSpec.from_dict(json.load(fh))


def save_maze(spec: MazeSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


# -- observations / actions ----------------------------------------------------


@dataclass(frozen=True)
class JointObservation:
    per_agent: tuple[Coord, ...]

    def __iter__(self):
        return iter(self.per_agent)


@dataclass(frozen=True)
class JointAction:
    per_agent: tuple[int, ...]


def iter_cells(spec: MazeSpec):
    for y in range(spec.height):
        for x in range(spec.width):
            yield (x, y)


def cell_index(spec: MazeSpec, p: Coord) -> int:
    return p[1] * spec.width + p[0]


def cell_at(spec: MazeSpec, idx: int) -> Coord:
    return (idx % spec.width, idx // spec.width)


def encode_cell(spec: MazeSpec, p: Coord) -> np.ndarray:
    """Feature vector of one agent's observation: coordinates scaled to [0, 1].

    ``x -> x / (W - 1)`` and ``y -> y / (H - 1)`` (a one-cell axis maps to 0).
    The map is a bijection between grid cells and the feature lattice.
    """
    sx = spec.width - 1 or 1
    sy = spec.height - 1 or 1
    return np.array([p[0] / sx, p[1] / sy], dtype=float)


def cell_features(spec: MazeSpec) -> np.ndarray:
    """Features of every cell, ordered by cell index."""
    return np.array([encode_cell(spec, c) for c in iter_cells(spec)])


def joint_state_index(spec: MazeSpec, obs: JointObservation | Sequence[Coord]) -> int:
    s = 0
    for p in obs:
        s = s * spec.n_cells + cell_index(spec, p)
    return s


def joint_state_cells(spec: MazeSpec, s: int) -> tuple[int, ...]:
    cells = []
    for _ in range(spec.n_agents):
        s, c = divmod(s, spec.n_cells)
        cells.append(c)
    return tuple(reversed(cells))


def joint_action_index(spec: MazeSpec, act: JointAction | Sequence[int]) -> int:
    a = 0
    per = act.per_agent if isinstance(act, JointAction) else act
    for ai in per:
        a = a * spec.n_moves + ai
    return a


def joint_action_parts(spec: MazeSpec, a: int) -> tuple[int, ...]:
    parts = []
    for _ in range(spec.n_agents):
        a, k = divmod(a, spec.n_moves)
        parts.append(k)
    return tuple(reversed(parts))


def enumerate_states(spec: MazeSpec, cap: int = DEFAULT_STATE_CAP) -> list[JointObservation]:
    """Every joint observation in joint-index order."""
    n = spec.n_joint_states
    if n > cap:
        raise MazeError(
            f"joint observation space has {n} states, above the cap of {cap}; "
            "use the empirical (sampling) mode instead"
        )
    return [
        JointObservation(tuple(cell_at(spec, c) for c in joint_state_cells(spec, s)))
        for s in range(n)
    ]


# -- dynamics ------------------------------------------------------------------


def is_terminal(spec: MazeSpec, obs: JointObservation | Sequence[Coord]) -> bool:
    return all(spec.target_reward(p) is not None for p in obs)


def step(spec: MazeSpec, obs: JointObservation, act: JointAction) -> tuple[JointObservation, float, bool]:
    if len(obs.per_agent) != spec.n_agents or len(act.per_agent) != spec.n_agents:
        raise MazeError(f"expected {spec.n_agents} agents in observation and action")
    for p in obs.per_agent:
        if not spec.inside(p):
            raise MazeError(f"observation {p} lies outside the grid")
    for a in act.per_agent:
        if not 0 <= a < spec.n_moves:
            raise MazeError(f"invalid action index {a}; move set has {spec.n_moves} actions")

    reward = 0.0
    new = []
    arrived = []
    for p, a in zip(obs.per_agent, act.per_agent):
        if spec.target_reward(p) is not None:
            new.append(p)
            arrived.append(False)
            continue
        dx, dy = MOVES[spec.moves[a]]
        q = (p[0] + dx, p[1] + dy)
        if not spec.inside(q):
            q = p
        if q in spec.obstacles:
            reward += spec.obstacle_penalty
        r = spec.target_reward(q)
        if r is not None:
            reward += r
        arrived.append(r is not None)
        new.append(q)

    if spec.n_agents > 1:
        if spec.group_bonus and all(arrived):
            reward += spec.group_bonus
        if spec.agent_collision_penalty:
            active = [q for q, p in zip(new, obs.per_agent) if spec.target_reward(q) is None]
            for q in set(active):
                if active.count(q) > 1:
                    reward += spec.agent_collision_penalty * active.count(q)
    nxt = JointObservation(tuple(new))
    return nxt, reward, is_terminal(spec, nxt)


def reward_bound(spec: MazeSpec) -> float:
    """Upper bound on |reward| of a single step."""
    rmax = max(abs(t.reward) for t in spec.targets)
    return spec.n_agents * (rmax + abs(spec.obstacle_penalty) + abs(spec.agent_collision_penalty)) + abs(
        spec.group_bonus
    )


@dataclass
class TabularModel:
    """Dense transition/reward tables of a maze over joint indices."""

    spec: MazeSpec
    next_state: np.ndarray  # (S, A) int
    reward: np.ndarray  # (S, A) float
    terminal: np.ndarray  # (S,) bool
    mu: np.ndarray  # (S,) initial distribution
    features: np.ndarray = field(repr=False)  # (n_cells, 2)

    @property
    def n_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def n_actions(self) -> int:
        return self.next_state.shape[1]

    def local_cells(self, agent: int) -> np.ndarray:
        """Cell index of ``agent`` for every joint state."""
        s = np.arange(self.n_states)
        k = self.spec.n_agents - 1 - agent
        return (s // self.spec.n_cells**k) % self.spec.n_cells

    def local_actions(self, agent: int) -> np.ndarray:
        a = np.arange(self.n_actions)
        k = self.spec.n_agents - 1 - agent
        return (a // self.spec.n_moves**k) % self.spec.n_moves


def build_model(spec: MazeSpec, cap: int = DEFAULT_STATE_CAP) -> TabularModel:
    states = enumerate_states(spec, cap)
    S, A = len(states), spec.n_joint_actions
    nxt = np.zeros((S, A), dtype=np.int64)
    rew = np.zeros((S, A))
    term = np.zeros(S, dtype=bool)
    actions = [JointAction(joint_action_parts(spec, a)) for a in range(A)]
    for s, obs in enumerate(states):
        if is_terminal(spec, obs):
            term[s] = True
            nxt[s] = s
            continue
        for a, act in enumerate(actions):
            o2, r, _ = step(spec, obs, act)
            nxt[s, a] = joint_state_index(spec, o2)
            rew[s, a] = r
    starts = [cell_index(spec, c) for c in spec.start_distribution()]
    if not starts:
        raise MazeError("no admissible start cells")
    single = np.zeros(spec.n_cells)
    single[starts] = 1.0 / len(starts)
    mu = single
    for _ in range(spec.n_agents - 1):
        mu = np.outer(mu, single).ravel()
    return TabularModel(spec, nxt, rew, term, mu, cell_features(spec))


# -- presets -------------------------------------------------------------------


def simple_maze(r1: float = 10.0, gamma: float = 0.99) -> MazeSpec:
    return MazeSpec(4, 4, (Target((0, 0), r1),), horizon=3, gamma=gamma, name="simple")


def medium_maze(r1: float = 10.0, r2: float = 5.0, gamma: float = 0.99) -> MazeSpec:
    return MazeSpec(
        8, 8, (Target((0, 0), r1),), obstacles=((2, 1), (1, 2)),
        obstacle_penalty=-r2, horizon=8, gamma=gamma, name="medium",
    )


def hard_maze(r1: float = 10.0, r2: float = 5.0, gamma: float = 0.99) -> MazeSpec:
    return MazeSpec(
        10, 10, (Target((0, 0), r1), Target((4, 4), r2)), obstacles=((2, 1), (1, 2)),
        obstacle_penalty=-r2, horizon=10, gamma=gamma, name="hard",
    )


def predator_prey(
    size: int = 4, r1: float = 10.0, r2: float = 5.0, bonus: float = 5.0, gamma: float = 0.99
) -> MazeSpec:
    mid = size // 2
    return MazeSpec(
        size, size, (Target((0, 0), r1), Target((mid, mid), r2)),
        obstacles=((1, 0),) if size >= 3 else (), obstacle_penalty=-r2,
        horizon=2 * size, n_agents=2, gamma=gamma, group_bonus=bonus, name=f"predator_prey_{size}",
    )


def random_maze(
    rng: np.random.Generator, width: int, height: int, n_agents: int = 1, n_obstacles: int = 1,
    r1: float = 10.0, r2: float = 5.0, gamma: float = 0.95, group_bonus: float = 0.0,
) -> MazeSpec:
    cells = [(x, y) for y in range(height) for x in range(width)]
    order = rng.permutation(len(cells))
    picks = [cells[i] for i in order]
    targets = [Target(picks[0], r1)]
    rest = picks[1:]
    if width * height >= 6:
        targets.append(Target(rest[0], r2))
        rest = rest[1:]
    obstacles = tuple(rest[:n_obstacles]) if len(rest) > n_obstacles + 1 else ()
    return MazeSpec(
        width, height, tuple(targets), obstacles=obstacles, obstacle_penalty=-r2,
        horizon=width + height, n_agents=n_agents, gamma=gamma, group_bonus=group_bonus,
        name=f"random_{width}x{height}",
    )


PRESETS = {
    "simple": simple_maze,
    "medium": medium_maze,
    "hard": hard_maze,
    "predator_prey": predator_prey,
}
