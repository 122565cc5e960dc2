"""Oracle critics (exact DP or tabular Q-learning), visitation measures and returns."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .env import MazeSpec, TabularModel, build_model

CRITIC_FORMAT = "rgmdt-critic"
CRITIC_VERSION = 1
TIE_TOL = 1e-9


class OracleError(ValueError):
    pass


@dataclass
class OracleCritic:
    q: np.ndarray  # (S, A) joint action values
    gamma: float
    provenance: dict = field(default_factory=dict)
    spec: MazeSpec | None = None

    def greedy(self) -> np.ndarray:
        return greedy_actions(self.q)

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.q).tobytes()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": CRITIC_FORMAT,
            "version": CRITIC_VERSION,
            "gamma": self.gamma,
            "provenance": self.provenance,
            "maze": self.spec.to_dict() if self.spec is not None else None,
            "q": self.q.tolist(),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "OracleCritic":
        with open(path) as fh:
            d = json.load(fh)
        if d.get("format") != CRITIC_FORMAT:
            raise OracleError(f"{path} is not a critic file")
        if d.get("version") != CRITIC_VERSION:
            raise OracleError(f"unsupported critic version {d.get('version')}")
        spec = MazeSpec.from_dict(d["maze"]) if d.get("maze") else None
        return cls(np.array(d["q"], dtype=float), float(d["gamma"]), d.get("provenance", {}), spec)


def greedy_actions(q: np.ndarray, tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax; near-ties (within ``tol``) go to the lowest index."""
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tol, axis=1)


def _transition_matrix(model: TabularModel, pi: np.ndarray) -> sp.csr_matrix:
    S = model.n_states
    cols = model.next_state[np.arange(S), pi]
    return sp.csr_matrix((np.ones(S), (np.arange(S), cols)), shape=(S, S))


def policy_values(model: TabularModel, pi: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """V^pi for a deterministic joint policy (exact linear solve)."""
    gamma = model.spec.gamma if gamma is None else gamma
    S = model.n_states
    P = _transition_matrix(model, pi)
    r = model.reward[np.arange(S), pi]
    A = (sp.identity(S, format="csc") - gamma * P.tocsc())
    return np.asarray(spla.spsolve(A, r)).reshape(S)


def bellman_residual(model: TabularModel, q: np.ndarray, gamma: float) -> float:
    v = q.max(axis=1)
    target = model.reward + gamma * np.where(model.terminal[:, None], 0.0, v[model.next_state])
    target[model.terminal] = 0.0
    return float(np.abs(target - q).max())


def q_from_values(model: TabularModel, v: np.ndarray, gamma: float) -> np.ndarray:
    q = model.reward + gamma * v[model.next_state]
    q[model.terminal] = 0.0
    return q


def solve_exact(
    spec: MazeSpec | TabularModel, finite_horizon: bool = False, max_iter: int = 1000
) -> OracleCritic:
    """Optimal joint action values by policy iteration (or backward induction).

    With ``finite_horizon`` the Bellman recursion is unrolled ``spec.horizon``
    stages and the first-stage table is returned.
    """
    model = spec if isinstance(spec, TabularModel) else build_model(spec)
    spec = model.spec
    gamma = spec.gamma
    if finite_horizon:
        v = np.zeros(model.n_states)
        for _ in range(spec.horizon):
            q = q_from_values(model, v, gamma)
            v = q.max(axis=1)
        return OracleCritic(q, gamma, {"kind": "exact_dp", "finite_horizon": spec.horizon}, spec)

    pi = np.zeros(model.n_states, dtype=np.int64)
    for _ in range(max_iter):
        v = policy_values(model, pi, gamma)
        q = q_from_values(model, v, gamma)
        new = greedy_actions(q, tol=1e-12)
        if np.array_equal(new, pi) or np.all(q[np.arange(len(pi)), pi] >= q.max(axis=1) - 1e-12):
            break
        pi = new
    # a few sweeps of value iteration polish the fixed point to machine precision
    for _ in range(5):
        q = q_from_values(model, q.max(axis=1), gamma)
    res = bellman_residual(model, q, gamma)
    if res > 1e-9:
        raise OracleError(f"exact DP did not converge (Bellman residual {res:.3e})")
    return OracleCritic(q, gamma, {"kind": "exact_dp", "bellman_residual": res}, spec)


def learn_q(
    spec: MazeSpec | TabularModel, episodes: int, alpha: float = 0.1, eps_explore: float = 0.2, seed: int = 0
) -> OracleCritic:
    """Centralized tabular Q-learning with epsilon-greedy exploration.

    Episodes start from the maze's initial distribution and are cut at the
    horizon; cut-offs bootstrap (only true terminal states do not).
    """
    if not 0.0 < alpha <= 1.0:
        raise OracleError("alpha must lie in (0, 1]")
    if not 0.0 <= eps_explore <= 1.0:
        raise OracleError("eps_explore must lie in [0, 1]")
    if episodes < 0:
        raise OracleError("episodes must be non-negative")
    model = spec if isinstance(spec, TabularModel) else build_model(spec)
    spec = model.spec
    rng = np.random.default_rng(seed)
    q = np.zeros((model.n_states, model.n_actions))
    gamma = spec.gamma
    starts = rng.choice(model.n_states, size=episodes, p=model.mu) if episodes else []
    for s in starts:
        s = int(s)
        for _ in range(spec.horizon):
            if rng.random() < eps_explore:
                a = int(rng.integers(model.n_actions))
            else:
                row = q[s]
                a = int(np.argmax(row >= row.max() - TIE_TOL))
            s2 = int(model.next_state[s, a])
            r = model.reward[s, a]
            boot = 0.0 if model.terminal[s2] else gamma * q[s2].max()
            q[s, a] += alpha * (r + boot - q[s, a])
            s = s2
            if model.terminal[s]:
                break
    prov = {"kind": "q_learning", "seed": seed, "episodes": episodes, "alpha": alpha, "eps_explore": eps_explore}
    return OracleCritic(q, gamma, prov, spec)


# -- visitation ----------------------------------------------------------------


@dataclass
class VisitationDistribution:
    """Discounted visitation over joint observations plus per-agent views."""

    model: TabularModel = field(repr=False)
    d_obs: np.ndarray
    mode: str = "exact"

    def marginal(self, agent: int) -> np.ndarray:
        """d(o_j) over the agent's cells."""
        cells = self.model.local_cells(agent)
        return np.bincount(cells, weights=self.d_obs, minlength=self.model.spec.n_cells)

    def conditional(self, agent: int) -> np.ndarray:
        """d(o_-j | o_j) as an (n_cells, n_rest) matrix; zero-mass rows are uniform."""
        spec = self.model.spec
        own = self.model.local_cells(agent)
        rest = other_index(self.model, agent)
        n_rest = spec.n_cells ** (spec.n_agents - 1)
        joint = np.zeros((spec.n_cells, n_rest))
        np.add.at(joint, (own, rest), self.d_obs)
        mass = joint.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            cond = np.where(mass > 0, joint / np.where(mass > 0, mass, 1.0), 1.0 / n_rest)
        return cond

    def label_mass(self, agent: int, labels: dict[int, int]) -> dict[int, float]:
        """d(l) = sum of d(o_j) over the cells carrying label l."""
        m = self.marginal(agent)
        out: dict[int, float] = {}
        for cell, lab in labels.items():
            out[lab] = out.get(lab, 0.0) + float(m[cell])
        return out


def other_index(model: TabularModel, agent: int) -> np.ndarray:
    """Joint index of the other agents' cells (ascending agent order) per state."""
    spec = model.spec
    rest = np.zeros(model.n_states, dtype=np.int64)
    for k in range(spec.n_agents):
        if k == agent:
            continue
        rest = rest * spec.n_cells + model.local_cells(k)
    return rest


def visitation(
    model: TabularModel,
    policy: np.ndarray,
    mode: str = "exact",
    n_rollouts: int = 10_000,
    seed: int = 0,
    horizon: int | None = None,
) -> VisitationDistribution:
    """Discounted visitation d(o) = (1-gamma) sum_t gamma^t P(o_t = o).

    ``policy`` is a joint action index per joint state.  With ``horizon``
    the sum is truncated at that many steps and renormalized.
    """
    gamma = model.spec.gamma
    pi = np.asarray(policy, dtype=np.int64)
    nxt = model.next_state[np.arange(model.n_states), pi]
    if mode == "exact":
        if horizon is not None:
            d = np.zeros(model.n_states)
            m = model.mu.copy()
            w = 1.0
            for _ in range(horizon):
                d += w * m
                m = np.bincount(nxt, weights=m, minlength=model.n_states)
                w *= gamma
            d /= d.sum()
        else:
            P = _transition_matrix(model, pi)
            A = (sp.identity(model.n_states, format="csc") - gamma * P.T.tocsc())
            d = np.asarray(spla.spsolve(A, (1 - gamma) * model.mu)).reshape(-1)
            res = np.abs(A @ d - (1 - gamma) * model.mu).max()
            if res > 1e-9:
                raise OracleError(f"visitation solve residual {res:.3e}")
            d = np.clip(d, 0.0, None)
            d /= d.sum()
        return VisitationDistribution(model, d, "exact")
    if mode == "empirical":
        if n_rollouts <= 0:
            raise OracleError("empirical visitation needs n_rollouts > 0")
        rng = np.random.default_rng(seed)
        s = rng.choice(model.n_states, size=n_rollouts, p=model.mu)
        steps = horizon if horizon is not None else int(np.ceil(np.log(1e-12) / np.log(gamma)))
        counts = np.zeros(model.n_states)
        w = 1.0
        for _ in range(steps):
            counts += w * np.bincount(s, minlength=model.n_states)
            s = nxt[s]
            w *= gamma
        return VisitationDistribution(model, counts / counts.sum(), "empirical")
    raise OracleError(f"unknown visitation mode {mode!r}")


# -- returns -------------------------------------------------------------------


def discounted_return(model: TabularModel, policy: np.ndarray) -> float:
    """J = (1 - gamma) E_mu[V^pi], the normalized discounted return."""
    v = policy_values(model, np.asarray(policy, dtype=np.int64))
    return float((1 - model.spec.gamma) * model.mu @ v)


def episodic_return(model: TabularModel, policy: np.ndarray, horizon: int | None = None) -> float:
    """Exact expected undiscounted episode reward over ``horizon`` steps from mu."""
    T = model.spec.horizon if horizon is None else horizon
    pi = np.asarray(policy, dtype=np.int64)
    idx = np.arange(model.n_states)
    nxt = model.next_state[idx, pi]
    r = model.reward[idx, pi]
    m = model.mu.copy()
    total = 0.0
    for _ in range(T):
        total += float(m @ r)
        m = np.bincount(nxt, weights=m, minlength=model.n_states)
    return total


def rollout_returns(model: TabularModel, policy: np.ndarray, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted episode rewards of ``episodes`` rollouts with sampled starts."""
    rng = np.random.default_rng(seed)
    pi = np.asarray(policy, dtype=np.int64)
    idx = np.arange(model.n_states)
    nxt = model.next_state[idx, pi]
    r = model.reward[idx, pi]
    s = rng.choice(model.n_states, size=episodes, p=model.mu)
    out = np.zeros(episodes)
    for _ in range(model.spec.horizon):
        out += r[s]
        s = nxt[s]
    return out


def joint_policy(model: TabularModel, local_actions: list[np.ndarray]) -> np.ndarray:
    """Combine per-agent action-by-cell tables into a joint action per state.

    An entry of ``None`` in ``local_actions`` is not allowed; callers fill
    missing agents from the oracle via :func:`mixed_policy`.
    """
    spec = model.spec
    a = np.zeros(model.n_states, dtype=np.int64)
    for j in range(spec.n_agents):
        a = a * spec.n_moves + np.asarray(local_actions[j])[model.local_cells(j)]
    return a


def mixed_policy(model: TabularModel, oracle_pi: np.ndarray, local_actions: list[np.ndarray | None]) -> np.ndarray:
    """Joint policy where agents with a table act from it and the rest follow the oracle."""
    spec = model.spec
    a = np.zeros(model.n_states, dtype=np.int64)
    for j in range(spec.n_agents):
        if local_actions[j] is None:
            part = (oracle_pi // spec.n_moves ** (spec.n_agents - 1 - j)) % spec.n_moves
        else:
            part = np.asarray(local_actions[j])[model.local_cells(j)]
        a = a * spec.n_moves + part
    return a
