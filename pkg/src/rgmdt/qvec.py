"""Action-value vectors of local observations.

For agent ``j`` and local observation ``o_j`` the vector stacks joint
action-values over the other agents' observations, each weighted by the
conditional visitation ``d(o_-j | o_j)``:

* iteration 0 (others follow the oracle): one entry per ``(o_-j, a_-j)``
  with ``a_j`` fixed to the oracle's choice for ``o_j``;
* later iterations (others follow trees): one entry per ``o_-j``, the other
  agents' actions being whatever their trees pick.

Components are enumerated with ``o_-j`` (joint index of the other agents'
cells, ascending agent order) as the major axis and ``a_-j`` as the minor axis.
For a single agent the vector is simply ``[Q(o, a) for a]``.

Besides the clustering vector every set carries the "free" block
``F[o_j, o_-j, a_j]`` (own action left open, others' behavior substituted),
which is what leaf actions and the return-gap certificate are computed from.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import TabularModel
from .oracle import OracleCritic, VisitationDistribution, greedy_actions, other_index


class QVecError(ValueError):
    pass


@dataclass(frozen=True)
class ActionValueVector:
    agent: int
    obs: int  # cell index
    components: np.ndarray
    a_j_source: str
    norm: float


@dataclass
class ActionValueVectors:
    agent: int
    cells: np.ndarray  # (m,) cell index of each vector
    features: np.ndarray  # (m, 2)
    components: np.ndarray  # (m, dim)
    free: np.ndarray  # (m, n_rest, n_own_actions)
    weights: np.ndarray  # (m,) d(o_j)
    source: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.norms = np.linalg.norm(self.components, axis=1)

    def __len__(self) -> int:
        return len(self.cells)

    def __getitem__(self, i: int) -> ActionValueVector:
        return ActionValueVector(self.agent, int(self.cells[i]), self.components[i], self.source, float(self.norms[i]))

    @property
    def action_values(self) -> np.ndarray:
        """Expected value of each own action at each observation, others' behavior fixed."""
        return self.free.sum(axis=1)

    @property
    def free_flat(self) -> np.ndarray:
        return self.free.reshape(len(self.cells), -1)

    def subset(self, mask: np.ndarray) -> "ActionValueVectors":
        return ActionValueVectors(
            self.agent, self.cells[mask], self.features[mask], self.components[mask],
            self.free[mask], self.weights[mask], self.source, dict(self.meta),
        )

    def nonzero(self, tol: float = 1e-12) -> "ActionValueVectors":
        return self.subset(self.norms > tol)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", "f0", "f1", "weight"] + [f"component_{k}" for k in range(self.components.shape[1])])
            for i in range(len(self)):
                w.writerow(
                    [int(self.cells[i]), repr(float(self.features[i, 0])), repr(float(self.features[i, 1])),
                     repr(float(self.weights[i]))] + [repr(float(x)) for x in self.components[i]]
                )


def _q_tensor(model: TabularModel, q: np.ndarray, agent: int) -> np.ndarray:
    """Q reshaped to (o_j, o_-j, a_j, a_-j)."""
    spec = model.spec
    C, Aj = spec.n_cells, spec.n_moves
    R = C ** (spec.n_agents - 1)
    Ar = Aj ** (spec.n_agents - 1)
    own_s = model.local_cells(agent)
    rest_s = other_index(model, agent)
    aj = model.local_actions(agent)
    ar = np.zeros(model.n_actions, dtype=np.int64)
    for k in range(spec.n_agents):
        if k != agent:
            ar = ar * spec.n_moves + model.local_actions(k)
    t = np.zeros((C, R, Aj, Ar))
    t[own_s[:, None], rest_s[:, None], aj[None, :], ar[None, :]] = q
    return t


def _rest_actions_from_joint(model: TabularModel, joint_pi: np.ndarray, agent: int) -> np.ndarray:
    """Other agents' joint action index (minor axis) chosen by ``joint_pi`` at each state."""
    spec = model.spec
    ar = np.zeros(model.n_states, dtype=np.int64)
    for k in range(spec.n_agents):
        if k != agent:
            part = (joint_pi // spec.n_moves ** (spec.n_agents - 1 - k)) % spec.n_moves
            ar = ar * spec.n_moves + part
    return ar


def oracle_local_actions(model: TabularModel, critic: OracleCritic, visit: VisitationDistribution, agent: int) -> np.ndarray:
    """a_j*(o_j) = argmax_{a_j} sum_{o_-j} d(o_-j|o_j) max_{a_-j} Q(o, a_j, a_-j), per cell."""
    t = _q_tensor(model, critic.q, agent)
    cond = visit.conditional(agent)
    val = np.einsum("cr,cra->ca", cond, t.max(axis=3))
    return greedy_actions(val)


def build_vectors(
    model: TabularModel,
    critic: OracleCritic,
    visit: VisitationDistribution,
    agent: int,
    others: list[np.ndarray | None] | None = None,
    own_actions: np.ndarray | None = None,
) -> ActionValueVectors:
    """Action-value vectors for every reachable local observation of ``agent``.

    ``others`` is ``None`` for oracle conditioning, otherwise a list (one entry
    per agent, the entry for ``agent`` ignored) of action-by-cell tables taken
    from the other agents' current trees.  ``own_actions`` fixes ``a_j`` in
    the tree-conditioned vectors; the oracle choice is used when absent.
    """
    spec = model.spec
    if critic.q.shape != (model.n_states, model.n_actions):
        raise QVecError(
            f"critic table {critic.q.shape} does not match maze ({model.n_states}, {model.n_actions})"
        )
    if not 0 <= agent < spec.n_agents:
        raise QVecError(f"agent index {agent} out of range")
    n = spec.n_agents
    C = spec.n_cells
    R = C ** (n - 1)
    t = _q_tensor(model, critic.q, agent)  # (C, R, Aj, Ar)
    cond = visit.conditional(agent)  # (C, R)
    marg = visit.marginal(agent)
    cells = np.flatnonzero(marg > 0)

    if n == 1:
        comps = t[:, 0, :, 0]
        free = t[:, :, :, 0]
        source = "oracle_argmax"
    elif others is None:
        a_star = oracle_local_actions(model, critic, visit, agent)
        comps = (t[np.arange(C), :, a_star, :] * cond[:, :, None]).reshape(C, -1)
        # others' actions under the oracle at each joint state
        ar_state = _rest_actions_from_joint(model, critic.greedy(), agent)
        ar_grid = np.zeros((C, R), dtype=np.int64)
        ar_grid[model.local_cells(agent), other_index(model, agent)] = ar_state
        free = np.take_along_axis(t, ar_grid[:, :, None, None], axis=3)[..., 0] * cond[:, :, None]
        source = "oracle_argmax"
    else:
        if len(others) != n:
            raise QVecError("others must hold one entry per agent")
        ar = np.zeros(R, dtype=np.int64)
        rest_cells = _rest_cells(spec, agent)
        for pos, k in enumerate(a for a in range(n) if a != agent):
            tab = others[k]
            if tab is None:
                raise QVecError(f"agent {k} has no tree to condition on")
            tab = np.asarray(tab)
            if tab.shape != (C,):
                raise QVecError(f"action table of agent {k} has shape {tab.shape}, expected ({C},)")
            ar = ar * spec.n_moves + tab[rest_cells[:, pos]]
        if own_actions is None:
            a_j = oracle_local_actions(model, critic, visit, agent)
            source = "oracle_argmax"
        else:
            a_j = np.asarray(own_actions)
            source = "dt_policy"
        free = np.take_along_axis(t, np.broadcast_to(ar[None, :, None, None], (C, R, t.shape[2], 1)), axis=3)[..., 0]
        free = free * cond[:, :, None]
        comps = free[np.arange(C), :, a_j]
    comps = np.ascontiguousarray(comps[cells])
    return ActionValueVectors(
        agent, cells, model.features[cells], comps, np.ascontiguousarray(free[cells]), marg[cells], source,
        {"conditioning": "oracle" if others is None or n == 1 else "trees", "visitation_mode": visit.mode},
    )


def _rest_cells(spec, agent: int) -> np.ndarray:
    """(R, n-1) table of the other agents' cells for every rest index."""
    n = spec.n_agents
    R = spec.n_cells ** (n - 1)
    r = np.arange(R)
    cols = []
    for k in range(n - 1):
        cols.append((r // spec.n_cells ** (n - 2 - k)) % spec.n_cells)
    return np.stack(cols, axis=1) if cols else np.zeros((R, 0), dtype=np.int64)


def build_vectors_sampled(
    model: TabularModel,
    critic: OracleCritic,
    visit: VisitationDistribution,
    agent: int,
    k1: int = 4096,
    k2: int = 32,
    seed: int = 0,
) -> ActionValueVectors:
    """Sampling approximation of the oracle-conditioned vectors.

    Draws ``k1`` joint observations from the visitation measure (a stand-in
    for replay-buffer transitions), keeps the ``k2`` most frequent
    observations of the other agents and weights them by their empirical
    frequency given ``o_j``.  Opponent actions come from the oracle.
    """
    spec = model.spec
    rng = np.random.default_rng(seed)
    states = rng.choice(model.n_states, size=k1, p=visit.d_obs)
    own = model.local_cells(agent)[states]
    rest = other_index(model, agent)[states]
    R = spec.n_cells ** (spec.n_agents - 1)
    freq = np.bincount(rest, minlength=R)
    top = np.argsort(-freq, kind="stable")[: min(k2, int((freq > 0).sum()))]
    top = np.sort(top)
    t = _q_tensor(model, critic.q, agent)
    C = spec.n_cells
    counts = np.zeros((C, R))
    np.add.at(counts, (own, rest), 1.0)
    counts = counts[:, top]
    tot = counts.sum(axis=1, keepdims=True)
    cond = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    a_star = oracle_local_actions(model, critic, visit, agent)
    ar_state = _rest_actions_from_joint(model, critic.greedy(), agent)
    ar_grid = np.zeros((C, R), dtype=np.int64)
    ar_grid[model.local_cells(agent), other_index(model, agent)] = ar_state
    ar_grid = ar_grid[:, top]
    tt = t[:, top]
    if spec.n_agents == 1:
        comps = tt[:, 0, :, 0]
    else:
        comps = (tt[np.arange(C), :, a_star, :] * cond[:, :, None]).reshape(C, -1)
    free = np.take_along_axis(tt, ar_grid[:, :, None, None], axis=3)[..., 0] * cond[:, :, None]
    cells = np.flatnonzero(tot[:, 0] > 0)
    w = tot[cells, 0] / k1
    return ActionValueVectors(
        agent, cells, model.features[cells], np.ascontiguousarray(comps[cells]), np.ascontiguousarray(free[cells]),
        w, "oracle_argmax", {"conditioning": "oracle", "sampled": {"k1": k1, "k2": k2, "seed": seed}},
    )


def q_max(vectors: ActionValueVectors | list[ActionValueVector]) -> float:
    """Largest L2 norm among the vectors."""
    if isinstance(vectors, ActionValueVectors):
        if len(vectors) == 0:
            raise QVecError("q_max of an empty vector set")
        return float(vectors.norms.max())
    if not vectors:
        raise QVecError("q_max of an empty vector set")
    return max(v.norm for v in vectors)
