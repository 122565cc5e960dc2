"""Iterative joint growth of one decision tree per agent.

Each iteration advances every agent's tree by one breadth-first stage.
Before an agent's stage its action-value vectors are rebuilt under the
visitation of the current joint policy: iteration 0 conditions on the
oracle, later iterations on the freshest trees of the other agents.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import MazeSpec, TabularModel, build_model
from .oracle import OracleCritic, joint_policy, mixed_policy, rollout_returns, visitation
from .qvec import ActionValueVectors, build_vectors
from .svm import SvmConfig
from .tree import ClusterConfig, DecisionTree, assign_leaf_actions, grow, grow_stage, max_growth_depth, new_tree


def tree_digest(tree: DecisionTree) -> str:
    return hashlib.sha256(json.dumps(tree.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def vectors_digest(v: ActionValueVectors) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(v.cells, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(v.components, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class GrowthSchedule:
    n_agents: int
    L: int
    iteration: int = 0
    trees: list = field(default_factory=list)
    conditioning: list = field(default_factory=list)  # one record per (iteration, agent)
    frozen: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "L": self.L,
            "iteration": self.iteration,
            "frozen": list(self.frozen),
            "conditioning": self.conditioning,
            "trees": [t.to_dict() if t is not None else None for t in self.trees],
        }


def _agent_order(n: int, k: int, order: str, seed: int) -> list[int]:
    if order == "ascending":
        return list(range(n))
    if order == "shuffle":
        return [int(a) for a in np.random.default_rng([seed, k]).permutation(n)]
    raise ValueError(f"unknown agent order {order!r}")


def _growth_vectors(data: ActionValueVectors, target_cells: list[int]) -> ActionValueVectors:
    """Vectors the tree is grown on: nonzero, and not on a target where the agent is frozen.

    A frozen agent's own action is irrelevant, yet its discounted visitation
    piles up on the target cell and would dominate the clustering.
    """
    keep = (data.norms > 1e-12) & ~np.isin(data.cells, target_cells)
    if not keep.any():
        keep = data.norms > 1e-12
    return data.subset(keep) if keep.any() else data


def grow_joint(
    spec: MazeSpec | TabularModel,
    critic: OracleCritic,
    L: int,
    cfg: SvmConfig | None = None,
    ccfg: ClusterConfig | None = None,
    seed: int = 0,
    conditioned: bool = True,
    agent_order: str = "ascending",
    purity_stop: float | None = None,
    checkpoint_dir: str | Path | None = None,
    schedule: GrowthSchedule | None = None,
    mode: str = "per-node",
) -> list[DecisionTree]:
    """Grow one tree per agent, each conditioned on the others' current trees.

    ``conditioned=False`` is the independent-trees ablation: every agent's
    vectors are built against the oracle under the oracle's visitation.
    Pass a :class:`GrowthSchedule` to receive the conditioning log.
    """
    model = spec if isinstance(spec, TabularModel) else build_model(spec)
    spec = model.spec
    cfg = cfg or SvmConfig()
    ccfg = ccfg or ClusterConfig()
    names = spec.moves
    n = spec.n_agents
    sched = schedule if schedule is not None else GrowthSchedule(n, L)
    sched.n_agents, sched.L = n, L

    if n == 1:
        vis = visitation(model, critic.greedy())
        data = build_vectors(model, critic, vis, 0)
        tree = grow(data, L, cfg, ccfg, seed, mode=mode, action_names=names, purity_stop=purity_stop)
        sched.trees = [tree]
        sched.frozen = [False]
        sched.conditioning.append({"iteration": 0, "agent": 0, "conditioning": "oracle",
                                   "vectors": vectors_digest(data), "others": []})
        return [tree]

    if mode != "per-node":
        raise ValueError("joint growth advances trees stage by stage; only per-node mode applies")
    oracle_pi = critic.greedy()
    oracle_vis = visitation(model, oracle_pi)
    target_cells = [y * spec.width + x for (x, y) in (t.pos for t in spec.targets)]
    trees: list[DecisionTree | None] = [None] * n
    tables: list[np.ndarray | None] = [None] * n
    frozen = [False] * n
    depth_cap = max_growth_depth(L)
    for k in range(depth_cap):
        budget = min(L, 2 ** (k + 1))
        for j in _agent_order(n, k, agent_order, seed):
            use_trees = conditioned and k > 0
            if use_trees:
                vis = visitation(model, mixed_policy(model, oracle_pi, tables))
                data = build_vectors(model, critic, vis, j, others=tables, own_actions=tables[j])
            else:
                vis = oracle_vis if not conditioned else visitation(model, mixed_policy(model, oracle_pi, tables))
                data = build_vectors(model, critic, vis, j)
            usable = _growth_vectors(data, target_cells)
            if trees[j] is None:
                trees[j] = new_tree(usable, L, names, agent=j)
            log: list = []
            if frozen[j]:
                assign_leaf_actions(trees[j], usable)
            else:
                agent_seed = int(np.random.SeedSequence([seed, j]).generate_state(1)[0])
                grow_stage(trees[j], usable, budget, cfg, ccfg, agent_seed, k, depth_cap, purity_stop, log)
                if log and all(r.outcome in ("pure", "too_small") for r in log):
                    frozen[j] = True
            tables[j] = trees[j].predict(model.features)
            sched.conditioning.append({
                "iteration": k,
                "agent": j,
                "conditioning": "trees" if use_trees else "oracle",
                "vectors": vectors_digest(data),
                "others": [
                    {"agent": i, "tree": tree_digest(trees[i]) if use_trees else None}
                    for i in range(n) if i != j
                ],
                "n_leaves": trees[j].n_leaves,
                "frozen": frozen[j],
            })
        sched.iteration = k
        sched.trees = list(trees)
        sched.frozen = list(frozen)
        if checkpoint_dir is not None:
            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"iteration_{k:02d}.json").write_text(json.dumps(sched.to_dict(), sort_keys=True) + "\n")
    return list(trees)


def tree_tables(model: TabularModel, trees: list[DecisionTree]) -> list[np.ndarray]:
    if len(trees) != model.spec.n_agents:
        raise ValueError(f"need one tree per agent ({model.spec.n_agents}), got {len(trees)}")
    return [t.predict(model.features) for t in trees]


def tree_policy(model: TabularModel, trees: list[DecisionTree]) -> np.ndarray:
    """Joint action per joint state when every agent follows its tree."""
    return joint_policy(model, tree_tables(model, trees))


def freeze_and_evaluate(trees: list[DecisionTree], spec: MazeSpec | TabularModel, episodes: int, seed: int) -> float:
    """Mean episode reward of the joint tree policy over sampled rollouts."""
    model = spec if isinstance(spec, TabularModel) else build_model(spec)
    return float(rollout_returns(model, tree_policy(model, trees), episodes, seed).mean())
