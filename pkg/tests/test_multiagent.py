import json

import numpy as np
import pytest

from rgmdt.env import MazeSpec, Target, build_model, predator_prey, simple_maze
from rgmdt.oracle import episodic_return, joint_policy, mixed_policy, rollout_returns, solve_exact, visitation
from rgmdt.qvec import build_vectors, oracle_local_actions
from rgmdt.multiagent import (
    GrowthSchedule,
    freeze_and_evaluate,
    grow_joint,
    tree_digest,
    tree_policy,
    tree_tables,
    vectors_digest,
)
from rgmdt.tree import DecisionTree, Node, grow


def corner_pair():
    # optimal play is coordinate independent: each agent heads for (0,0), the richer target
    return MazeSpec(2, 2, (Target((0, 0), 10.0), Target((1, 0), 5.0)), n_agents=2, group_bonus=0.0, horizon=4)


def lookup_tree(actions):
    """Depth-2 axis tree giving one leaf per cell of a 2x2 grid."""
    a = list(actions)  # indexed by cell y*2+x
    nodes = [Node(0, 0, 1, w=np.array([0.0, 1.0]), p=0.5, left=1, right=2),
             Node(1, 1, 2, w=np.array([1.0, 0.0]), p=0.5, left=3, right=4),
             Node(2, 1, 3, w=np.array([1.0, 0.0]), p=0.5, left=5, right=6),
             Node(3, 2, 4, action=a[0]), Node(4, 2, 5, action=a[1]),
             Node(5, 2, 6, action=a[2]), Node(6, 2, 7, action=a[3])]
    return DecisionTree(nodes, max_leaves=4)


def best_joint_local_return(model):
    """Exhaustive search over every pair of deterministic local policies."""
    spec = model.spec
    best = -np.inf
    tables = [np.array(t) for t in np.ndindex(*(spec.n_moves,) * spec.n_cells)]
    for t0 in tables:
        for t1 in tables:
            best = max(best, episodic_return(model, joint_policy(model, [t0, t1])))
    return best


def test_single_agent_matches_grow():
    model = build_model(simple_maze())
    critic = solve_exact(model)
    data = build_vectors(model, critic, visitation(model, critic.greedy()), 0)
    direct = grow(data, 4, seed=2, action_names=model.spec.moves)
    joint = grow_joint(model, critic, 4, seed=2)
    assert len(joint) == 1
    assert joint[0].to_dict() == direct.to_dict()


def test_coordinate_independent_toy_reaches_oracle():
    model = build_model(corner_pair())
    critic = solve_exact(model)
    oracle = episodic_return(model, critic.greedy())
    assert best_joint_local_return(model) == pytest.approx(oracle)
    trees = grow_joint(model, critic, 2, seed=0)
    assert [t.depth for t in trees] == [1, 1]
    assert episodic_return(model, tree_policy(model, trees)) == pytest.approx(oracle)


def test_leaf_budget_and_log(tmp_path):
    model = build_model(predator_prey())
    critic = solve_exact(model)
    sched = GrowthSchedule(2, 4)
    trees = grow_joint(model, critic, 4, seed=1, schedule=sched, checkpoint_dir=tmp_path)
    assert all(t.n_leaves <= 4 for t in trees)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["iteration_00.json", "iteration_01.json", "iteration_02.json"]
    for k, name in enumerate(files):
        doc = json.loads((tmp_path / name).read_text())
        assert all(t is None or sum(n["kind"] == "leaf" for n in t["nodes"]) <= min(4, 2 ** (k + 1))
                   for t in doc["trees"])
    first = [r for r in sched.conditioning if r["iteration"] == 0]
    assert all(r["conditioning"] == "oracle" for r in first)
    later = [r for r in sched.conditioning if r["iteration"] > 0]
    assert all(r["conditioning"] == "trees" for r in later)


def test_last_agent_vectors_rebuild_from_returned_trees(tmp_path):
    model = build_model(predator_prey())
    critic = solve_exact(model)
    sched = GrowthSchedule(2, 4)
    trees = grow_joint(model, critic, 4, seed=0, schedule=sched, checkpoint_dir=tmp_path)
    last = sched.conditioning[-1]
    assert last["agent"] == 1
    # agent 1 saw agent 0's final tree and its own tree from the previous iteration
    prev = json.loads((tmp_path / "iteration_01.json").read_text())["trees"][1]
    tables = [trees[0].predict(model.features), DecisionTree.from_dict(prev).predict(model.features)]
    vis = visitation(model, mixed_policy(model, critic.greedy(), tables))
    data = build_vectors(model, critic, vis, 1, others=tables, own_actions=tables[1])
    assert vectors_digest(data) == last["vectors"]
    assert last["others"][0]["tree"] == tree_digest(trees[0])


def test_unconditioned_and_shuffled_orders_run():
    model = build_model(predator_prey())
    critic = solve_exact(model)
    a = grow_joint(model, critic, 2, seed=0, conditioned=False)
    b = grow_joint(model, critic, 2, seed=0, agent_order="shuffle")
    assert len(a) == len(b) == 2
    with pytest.raises(ValueError):
        grow_joint(model, critic, 2, agent_order="random")
    with pytest.raises(ValueError):
        grow_joint(model, critic, 2, mode="global")


def test_grow_joint_deterministic():
    model = build_model(predator_prey())
    critic = solve_exact(model)
    a = grow_joint(model, critic, 4, seed=3)
    b = grow_joint(model, critic, 4, seed=3)
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]


def test_freeze_and_evaluate_contracts():
    # no reward anywhere: any tree pair returns 0
    stay = DecisionTree.single_leaf(0, max_leaves=2)
    dead = build_model(MazeSpec(2, 2, (Target((0, 1), 0.0),), n_agents=2, group_bonus=0.0))
    assert freeze_and_evaluate([stay, stay], dead, 200, 0) == 0.0

    model = build_model(corner_pair())
    critic = solve_exact(model)
    vis = visitation(model, critic.greedy())
    lookup = [lookup_tree(oracle_local_actions(model, critic, vis, j)) for j in range(2)]
    got = freeze_and_evaluate(lookup, model, 500, seed=4)
    assert got == freeze_and_evaluate(lookup, model, 500, seed=4)
    assert got == pytest.approx(rollout_returns(model, critic.greedy(), 500, 4).mean())
    with pytest.raises(ValueError):
        tree_tables(model, lookup[:1])
