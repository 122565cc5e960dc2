import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgmdt.env import (
    JointAction,
    JointObservation,
    MazeError,
    MazeSpec,
    Target,
    build_model,
    cell_features,
    enumerate_states,
    hard_maze,
    joint_action_index,
    joint_action_parts,
    joint_state_cells,
    joint_state_index,
    load_maze,
    predator_prey,
    reward_bound,
    save_maze,
    simple_maze,
    step,
)

UP, DOWN, LEFT, RIGHT = range(4)


def obs(*cells):
    return JointObservation(tuple(cells))


def act(*a):
    return JointAction(tuple(a))


def test_step_onto_corner_target_pays_and_ends():
    spec = simple_maze()
    nxt, r, done = step(spec, obs((0, 1)), act(UP))
    assert nxt.per_agent == ((0, 0),)
    assert r == 10.0
    assert done


def test_wall_clamp_keeps_agent_in_place():
    spec = MazeSpec(4, 4, (Target((3, 3), 10.0),))
    nxt, r, done = step(spec, obs((0, 0)), act(LEFT))
    assert nxt.per_agent == ((0, 0),)
    assert r == 0.0 and not done


def test_obstacle_entry_costs_penalty():
    spec = hard_maze()
    nxt, r, done = step(spec, obs((2, 2)), act(UP))
    assert nxt.per_agent == ((2, 1),)
    assert r == -5.0
    assert not done


def test_invalid_action_rejected():
    with pytest.raises(MazeError, match="invalid action"):
        step(simple_maze(), obs((1, 1)), act(7))


def test_group_bonus_only_on_simultaneous_arrival():
    spec = predator_prey()
    _, r_both, done = step(spec, obs((0, 1), (2, 1)), act(UP, DOWN))
    assert done and r_both == 10.0 + 5.0 + 5.0
    _, r_one, done = step(spec, obs((0, 1), (3, 3)), act(UP, LEFT))
    assert not done and r_one == 10.0


def test_frozen_agent_stays_on_target():
    spec = predator_prey()
    nxt, r, _ = step(spec, obs((0, 0), (3, 3)), act(DOWN, LEFT))
    assert nxt.per_agent[0] == (0, 0)
    assert r == 0.0


@pytest.mark.parametrize("spec,count", [(simple_maze(), 16), (predator_prey(), 256)])
def test_enumerate_cardinality(spec, count):
    states = enumerate_states(spec)
    assert len(states) == count
    assert [joint_state_index(spec, s) for s in states] == list(range(count))


def test_enumerate_cap_points_to_empirical_mode():
    spec = MazeSpec(10, 10, (Target((0, 0), 1.0),), n_agents=3)
    with pytest.raises(MazeError, match="empirical"):
        enumerate_states(spec, cap=10**5)


def test_joint_index_roundtrip():
    spec = predator_prey()
    for s in range(spec.n_joint_states):
        cells = joint_state_cells(spec, s)
        assert joint_state_index(spec, [(c % 4, c // 4) for c in cells]) == s
    for a in range(spec.n_joint_actions):
        assert joint_action_index(spec, joint_action_parts(spec, a)) == a


def test_features_are_a_bijection_onto_unit_square():
    f = cell_features(hard_maze())
    assert f.min() == 0.0 and f.max() == 1.0
    assert len({tuple(r) for r in f}) == 100


def test_validation_errors():
    with pytest.raises(MazeError):
        MazeSpec(3, 3, (Target((5, 5), 1.0),))
    with pytest.raises(MazeError):
        MazeSpec(3, 3, (Target((1, 1), 1.0),), obstacles=((1, 1),))
    with pytest.raises(MazeError):
        MazeSpec(3, 3, (Target((1, 1), 1.0),), gamma=1.0)
    with pytest.raises(MazeError):
        MazeSpec(3, 3, (Target((1, 1), 1.0),), horizon=0)


def test_json_roundtrip_and_unknown_field(tmp_path):
    spec = hard_maze()
    save_maze(spec, tmp_path / "m.json")
    assert load_maze(tmp_path / "m.json") == spec
    d = spec.to_dict()
    d["colour"] = "red"
    (tmp_path / "bad.json").write_text(json.dumps(d))
    with pytest.raises(MazeError):
        load_maze(tmp_path / "bad.json")


def test_model_tables_match_step():
    spec = predator_prey()
    model = build_model(spec)
    rng = np.random.default_rng(3)
    states = enumerate_states(spec)
    for s in rng.integers(0, spec.n_joint_states, 60):
        for a in rng.integers(0, spec.n_joint_actions, 4):
            o = states[s]
            if all(spec.target_reward(p) is not None for p in o):
                continue
            nxt, r, _ = step(spec, o, JointAction(joint_action_parts(spec, int(a))))
            assert model.next_state[s, a] == joint_state_index(spec, nxt)
            assert model.reward[s, a] == pytest.approx(r)


def test_initial_distribution_excludes_targets_and_obstacles():
    spec = hard_maze()
    model = build_model(spec)
    assert model.mu.sum() == pytest.approx(1.0)
    for c in [(0, 0), (4, 4), (2, 1), (1, 2)]:
        assert model.mu[c[1] * 10 + c[0]] == 0.0


@settings(max_examples=200, deadline=None)
@given(
    x=st.integers(0, 3), y=st.integers(0, 3), x2=st.integers(0, 3), y2=st.integers(0, 3),
    a=st.integers(0, 3), b=st.integers(0, 3),
)
def test_step_pure_bounded_and_clamped(x, y, x2, y2, a, b):
    spec = predator_prey()
    o = obs((x, y), (x2, y2))
    first = step(spec, o, act(a, b))
    assert first == step(spec, o, act(a, b))
    nxt, r, _ = first
    assert all(0 <= p[0] < 4 and 0 <= p[1] < 4 for p in nxt.per_agent)
    assert abs(r) <= reward_bound(spec)
