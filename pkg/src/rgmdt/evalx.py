"""Evaluation harness: return gaps, bound certification, baselines, sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.tree import DecisionTreeClassifier

from .cluster import epsilon_terms
from .env import DEFAULT_STATE_CAP, MazeError, MazeSpec, TabularModel, build_model
from .multiagent import grow_joint, tree_digest, tree_policy
from .oracle import (
    OracleCritic,
    discounted_return,
    episodic_return,
    rollout_returns,
    visitation,
)
from .qvec import build_vectors
from .svm import SvmConfig
from .tree import ClusterConfig, DecisionTree, Node, assign_leaf_actions


class CertificationError(AssertionError):
    pass


def _model(spec: MazeSpec | TabularModel) -> TabularModel:
    return spec if isinstance(spec, TabularModel) else build_model(spec)


# -- epsilon over a tree's leaf partition ------------------------------------------


def partition_epsilon(model: TabularModel, critic: OracleCritic, trees: list[DecisionTree], policy=None,
                      free: bool = True) -> tuple[float, list[float], float]:
    """Visitation-weighted average cosine distance of each agent's vectors to its leaf centers.

    Weights come from the visitation of ``policy`` (the trees' own joint
    policy by default).  With ``free`` the vectors are the own-action-free
    blocks (``Q(o, .)`` for a single agent); otherwise the clustering vectors.
    Returns (mean epsilon over agents, per-agent epsilons, largest vector norm).
    """
    pi = tree_policy(model, trees) if policy is None else policy
    vis = visitation(model, pi)
    eps, qmax = [], 0.0
    for j, tree in enumerate(trees):
        data = build_vectors(model, critic, vis, j).nonzero()
        if len(data) == 0:
            eps.append(0.0)
            continue
        X = data.free_flat if free else data.components
        leaf_of = tree.route(data.features)
        _, labels = np.unique(leaf_of, return_inverse=True)
        e, *_ = epsilon_terms(X, data.weights, labels, int(labels.max()) + 1)
        eps.append(float(e))
        qmax = max(qmax, float(np.linalg.norm(X, axis=1).max()))
    return float(np.mean(eps)), eps, qmax


def nested_epsilon(model: TabularModel, critic: OracleCritic, trees: list[DecisionTree]) -> float:
    """Partition epsilon under the oracle's visitation, comparable across nested trees."""
    return partition_epsilon(model, critic, trees, policy=critic.greedy(), free=False)[0]


# -- certification ------------------------------------------------------------------


@dataclass
class ReturnGapReport:
    J_oracle: float
    J_tree: float
    gap: float
    epsilon: float
    L: int
    n: int
    q_max: float
    bound_explicit: float
    bound_theorem_form: float
    holds: bool
    certified: bool
    metric_mode: str = "discounted"
    epsilon_per_agent: list = field(default_factory=list)
    epsilon_stages: list = field(default_factory=list)
    epsilon_stage_aggregate: float | None = None
    episodic_oracle: float | None = None
    episodic_tree: float | None = None
    seeds: list = field(default_factory=list)
    episodes: int = 0
    hashes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")


def bound_explicit(n: int, q_max: float, epsilon: float) -> float:
    return n * q_max * math.sqrt(2.0 * max(epsilon, 0.0))


def bound_theorem_form(n: int, q_max: float, epsilon: float, L: int) -> float:
    denom = math.log2(L + 1) - 1
    return n * q_max * math.sqrt(max(epsilon, 0.0) / denom) if denom > 0 else math.inf


def certify_bound(
    spec: MazeSpec | TabularModel,
    critic: OracleCritic,
    trees: list[DecisionTree],
    stage_log: list | None = None,
    raise_on_violation: bool = False,
    tol: float = 1e-12,
) -> ReturnGapReport:
    """Exact return gap of the tree policy against ``n * q_max * sqrt(2 eps)``.

    J is the normalized discounted return under the initial distribution.
    If the joint state space cannot be enumerated the caller should use
    :func:`advisory_report` instead.
    """
    model = _model(spec)
    n = model.spec.n_agents
    pi_t = tree_policy(model, trees)
    pi_o = critic.greedy()
    j_o = discounted_return(model, pi_o)
    j_t = discounted_return(model, pi_t)
    eps, per, qmax = partition_epsilon(model, critic, trees, pi_t)
    L = max(t.max_leaves for t in trees)
    b = bound_explicit(n, qmax, eps)
    gap = j_o - j_t
    stage_eps = []
    agg = None
    if stage_log:
        stage_eps = [float(r.epsilon) for r in stage_log if r.outcome == "split"]
        wts = [float(r.weight) for r in stage_log if r.outcome == "split"]
        if stage_eps and sum(wts) > 0:
            agg = float(np.average(stage_eps, weights=wts))
    report = ReturnGapReport(
        j_o, j_t, gap, eps, L, n, qmax, b, bound_theorem_form(n, qmax, eps, L), bool(gap <= b + tol), True,
        "discounted", per, stage_eps, agg, episodic_return(model, pi_o), episodic_return(model, pi_t),
        hashes={"critic": critic.digest(), "trees": [tree_digest(t) for t in trees]},
    )
    if raise_on_violation and not report.holds:
        raise CertificationError(f"return gap {gap:.6g} exceeds bound {b:.6g}")
    return report


def advisory_report(spec: MazeSpec, L: int) -> dict:
    return {"certified": False, "reason": "joint state space too large for exact evaluation", "L": L,
            "n": spec.n_agents}


# -- CART imitation baseline ------------------------------------------------------


def expert_dataset(model: TabularModel, critic: OracleCritic, agent: int, episodes: int = 2000, seed: int = 0):
    """(features, action) pairs visited by the oracle from sampled starts, terminal states excluded."""
    spec = model.spec
    rng = np.random.default_rng(seed)
    pi = critic.greedy()
    idx = np.arange(model.n_states)
    nxt = model.next_state[idx, pi]
    s = rng.choice(model.n_states, size=episodes, p=model.mu)
    feats, acts = [], []
    own = model.local_cells(agent)
    act_j = (pi // spec.n_moves ** (spec.n_agents - 1 - agent)) % spec.n_moves
    for _ in range(spec.horizon):
        live = s[~model.terminal[s]]
        feats.append(model.features[own[live]])
        acts.append(act_j[live])
        s = nxt[s]
    return np.concatenate(feats), np.concatenate(acts)


def sklearn_to_tree(clf: DecisionTreeClassifier, L: int, agent: int, action_names, n_features: int) -> DecisionTree:
    """Axis-aligned sklearn tree as an oblique tree with unit-vector hyperplanes."""
    t = clf.tree_
    nodes: list[Node] = []
    queue = [(0, 0, 1)]  # sklearn id, depth, path key
    ids = {}
    while queue:
        sk, depth, key = queue.pop(0)
        ids[sk] = len(nodes)
        nodes.append(Node(len(nodes), depth, key))
        if t.children_left[sk] != -1:
            queue.append((int(t.children_left[sk]), depth + 1, 2 * key))
            queue.append((int(t.children_right[sk]), depth + 1, 2 * key + 1))
    for sk, nid in ids.items():
        node = nodes[nid]
        if t.children_left[sk] == -1:
            node.action = int(clf.classes_[int(np.argmax(t.value[sk][0]))])
            node.support = int(t.n_node_samples[sk])
            node.purity = float(t.value[sk][0].max() / t.value[sk][0].sum())
        else:
            w = np.zeros(n_features)
            w[int(t.feature[sk])] = 1.0
            node.w, node.p = w, float(t.threshold[sk])
            node.left, node.right = ids[int(t.children_left[sk])], ids[int(t.children_right[sk])]
    tree = DecisionTree(nodes, agent, L, n_features, tuple(action_names), {"kind": "normalized_xy"})
    for k, leaf in enumerate(tree.leaves()):
        leaf.label = k
    return tree


def cart_baseline(critic: OracleCritic, spec: MazeSpec | TabularModel, L: int, seed: int = 0, agent: int = 0,
                  episodes: int = 2000) -> DecisionTree:
    """Gini tree imitating the oracle's greedy actions, at most ``L`` leaves."""
    if L < 2:
        raise ValueError("L must be >= 2")
    model = _model(spec)
    X, y = expert_dataset(model, critic, agent, episodes, seed)
    if len(X) == 0:
        raise ValueError("expert dataset is empty (every start is terminal)")
    clf = DecisionTreeClassifier(max_leaf_nodes=L, random_state=seed).fit(X, y)
    return sklearn_to_tree(clf, L, agent, model.spec.moves, X.shape[1])


def cart_baselines(critic, spec, L, seed=0, episodes=2000) -> list[DecisionTree]:
    model = _model(spec)
    return [cart_baseline(critic, model, L, seed, j, episodes) for j in range(model.spec.n_agents)]


# -- policy evaluation --------------------------------------------------------------


def evaluate_trees(model: TabularModel, trees: list[DecisionTree], how: str = "exact", episodes: int = 1000,
                   seed: int = 0) -> float:
    """Mean episode reward of the joint tree policy: exact expectation or sampled rollouts."""
    pi = tree_policy(model, trees)
    if how == "exact":
        return episodic_return(model, pi)
    if how == "rollout":
        return float(rollout_returns(model, pi, episodes, seed).mean())
    raise ValueError(f"unknown evaluation mode {how!r}")


def welch_greater(a, b) -> tuple[float, float]:
    """One-sided Welch test of mean(a) > mean(b); returns (t, p)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.var(a) == 0 and np.var(b) == 0:
        d = a.mean() - b.mean()
        return (math.inf if d > 0 else -math.inf if d < 0 else 0.0), (0.0 if d > 0 else 1.0)
    res = stats.ttest_ind(a, b, equal_var=False, alternative="greater")
    return float(res.statistic), float(res.pvalue)


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


# -- sweeps -----------------------------------------------------------------------


@dataclass
class GrowthConfig:
    svm: SvmConfig = field(default_factory=SvmConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    mode: str = "per-node"
    conditioned: bool = True
    purity_stop: float | None = None


def extract(model: TabularModel, critic: OracleCritic, L: int, seed: int, gc: GrowthConfig | None = None):
    gc = gc or GrowthConfig()
    return grow_joint(model, critic, L, gc.svm, gc.cluster, seed, conditioned=gc.conditioned,
                      purity_stop=gc.purity_stop, mode=gc.mode)


@dataclass
class SweepRow:
    method: str
    L: int
    mean: float
    std: float
    per_seed: list
    epsilon: float | None = None
    nested_epsilon: list | None = None
    bound_explicit: float | None = None
    bound_theorem_form: float | None = None
    gap: float | None = None


@dataclass
class SweepResult:
    rows: list
    seeds: list
    evaluation: str
    oracle_return: float

    def row(self, method: str, L: int) -> SweepRow:
        for r in self.rows:
            if r.method == method and r.L == L:
                return r
        raise KeyError((method, L))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "L", "mean", "std", "epsilon", "bound_explicit", "bound_theorem_form", "gap",
                    "per_seed", "nested_epsilon"])
        for r in self.rows:
            w.writerow([r.method, r.L, repr(r.mean), repr(r.std), _fmt(r.epsilon), _fmt(r.bound_explicit),
                        _fmt(r.bound_theorem_form), _fmt(r.gap), " ".join(repr(v) for v in r.per_seed),
                        " ".join(repr(v) for v in r.nested_epsilon) if r.nested_epsilon else ""])
        return buf.getvalue()


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def sweep_leaves(
    spec: MazeSpec | TabularModel,
    critic: OracleCritic,
    L_set,
    seeds,
    methods=("rgmdt", "cart"),
    gc: GrowthConfig | None = None,
    evaluation: str = "exact",
    episodes: int = 1000,
) -> SweepResult:
    """Mean episode reward per (method, L) over ``seeds``; rows sorted by method then L."""
    model = _model(spec)
    if not L_set or not seeds:
        raise ValueError("L_set and seeds must be non-empty")
    rows = []
    for method in methods:
        for L in sorted(L_set):
            vals, eps, nested, bnd, thm, gaps = [], [], [], [], [], []
            for s in seeds:
                if method == "rgmdt":
                    trees = extract(model, critic, L, s, gc)
                    rep = certify_bound(model, critic, trees)
                    eps.append(rep.epsilon)
                    bnd.append(rep.bound_explicit)
                    thm.append(rep.bound_theorem_form)
                    gaps.append(rep.gap)
                    nested.append(nested_epsilon(model, critic, trees))
                elif method == "cart":
                    trees = cart_baselines(critic, model, L, s)
                else:
                    raise ValueError(f"unknown method {method!r}")
                vals.append(evaluate_trees(model, trees, evaluation, episodes, s))
            row = SweepRow(method, L, float(np.mean(vals)), float(np.std(vals)), [float(v) for v in vals])
            if method == "rgmdt":
                row.epsilon = float(np.mean(eps))
                row.nested_epsilon = nested
                row.bound_explicit = float(np.mean(bnd))
                row.bound_theorem_form = float(np.mean(thm))
                row.gap = float(np.mean(gaps))
            rows.append(row)
    return SweepResult(rows, list(seeds), evaluation, episodic_return(model, critic.greedy()))


def ablate_metric(
    spec: MazeSpec | TabularModel,
    critic: OracleCritic,
    L: int,
    metrics=("cosine", "euclidean", "manhattan"),
    seeds=(0, 1, 2, 3, 4),
    noise: float = 0.0,
    gc: GrowthConfig | None = None,
    evaluation: str = "exact",
    episodes: int = 1000,
) -> dict:
    """Mean reward per clustering metric, with optional injected label noise."""
    model = _model(spec)
    gc = gc or GrowthConfig()
    table = []
    for metric in metrics:
        ccfg = ClusterConfig(**{**asdict(gc.cluster), "metric": metric, "label_noise": noise})
        sub = GrowthConfig(gc.svm, ccfg, gc.mode, gc.conditioned, gc.purity_stop)
        vals = [evaluate_trees(model, extract(model, critic, L, s, sub), evaluation, episodes, s) for s in seeds]
        table.append({"metric": metric, "noise": noise, "mean": float(np.mean(vals)), "std": float(np.std(vals)),
                      "per_seed": [float(v) for v in vals]})
    means = {r["metric"]: r["mean"] for r in table}
    order = sorted(means, key=lambda k: -means[k])
    return {"L": L, "seeds": list(seeds), "rows": table, "ordering": order,
            "cosine_ge_euclidean": means.get("cosine", -math.inf) >= means.get("euclidean", math.inf)}


def ablation_csv(result: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "noise", "mean", "std", "per_seed"])
    for r in result["rows"]:
        w.writerow([r["metric"], repr(r["noise"]), repr(r["mean"]), repr(r["std"]),
                    " ".join(repr(v) for v in r["per_seed"])])
    return buf.getvalue()


def feasible_exact(spec: MazeSpec, cap: int = DEFAULT_STATE_CAP) -> bool:
    try:
        return spec.n_joint_states <= cap
    except MazeError:
        return False
