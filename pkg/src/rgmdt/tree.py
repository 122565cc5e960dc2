"""Oblique binary decision trees with SVM hyperplane splits.

Internal nodes route an observation left when ``w . x - p < 0`` and right
otherwise.  Leaves carry an action chosen from the action-value vectors of
the observations they hold.  Growth is breadth-first in stages: each stage
may split every current leaf once, subject to the leaf budget.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import ClusterError, direction_groups, fit, inject_label_noise, pairwise, value_groups
from .qvec import ActionValueVectors
from .svm import SvmConfig, SvmError, train_svm

TREE_FORMAT = "rgmdt-tree"
TREE_VERSION = 1


class TreeError(ValueError):
    pass


@dataclass
class Node:
    id: int
    depth: int
    key: int  # heap-style path code: root 1, children 2k / 2k+1
    w: np.ndarray | None = None
    p: float = 0.0
    left: int | None = None
    right: int | None = None
    # leaf payload
    action: int = 0
    label: int = 0
    purity: float = 1.0
    support: int = 0
    members: list = field(default_factory=list)  # training cells

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"id": self.id, "depth": self.depth, "key": self.key, "kind": "leaf", "action": int(self.action),
                    "label": int(self.label), "purity": self.purity, "support": self.support,
                    "members": [int(m) for m in self.members]}
        return {"id": self.id, "depth": self.depth, "key": self.key, "kind": "internal",
                "w": [float(v) for v in self.w], "p": float(self.p), "left": self.left, "right": self.right}

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        if d["kind"] == "leaf":
            return cls(d["id"], d["depth"], d["key"], action=d["action"], label=d["label"], purity=d["purity"],
                       support=d["support"], members=list(d.get("members", [])))
        return cls(d["id"], d["depth"], d["key"], w=np.array(d["w"], dtype=float), p=float(d["p"]),
                   left=d["left"], right=d["right"])


@dataclass
class DecisionTree:
    nodes: list[Node]
    agent: int = 0
    max_leaves: int = 2
    n_features: int = 2
    action_names: tuple[str, ...] = ()
    feature_encoding: dict = field(default_factory=dict)

    @classmethod
    def single_leaf(cls, action: int = 0, **kw) -> "DecisionTree":
        return cls([Node(0, 0, 1, action=action)], **kw)

    # -- structure ---------------------------------------------------------
    def leaves(self) -> list[Node]:
        """Leaves in breadth-first order."""
        return sorted((n for n in self.nodes if n.is_leaf), key=lambda n: (n.depth, _bfs_rank(n.key)))

    @property
    def n_leaves(self) -> int:
        return sum(1 for n in self.nodes if n.is_leaf)

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    @property
    def n_edges(self) -> int:
        return 2 * sum(1 for n in self.nodes if not n.is_leaf)

    # -- inference ---------------------------------------------------------
    def route(self, X) -> np.ndarray:
        """Leaf node id for every row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise TreeError(f"observation has {X.shape[1]} features, tree expects {self.n_features}")
        out = np.zeros(len(X), dtype=np.int64)
        for r, x in enumerate(X):
            node = self.nodes[0]
            while not node.is_leaf:
                node = self.nodes[node.left] if float(np.dot(node.w, x)) - node.p < 0 else self.nodes[node.right]
            out[r] = node.id
        return out

    def predict(self, X) -> np.ndarray:
        ids = self.route(X)
        return np.array([self.nodes[i].action for i in ids], dtype=np.int64)

    def infer(self, x) -> int:
        return int(self.predict(np.atleast_2d(x))[0])

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": TREE_FORMAT,
            "version": TREE_VERSION,
            "agent": self.agent,
            "L": self.max_leaves,
            "n_features": self.n_features,
            "action_names": list(self.action_names),
            "feature_encoding": self.feature_encoding,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        if d.get("format") != TREE_FORMAT:
            raise TreeError("not a tree document")
        if d.get("version") != TREE_VERSION:
            raise TreeError(f"unsupported tree version {d.get('version')}")
        return cls([Node.from_dict(n) for n in d["nodes"]], d["agent"], d["L"], d["n_features"],
                   tuple(d["action_names"]), d.get("feature_encoding", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DecisionTree":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _bfs_rank(key: int) -> int:
    return key


def infer(tree: DecisionTree, x) -> int:
    return tree.infer(x)


def export_dot(tree: DecisionTree) -> str:
    names = tree.action_names
    lines = [f"digraph tree_agent{tree.agent} {{", "  node [fontname=\"Helvetica\"];"]
    for n in sorted(tree.nodes, key=lambda n: n.id):
        if n.is_leaf:
            act = names[n.action] if n.action < len(names) else str(n.action)
            lines.append(f'  n{n.id} [shape=box, label="{act}\\nleaf {n.label} (support {n.support})"];')
        else:
            terms = " + ".join(f"{v:.4f}*x{k}" for k, v in enumerate(n.w))
            lines.append(f'  n{n.id} [shape=ellipse, label="{terms} - {n.p:.4f} >= 0?"];')
    for n in sorted(tree.nodes, key=lambda n: n.id):
        if not n.is_leaf:
            lines.append(f'  n{n.id} -> n{n.left} [label="no"];')
            lines.append(f'  n{n.id} -> n{n.right} [label="yes"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def dot_counts(text: str) -> tuple[int, int]:
    """(node count, edge count) of a DOT document produced by :func:`export_dot`."""
    nodes = len(re.findall(r"^\s*n\d+ \[", text, flags=re.M))
    edges = len(re.findall(r"^\s*n\d+ -> n\d+", text, flags=re.M))
    return nodes, edges


# -- growth ----------------------------------------------------------------------


@dataclass
class ClusterConfig:
    tau: float = 0.1
    lam: float = 1.0
    k3: int = 5
    max_iters: int = 100
    tol: float = 1e-6
    n_init: int = 8
    metric: str = "cosine"
    label_noise: float = 0.0
    polish: bool = False


@dataclass
class StageRecord:
    stage: int
    node_key: int
    n_members: int
    epsilon: float
    weight: float
    outcome: str


def _node_seed(seed: int, key: int) -> int:
    return int(np.random.SeedSequence([seed, key]).generate_state(1)[0])


def _groups(X: np.ndarray, metric: str) -> np.ndarray:
    return direction_groups(X) if metric == "cosine" else value_groups(X)


def _fallback_offset(s: np.ndarray, y: np.ndarray) -> float | None:
    """Threshold on projections ``s`` that best agrees with ``y`` and splits both ways."""
    vals = np.unique(s)
    if len(vals) < 2:
        return None
    mids = (vals[:-1] + vals[1:]) / 2
    best, best_p = -1, None
    for p in mids:
        agree = int(((s >= p) == (y > 0)).sum())
        agree = max(agree, len(y) - agree)
        if agree > best:
            best, best_p = agree, p
    return float(best_p)


def group_classes(centers: list[tuple[int, np.ndarray]]) -> tuple[list[int], list[int]]:
    """Split labels into two groups: seed with the cosine-farthest pair, assign the rest to the nearer seed."""
    if len(centers) < 2:
        raise TreeError("group_classes needs at least two labels")
    labels = [c[0] for c in centers]
    H = np.array([c[1] for c in centers], dtype=float)
    D = pairwise(H, H, "cosine")
    flat = int(np.argmax(D))
    a, b = divmod(flat, len(H))
    if a == b:
        a, b = 0, 1
    left, right = [], []
    for k in range(len(H)):
        if k == a or (k != b and D[k, a] <= D[k, b]):
            left.append(labels[k])
        else:
            right.append(labels[k])
    return left, right


def assign_leaf_actions(tree: DecisionTree, data: ActionValueVectors, leaf_of: np.ndarray | None = None) -> None:
    """Set every leaf's action to the argmax of its members' weighted action values."""
    if leaf_of is None:
        leaf_of = tree.route(data.features)
    av = data.action_values
    fallback = int(_argmax(data.weights @ av)) if len(data) else 0
    for leaf in tree.leaves():
        idx = np.flatnonzero(leaf_of == leaf.id)
        leaf.members = [int(c) for c in data.cells[idx]]
        leaf.support = len(idx)
        if len(idx) == 0:
            leaf.action = leaf.action if leaf.action is not None else fallback
            continue
        w = data.weights[idx]
        w = w / w.sum() if w.sum() > 0 else np.full(len(idx), 1 / len(idx))
        leaf.action = int(_argmax(w @ av[idx]))
    for k, leaf in enumerate(tree.leaves()):
        leaf.label = k


def _argmax(v: np.ndarray, tol: float = 1e-9) -> int:
    return int(np.argmax(v >= v.max() - tol))


def grow_stage(
    tree: DecisionTree,
    data: ActionValueVectors,
    budget: int,
    cfg: SvmConfig,
    ccfg: ClusterConfig,
    seed: int,
    stage: int = 0,
    max_depth: int | None = None,
    purity_stop: float | None = None,
    log: list | None = None,
) -> int:
    """Split each current leaf at most once while the leaf count stays <= budget.

    Returns the number of splits performed.
    """
    X = data.components
    feats = data.features
    leaf_of = tree.route(feats)
    splits = 0
    for leaf in tree.leaves():
        if tree.n_leaves + 1 > budget:
            break
        if max_depth is not None and leaf.depth + 1 > max_depth:
            continue
        idx = np.flatnonzero(leaf_of == leaf.id)
        outcome, eps = _try_split(tree, leaf, idx, X, feats, data.weights, cfg, ccfg, seed, purity_stop)
        if log is not None:
            log.append(StageRecord(stage, leaf.key, len(idx), eps, float(data.weights[idx].sum()), outcome))
        if outcome == "split":
            splits += 1
            leaf_of = tree.route(feats)
    assign_leaf_actions(tree, data, leaf_of)
    return splits


def _try_split(tree, leaf, idx, X, feats, weights, cfg, ccfg, seed, purity_stop):
    if len(idx) < 2:
        return "too_small", 0.0
    groups = _groups(X[idx], ccfg.metric)
    n_groups = groups.max() + 1
    if n_groups < 2:
        leaf.purity = 1.0
        return "pure", 0.0
    if purity_stop is not None:
        top = np.bincount(groups).max() / len(idx)
        if top >= purity_stop:
            leaf.purity = float(top)
            return "purity_stop", float("nan")
    node_seed = _node_seed(seed, leaf.key)
    try:
        model = fit(X[idx], weights[idx], 2, ccfg.tau, ccfg.lam, ccfg.k3, node_seed, ccfg.max_iters, ccfg.tol,
                    ccfg.metric, ccfg.n_init, ccfg.polish)
    except ClusterError:
        return "cluster_failed", float("nan")
    labels = model.assignment
    if ccfg.label_noise > 0:
        labels = inject_label_noise(labels, 2, ccfg.label_noise, np.random.default_rng(node_seed))
    y = np.where(labels == 1, 1.0, -1.0)
    if (y > 0).all() or (y < 0).all():
        return "single_class", model.epsilon_avg
    try:
        h = train_svm(feats[idx], y, cfg, weights[idx] if cfg.weighted else None)
    except SvmError:
        return "svm_failed", model.epsilon_avg
    if np.linalg.norm(h.w) < 1e-12:
        return "degenerate_w", model.epsilon_avg
    w, p = h.w, h.p
    right = feats[idx] @ w - p >= 0
    if right.all() or not right.any():
        p = _fallback_offset(feats[idx] @ w, y)
        if p is None:
            return "degenerate_split", model.epsilon_avg
        right = feats[idx] @ w - p >= 0
    _split(tree, leaf, w, p, labels, right)
    return "split", model.epsilon_avg


def _split(tree: DecisionTree, leaf: Node, w, p, labels, right) -> None:
    kids = []
    for side, mask in ((0, ~right), (1, right)):
        lab = labels[mask]
        purity = float(np.bincount(lab).max() / len(lab)) if len(lab) else 1.0
        node = Node(len(tree.nodes), leaf.depth + 1, 2 * leaf.key + side, action=leaf.action, purity=purity)
        tree.nodes.append(node)
        kids.append(node.id)
    leaf.w = np.asarray(w, dtype=float)
    leaf.p = float(p)
    leaf.left, leaf.right = kids
    leaf.members = []
    leaf.support = 0


def max_growth_depth(L: int) -> int:
    return math.ceil(math.log2(L)) + 1


def new_tree(data: ActionValueVectors, L: int, action_names, agent: int = 0, encoding: dict | None = None) -> DecisionTree:
    tree = DecisionTree.single_leaf(0, agent=agent, max_leaves=L, n_features=data.features.shape[1],
                                    action_names=tuple(action_names), feature_encoding=encoding or {})
    assign_leaf_actions(tree, data)
    return tree


def grow(
    data: ActionValueVectors,
    L: int,
    cfg: SvmConfig | None = None,
    ccfg: ClusterConfig | None = None,
    seed: int = 0,
    mode: str = "per-node",
    action_names=(),
    encoding: dict | None = None,
    purity_stop: float | None = None,
    log: list | None = None,
) -> DecisionTree:
    """Grow an oblique tree with at most ``L`` leaves from action-value vectors.

    Zero-norm vectors (e.g. terminal observations) are routed but never
    clustered.
    """
    if L < 2:
        raise TreeError("L must be >= 2: a binary tree needs at least one split")
    if len(data) == 0:
        raise TreeError("empty dataset")
    cfg = cfg or SvmConfig()
    ccfg = ccfg or ClusterConfig()
    usable = data.nonzero()
    if len(usable) == 0:
        usable = data
    tree = new_tree(usable, L, action_names, data.agent, encoding)
    if mode == "per-node":
        for k in range(max_growth_depth(L)):
            grow_stage(tree, usable, min(L, 2 ** (k + 1)), cfg, ccfg, seed, k, max_growth_depth(L), purity_stop, log)
    elif mode == "global":
        grow_global(tree, usable, L, cfg, ccfg, seed, log)
    else:
        raise TreeError(f"unknown growth mode {mode!r}")
    return tree


def grow_global(tree: DecisionTree, data: ActionValueVectors, L: int, cfg: SvmConfig, ccfg: ClusterConfig,
                seed: int, log: list | None = None) -> None:
    """One L-way clustering, then a binary tree of SVM splits over label groups."""
    X = data.components
    n_dir = _groups(X, ccfg.metric).max() + 1
    k = min(L, n_dir)
    if k < 2:
        return
    model = fit(X, data.weights, k, ccfg.tau, ccfg.lam, ccfg.k3, seed, ccfg.max_iters, ccfg.tol, ccfg.metric,
                ccfg.n_init, ccfg.polish)
    labels = model.assignment
    if ccfg.label_noise > 0:
        labels = inject_label_noise(labels, k, ccfg.label_noise, np.random.default_rng(seed))
    feats = data.features
    depth_cap = max_growth_depth(L)
    for stage in range(depth_cap):
        leaf_of = tree.route(feats)
        for leaf in tree.leaves():
            if tree.n_leaves + 1 > L or leaf.depth + 1 > depth_cap or leaf.depth != stage:
                continue
            idx = np.flatnonzero(leaf_of == leaf.id)
            present = sorted(set(labels[idx].tolist()))
            if len(present) < 2:
                continue
            left, _ = group_classes([(l, model.centers[l]) for l in present])
            y = np.where(np.isin(labels[idx], left), -1.0, 1.0)
            try:
                h = train_svm(feats[idx], y, cfg, data.weights[idx] if cfg.weighted else None)
            except SvmError:
                continue
            if np.linalg.norm(h.w) < 1e-12:
                continue
            w, p = h.w, h.p
            right = feats[idx] @ w - p >= 0
            if right.all() or not right.any():
                p = _fallback_offset(feats[idx] @ w, y)
                if p is None:
                    continue
                right = feats[idx] @ w - p >= 0
            _split(tree, leaf, w, p, labels[idx], right)
            if log is not None:
                log.append(StageRecord(stage, leaf.key, len(idx), model.epsilon_avg, float(data.weights[idx].sum()), "split"))
    assign_leaf_actions(tree, data)
