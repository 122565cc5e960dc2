"""Cosine-distance clustering of action-value vectors.

The clustering minimizes, by alternating soft-assignment and center steps,

    F(S, H) = sum_i w_i sum_l S_il D(v_i, H_l)
              + (1/m) sum_p sum_{q in kNN(p)} D(v_p, v_q) ||S_p - S_q||^2
              - lam * (H(m) - H(m|o))

where ``S`` holds soft assignments, ``H`` the centers, ``w`` the normalized
visitation weights, ``m = sum_i w_i S_i`` the label marginal and
``H(m|o) = sum_i w_i entropy(S_i)``.  Each step proposes an update (a
temperature softmax for ``S``, visitation-weighted means for ``H``) and
backtracks until ``F`` does not increase, so the recorded trace is
monotone.  Hard labels are then polished by single-point moves that lower
the hard distortion, which for the cosine metric is the average cosine
distance to the cluster centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("cosine", "euclidean", "manhattan")
DIRECTION_TOL = 1e-9
_LOG_FLOOR = 1e-300


class ClusterError(ValueError):
    pass


def cosine_distance(a, b, obs=None) -> float:
    """1 - cos(a, b); both vectors must be nonzero."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        where = f" (observation {obs})" if obs is not None else ""
        raise ClusterError(f"cosine distance undefined for a zero-norm vector{where}")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    c = float(np.dot(a, b) / (na * nb))
    return float(min(2.0, max(0.0, 1.0 - c)))


def pairwise(X: np.ndarray, Y: np.ndarray, metric: str = "cosine") -> np.ndarray:
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    if metric == "cosine":
        nx = np.linalg.norm(X, axis=1, keepdims=True)
        ny = np.linalg.norm(Y, axis=1, keepdims=True)
        if (nx == 0).any() or (ny == 0).any():
            raise ClusterError("cosine distance undefined for zero-norm vectors")
        D = 1.0 - (X / nx) @ (Y / ny).T
        return np.clip(D, 0.0, 2.0)
    if metric == "euclidean":
        return ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=2)
    if metric == "manhattan":
        return np.abs(X[:, None, :] - Y[None, :, :]).sum(axis=2)
    raise ClusterError(f"unknown metric {metric!r}; choose from {METRICS}")


def direction_groups(X: np.ndarray, tol: float = DIRECTION_TOL) -> np.ndarray:
    """Group id per row; rows share a group when their cosine distance is <= tol."""
    D = pairwise(X, X, "cosine")
    gid = -np.ones(len(X), dtype=np.int64)
    g = 0
    for i in range(len(X)):
        if gid[i] < 0:
            gid[(gid < 0) & (D[i] <= tol)] = g
            g += 1
    return gid


def value_groups(X: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    gid = -np.ones(len(X), dtype=np.int64)
    g = 0
    for i in range(len(X)):
        if gid[i] < 0:
            same = np.abs(X - X[i]).max(axis=1) <= tol
            gid[(gid < 0) & same] = g
            g += 1
    return gid


def centers_of(X: np.ndarray, w: np.ndarray, labels: np.ndarray, n_labels: int) -> np.ndarray:
    """Visitation-weighted mean of each cluster's vectors (uniform if its mass is 0)."""
    H = np.zeros((n_labels, X.shape[1]))
    for l in range(n_labels):
        idx = labels == l
        if not idx.any():
            continue
        wl = w[idx]
        H[l] = (wl @ X[idx]) / wl.sum() if wl.sum() > 0 else X[idx].mean(axis=0)
    return H


def epsilon_terms(X: np.ndarray, w: np.ndarray, labels: np.ndarray, n_labels: int):
    """(epsilon, per-label epsilon, centers, label mass) of a hard clustering.

    ``epsilon = sum_l d(l) sum_{o~l} dbar_l(o) D_cos(v_o, H_l)`` with
    ``d(l) = sum_{o~l} w_o`` and ``dbar_l(o) = w_o / d(l)``.
    """
    H = centers_of(X, w, labels, n_labels)
    mass = np.array([w[labels == l].sum() for l in range(n_labels)])
    per = np.zeros(n_labels)
    for l in range(n_labels):
        idx = np.flatnonzero(labels == l)
        if len(idx) == 0 or not np.linalg.norm(H[l]) > 0:
            continue
        d = np.array([cosine_distance(X[i], H[l]) for i in idx])
        wl = w[idx]
        per[l] = float(wl @ d / wl.sum()) if wl.sum() > 0 else float(d.mean())
    return float(mass @ per), per, H, mass


@dataclass
class ClusterModel:
    n_labels: int
    centers: np.ndarray
    assignment: np.ndarray  # hard label per vector
    soft_assignment: np.ndarray
    epsilon_per_label: np.ndarray
    epsilon_avg: float
    label_mass: np.ndarray
    weights: np.ndarray
    metric: str = "cosine"
    objective_trace: list = field(default_factory=list)
    repairs: int = 0
    cells: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def labels_by_cell(self) -> dict[int, int]:
        if self.cells is None:
            return {i: int(l) for i, l in enumerate(self.assignment)}
        return {int(c): int(l) for c, l in zip(self.cells, self.assignment)}

    def to_dict(self) -> dict:
        return {
            "n_labels": self.n_labels,
            "metric": self.metric,
            "centers": self.centers.tolist(),
            "assignment": self.assignment.tolist(),
            "cells": None if self.cells is None else self.cells.tolist(),
            "epsilon_per_label": self.epsilon_per_label.tolist(),
            "epsilon_avg": self.epsilon_avg,
            "label_mass": self.label_mass.tolist(),
            "repairs": self.repairs,
            "objective_trace": self.objective_trace,
            "config": self.config,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")


def epsilon_of(model: ClusterModel, X: np.ndarray | None = None) -> float:
    """Average cosine distance of a fitted model; recomputed from scratch when ``X`` is given."""
    if X is None:
        return model.epsilon_avg
    return epsilon_terms(X, model.weights, model.assignment, model.n_labels)[0]


# -- objective -------------------------------------------------------------------


def _entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.maximum(p, _LOG_FLOOR))).sum(axis=-1)


class _Objective:
    def __init__(self, X, w, metric, lam, k3):
        self.X, self.w, self.metric, self.lam = X, w, metric, lam
        m = len(X)
        Dxx = pairwise(X, X, metric)
        self.scale = 1.0
        if metric != "cosine":
            off = Dxx[~np.eye(m, dtype=bool)]
            self.scale = float(off.mean()) if off.size and off.mean() > 0 else 1.0
        self.Dxx = Dxx / self.scale
        k = min(k3, m - 1)
        order = np.argsort(self.Dxx + np.diag(np.full(m, np.inf)), axis=1, kind="stable")
        self.nbr = order[:, :k] if k > 0 else np.zeros((m, 0), dtype=np.int64)
        self.m = m

    def dist_to(self, H):
        return pairwise(self.X, H, self.metric) / self.scale

    def value(self, S, H) -> float:
        D = self.dist_to(H)
        distortion = float((self.w[:, None] * S * D).sum())
        loc = 0.0
        if self.nbr.shape[1]:
            diff = S[:, None, :] - S[self.nbr]
            loc = float((np.take_along_axis(self.Dxx, self.nbr, axis=1) * (diff**2).sum(axis=2)).sum()) / self.m
        marg = self.w @ S
        rim = float(_entropy(marg)) - float(self.w @ _entropy(S))
        return distortion + loc - self.lam * rim

    def grad(self, S, H):
        D = self.dist_to(H)
        G = self.w[:, None] * D
        if self.nbr.shape[1]:
            Dn = np.take_along_axis(self.Dxx, self.nbr, axis=1)  # (m, k)
            diff = S[:, None, :] - S[self.nbr]  # (m, k, L)
            contrib = 2.0 * Dn[:, :, None] * diff / self.m
            G += contrib.sum(axis=1)
            np.add.at(G, self.nbr.ravel(), -contrib.reshape(-1, S.shape[1]))
        marg = self.w @ S
        G += self.lam * self.w[:, None] * (np.log(np.maximum(marg, _LOG_FLOOR))[None, :] - np.log(np.maximum(S, _LOG_FLOOR)))
        return G


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _farthest_point_init(X, n_labels, metric, rng, greedy=True) -> np.ndarray:
    """Greedy farthest-point seeding; ``greedy=False`` samples proportionally to distance."""
    D = pairwise(X, X, metric)
    first = int(rng.integers(len(X)))
    chosen = [first]
    mind = D[first].copy()
    for _ in range(1, n_labels):
        if greedy or mind.sum() <= 0:
            nxt = int(np.argmax(mind))
        else:
            nxt = int(rng.choice(len(X), p=mind / mind.sum()))
        chosen.append(nxt)
        mind = np.minimum(mind, D[nxt])
    return X[chosen].copy()


def _rowwise(X, Y, metric) -> np.ndarray:
    if metric == "cosine":
        den = np.linalg.norm(X, axis=1) * np.linalg.norm(Y, axis=1)
        # a center whose members cancel out has no direction; score it as orthogonal
        cos = np.divide((X * Y).sum(axis=1), den, out=np.zeros(len(X)), where=den > 0)
        return np.clip(1.0 - cos, 0.0, 2.0)
    if metric == "euclidean":
        return ((X - Y) ** 2).sum(axis=1)
    return np.abs(X - Y).sum(axis=1)


def _hard_distortion(X, w, labels, n_labels, metric) -> float:
    H = centers_of(X, w, labels, n_labels)
    return float(w @ _rowwise(X, H[labels], metric))


def _polish(X, w, labels, n_labels, metric, max_sweeps=50):
    labels = labels.copy()
    best = _hard_distortion(X, w, labels, n_labels, metric)
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(X)):
            li = labels[i]
            if (labels == li).sum() == 1:
                continue
            cand_best, cand_l = best, li
            for l in range(n_labels):
                if l == li:
                    continue
                labels[i] = l
                val = _hard_distortion(X, w, labels, n_labels, metric)
                if val < cand_best - 1e-15:
                    cand_best, cand_l = val, l
            labels[i] = cand_l
            if cand_l != li:
                best = cand_best
                moved = True
        if not moved:
            break
    return labels


def _repair_empty(X, w, labels, n_labels, metric):
    repairs = 0
    for _ in range(n_labels):
        counts = np.bincount(labels, minlength=n_labels)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            break
        H = centers_of(X, w, labels, n_labels)
        D = _rowwise(X, H[labels], metric)
        D[counts[labels] <= 1] = -np.inf  # never empty another cluster
        labels[int(np.argmax(D))] = empty[0]
        repairs += 1
    return labels, repairs


def fit(
    X,
    weights=None,
    n_labels: int = 2,
    tau: float = 0.1,
    lam: float = 1.0,
    k3: int = 5,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    metric: str = "cosine",
    n_init: int = 32,
    polish: bool = True,
) -> ClusterModel:
    """Cluster vectors into ``n_labels`` groups.  ``X`` may be an ``ActionValueVectors``."""
    cells = None
    if hasattr(X, "components"):
        cells = X.cells
        if weights is None:
            weights = X.weights
        X = X.components
    X = np.asarray(X, dtype=float)
    m = len(X)
    if metric not in METRICS:
        raise ClusterError(f"unknown metric {metric!r}; choose from {METRICS}")
    if n_labels < 2:
        raise ClusterError("n_labels must be >= 2")
    if tau <= 0:
        raise ClusterError("tau must be positive")
    norms = np.linalg.norm(X, axis=1)
    if metric == "cosine" and (norms == 0).any():
        bad = int(np.flatnonzero(norms == 0)[0])
        where = int(cells[bad]) if cells is not None else bad
        raise ClusterError(f"zero-norm action-value vector at observation {where}; cosine direction undefined")
    groups = direction_groups(X) if metric == "cosine" else value_groups(X)
    if groups.max() + 1 < n_labels:
        raise ClusterError(
            f"only {groups.max() + 1} distinct vector directions for {n_labels} labels"
        )
    w_raw = np.ones(m) / m if weights is None else np.asarray(weights, dtype=float)
    w = w_raw / w_raw.sum() if w_raw.sum() > 0 else np.ones(m) / m

    obj = _Objective(X, w, metric, lam, k3)
    best = None
    for r in range(max(1, n_init)):
        rng = np.random.default_rng([seed, r])
        H = _farthest_point_init(X, n_labels, metric, rng, greedy=r == 0)
        S = _softmax(-obj.dist_to(H) / tau)
        trace = [obj.value(S, H)]
        for _ in range(max_iters):
            f0 = trace[-1]
            # assignment step
            G = obj.grad(S, H) / w[:, None]
            prop = _softmax(-G / tau)
            f = f0
            t = 1.0
            for _ in range(30):
                cand = (1 - t) * S + t * prop
                fc = obj.value(cand, H)
                if fc <= f:
                    S, f = cand, fc
                    break
                t *= 0.5
            trace.append(f)
            # center step
            mass = w @ S
            Hc = np.where(mass[:, None] > 0, (w[:, None] * S).T @ X / np.maximum(mass, _LOG_FLOOR)[:, None], H)
            if metric == "cosine" and (np.linalg.norm(Hc, axis=1) == 0).any():
                Hc = H
            fc = obj.value(S, Hc)
            if fc <= f:
                H, f = Hc, fc
            trace.append(f)
            if abs(f0 - f) <= tol * max(1.0, abs(f0)):
                break
        hard = np.argmax(S, axis=1)
        hard, repairs = _repair_empty(X, w, hard, n_labels, metric)
        if polish:
            hard = _polish(X, w, hard, n_labels, metric)
            score = _hard_distortion(X, w, hard, n_labels, metric)
        else:
            # keep the regularized solution; rank restarts by the objective it minimized
            score = trace[-1]
        if best is None or score < best[0] - 1e-15:
            best = (score, hard, S, trace, repairs)

    _, hard, S, trace, repairs = best
    eps, per, H, mass = epsilon_terms(X, w_raw, hard, n_labels) if metric == "cosine" or (norms > 0).all() else (
        np.nan, np.full(n_labels, np.nan), centers_of(X, w_raw, hard, n_labels), np.bincount(hard, w_raw, n_labels))
    return ClusterModel(
        n_labels, H, hard, S, per, eps, mass, w_raw, metric, [float(v) for v in trace], repairs, cells,
        {"tau": tau, "lam": lam, "k3": k3, "seed": seed, "max_iters": max_iters, "tol": tol, "n_init": n_init},
    )


def inject_label_noise(labels: np.ndarray, n_labels: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label, with probability ``rate``, by a uniformly drawn different label."""
    labels = np.asarray(labels).copy()
    if rate <= 0 or n_labels < 2:
        return labels
    flip = rng.random(len(labels)) < rate
    shift = rng.integers(1, n_labels, size=len(labels))
    labels[flip] = (labels[flip] + shift[flip]) % n_labels
    return labels
