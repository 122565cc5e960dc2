"""Linear soft-margin SVM trained by SMO on the dual.

Decision function ``f(x) = w . x - p``; points with ``f(x) < 0`` go left.
The dual ``min 1/2 a'Qa - sum a`` s.t. ``0 <= a_i <= C`` and ``sum a_i y_i = 0``
is solved with maximal-violating-pair working sets chosen by second-order
gain, as in LIBSVM.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TAU = 1e-12


class SvmError(ValueError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    C: float = 10.0
    tol: float = 1e-9
    max_passes: int = 200_000
    seed: int = 0
    weighted: bool = False  # tree growth: scale each point's penalty by its visitation weight

    def __post_init__(self):
        if self.C <= 0:
            raise SvmError("C must be positive")
        if self.tol <= 0:
            raise SvmError("tol must be positive")


@dataclass
class Hyperplane:
    w: np.ndarray
    p: float
    margin: float
    trained_on: int
    alpha: np.ndarray | None = None
    hinge_loss: float = 0.0
    objective: float = 0.0
    iterations: int = 0

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.atleast_2d(X) @ self.w - self.p

    def goes_left(self, X: np.ndarray) -> np.ndarray:
        return self.decision(X) < 0


def train_svm(X, y, cfg: SvmConfig | None = None, sample_weight=None) -> Hyperplane:
    """Fit a max-margin separator for labels ``y`` in {-1, +1}.

    ``sample_weight`` scales the penalty per point (``C_i = C * w_i`` with the
    weights rescaled to mean 1).
    """
    cfg = cfg or SvmConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n == 0:
        raise SvmError("no training points")
    if X.shape[0] != n:
        raise SvmError("feature/label count mismatch")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SvmError("labels must be -1 or +1")
    if (y > 0).all() or (y < 0).all():
        raise SvmError("both classes must be present")

    if sample_weight is None:
        C = np.full(n, cfg.C)
    else:
        sw = np.asarray(sample_weight, dtype=float)
        if sw.shape != (n,) or (sw < 0).any() or sw.sum() <= 0:
            raise SvmError("sample weights must be non-negative, one per point, not all zero")
        C = cfg.C * sw * n / sw.sum()
    K = X @ X.T
    QD = np.diag(K).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of the dual objective
    it = 0
    while it < cfg.max_passes:
        it += 1
        minus_yG = -y * G
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(minus_yG[up])])
        gmax = minus_yG[i]
        gmin = minus_yG[low].min()
        if gmax - gmin < cfg.tol:
            break
        cand = np.flatnonzero(low & (minus_yG < gmax))
        b = gmax - minus_yG[cand]
        a = QD[i] + QD[cand] - 2.0 * K[i, cand]
        a = np.where(a > 0, a, _TAU)
        j = int(cand[np.argmin(-(b * b) / a)])

        ai_old, aj_old = alpha[i], alpha[j]
        Qij = y[i] * y[j] * K[i, j]
        Ci, Cj = C[i], C[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Qij
            quad = quad if quad > 0 else _TAU
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > Ci - Cj:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = Ci - diff
            elif alpha[j] > Cj:
                alpha[j] = Cj
                alpha[i] = Cj + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Qij
            quad = quad if quad > 0 else _TAU
            delta = (G[i] - G[j]) / quad
            s = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if s > Ci:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = s - Ci
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = s
            if s > Cj:
                if alpha[j] > Cj:
                    alpha[j] = Cj
                    alpha[i] = s - Cj
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = s
        dai, daj = alpha[i] - ai_old, alpha[j] - aj_old
        G += y * (K[:, i] * (y[i] * dai) + K[:, j] * (y[j] * daj))

    p = _offset(alpha, y, G, C)
    w = (alpha * y) @ X
    f = X @ w - p
    nw = float(np.linalg.norm(w))
    obj = 0.5 * float(w @ w) - float(alpha.sum())
    return Hyperplane(
        w, float(p), 1.0 / nw if nw > 0 else 0.0, n, alpha,
        float(np.maximum(0.0, 1.0 - y * f).sum()), obj, it,
    )


def _offset(alpha, y, G, C) -> float:
    yG = y * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        return float(yG[free].mean())
    ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
    ub = yG[ub_mask].min() if ub_mask.any() else np.inf
    lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
    if np.isinf(ub) or np.isinf(lb):
        return float(ub if np.isfinite(ub) else lb)
    return float((ub + lb) / 2)
