"""One-class SVM with an RBF kernel.

The dual ``min 1/2 a^T K a  s.t.  0 <= a_i <= 1/(nu n), sum(a) = 1`` is solved by
two-coefficient updates on the maximal KKT-violating pair. The solver is
written over a stack of kernel matrices so a whole bank of equally sized
problems advances in lockstep; :func:`train_ocsvm` is the one-problem case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

SV_THRESHOLD = 1e-12
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100_000


class DegenerateSpreadError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    kernel: KernelConfig
    nu: float
    n_train: int
    converged: bool = True

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.nu * self.n_train)


def rbf(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return float(np.exp(-gamma * np.sum((x - y) ** 2)))


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared distances over the last two axes.

    Computed from explicit differences so that coincident points give exactly 0.
    """
    diff = A[..., :, None, :] - B[..., None, :, :]
    return np.einsum("...k,...k->...", diff, diff)


def rbf_matrix(A: np.ndarray, B: np.ndarray, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim:
        gamma = gamma[..., None, None]
    return np.exp(-gamma * sq_distances(A, B))


def median_gamma(points, scale: float = 0.5) -> float:
    """Bandwidth from the median pairwise Euclidean distance ``m``: ``scale / m**2``.

    The default ``scale`` of 0.5 gives ``1 / (2 m^2)``.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < 2:
        raise ValueError("need at least two points")
    m = float(np.median(pdist(X)))
    if m == 0.0:
        raise DegenerateSpreadError("all points coincide; median distance is 0")
    return scale / (m * m)


def _solve_stack(K: np.ndarray, C: float, tol: float, max_iter: int):
    """Solve a stack of duals sharing ``n`` and ``C``. Returns (alpha, grad, converged)."""
    M, n, _ = K.shape
    alpha = np.full((M, n), 1.0 / n)
    G = np.einsum("mij,mj->mi", K, alpha)
    converged = np.zeros(M, dtype=bool)
    active = np.arange(M)
    rows = np.arange(M)
    for _ in range(max_iter):
        a = alpha[active]
        g = G[active]
        up = np.where(a < C, g, np.inf)
        down = np.where(a > 0.0, g, -np.inf)
        i = np.argmin(up, axis=1)
        j = np.argmax(down, axis=1)
        r = rows[: len(active)]
        viol = down[r, j] - up[r, i]
        done = ~(viol > tol)
        converged[active[done]] = True
        keep = ~done
        if not keep.any():
            active = active[:0]
            break
        active, i, j, viol = active[keep], i[keep], j[keep], viol[keep]
        Ki = K[active, :, i]
        Kj = K[active, :, j]
        r = rows[: len(active)]
        eta = np.maximum(Ki[r, i] + Kj[r, j] - 2.0 * Ki[r, j], 1e-12)
        ai, aj = alpha[active, i], alpha[active, j]
        cap_i, cap_j = C - ai, aj
        t = np.minimum(viol / eta, np.minimum(cap_i, cap_j))
        new_i = np.where(t >= cap_i, C, ai + t)
        new_j = np.where(t >= cap_j, 0.0, aj - t)
        alpha[active, i] = new_i
        alpha[active, j] = new_j
        G[active] += t[:, None] * (Ki - Kj)
    return alpha, G, converged


def _max_violation(alpha: np.ndarray, G: np.ndarray, C: float) -> np.ndarray:
    up = np.where(alpha < C, G, np.inf).min(axis=-1)
    down = np.where(alpha > 0.0, G, -np.inf).max(axis=-1)
    return down - up


def _polish(K: np.ndarray, alpha: np.ndarray, C: float, tol: float):
    """Re-solve each dual exactly on the free set that SMO identified.

    With the bounded coefficients held fixed, the optimum satisfies
    ``K_FF a_F - rho = -K_FB a_B`` and ``sum(a) = 1``: one square linear
    system per model. The refined point is kept only where it stays inside
    the box and still meets the KKT tolerance.
    """
    M, n, _ = K.shape
    free = (alpha > 0.0) & (alpha < C)
    has_free = free.any(axis=1)
    if not has_free.any():
        return alpha
    idx = np.flatnonzero(has_free)
    Kf, af, fr = K[idx], alpha[idx], free[idx]
    A = np.zeros((len(idx), n + 1, n + 1))
    b = np.zeros((len(idx), n + 1))
    # free rows: sum_j K_ij a_j - rho = 0; bounded rows: a_i = current value
    A[:, :n, :n] = np.where(fr[:, :, None], Kf, np.eye(n))
    A[:, :n, n] = np.where(fr, -1.0, 0.0)
    b[:, :n] = np.where(fr, 0.0, af)
    A[:, n, :n] = 1.0
    b[:, n] = 1.0
    out = alpha.copy()
    for k, sol in zip(idx, _solve_each(A, b)):
        if sol is None or not np.all(np.isfinite(sol)):
            continue
        cand = np.where(free[k], np.clip(sol[:n], 0.0, C), alpha[k])
        if abs(cand.sum() - 1.0) > 1e-12 or np.any(np.abs(cand[free[k]] - sol[:n][free[k]]) > 1e-12):
            continue
        if _max_violation(cand, K[k] @ cand, C) <= tol:
            out[k] = cand
    return out


def _solve_each(A: np.ndarray, b: np.ndarray):
    try:
        return list(np.linalg.solve(A, b[..., None])[..., 0])
    except np.linalg.LinAlgError:
        # some system is singular (e.g. duplicated free points); go one by one
        sols = []
        for Ak, bk in zip(A, b):
            try:
                sols.append(np.linalg.solve(Ak, bk))
            except np.linalg.LinAlgError:
                sols.append(None)
        return sols


def _rho(alpha: np.ndarray, G: np.ndarray, C: float) -> float:
    free = (alpha > SV_THRESHOLD) & (alpha < C * (1.0 - 1e-12))
    if free.any():
        return float(G[free].mean())
    at_upper = alpha >= C * (1.0 - 1e-12)
    at_zero = alpha <= SV_THRESHOLD
    lo = G[at_upper].max() if at_upper.any() else None
    hi = G[at_zero].min() if at_zero.any() else None
    if lo is not None and hi is not None:
        return float(0.5 * (lo + hi))
    return float(lo if lo is not None else hi)


def train_many(
    Xs: np.ndarray,
    nu: float,
    gammas,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> list[OcSvmModel]:
    """Train one model per slice of ``Xs`` (shape (M, n, d)) with its own gamma."""
    Xs = np.asarray(Xs, dtype=np.float64)
    if Xs.ndim != 3:
        raise ValueError("expected a (models, points, features) array")
    M, n, _ = Xs.shape
    if n < 1:
        raise ValueError("need at least one training point")
    if not 0.0 < nu <= 1.0:
        raise ValueError(f"nu must lie in (0, 1], got {nu}")
    if not np.all(np.isfinite(Xs)):
        raise ValueError("training vectors must be finite")
    gammas = np.broadcast_to(np.asarray(gammas, dtype=np.float64), (M,))
    if not np.all(gammas > 0):
        raise ValueError("gamma must be positive")
    C = 1.0 / (nu * n)
    K = rbf_matrix(Xs, Xs, gammas)
    alpha, G, converged = _solve_stack(K, C, tol, max_iter)
    alpha = _polish(K, alpha, C, tol)
    G = np.einsum("mij,mj->mi", K, alpha)
    models = []
    for k in range(M):
        keep = alpha[k] > SV_THRESHOLD
        models.append(OcSvmModel(
            support_vectors=Xs[k][keep].copy(),
            alphas=alpha[k][keep].copy(),
            rho=_rho(alpha[k], G[k], C),
            kernel=KernelConfig(float(gammas[k])),
            nu=float(nu),
            n_train=n,
            converged=bool(converged[k]),
        ))
    return models


def train_ocsvm(X, nu: float, kernel: KernelConfig, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> OcSvmModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return train_many(X[None], nu, kernel.gamma, tol, max_iter)[0]


def decision(m: OcSvmModel, x):
    """Signed score ``sum_i a_i k(sv_i, x) - rho``; negative marks an outlier.

    ``x`` may be one vector or an (n, d) batch.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != m.support_vectors.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {m.support_vectors.shape[1]}")
    scores = rbf_matrix(X, m.support_vectors, m.kernel.gamma) @ m.alphas - m.rho
    return float(scores[0]) if single else scores


def dual_objective(m: OcSvmModel) -> float:
    K = rbf_matrix(m.support_vectors, m.support_vectors, m.kernel.gamma)
    return float(0.5 * m.alphas @ K @ m.alphas)
