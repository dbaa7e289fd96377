"""Dense kernels, seeded randomness, SGD with momentum, k-means, and a
central-difference gradient oracle.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.asarray(values, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1) if rows is None else m.reshape(rows, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if (rows is not None and m.shape[0] != rows) or (cols is not None and m.shape[1] != cols):
        raise DimensionError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; identical seeds and call sequences give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def sigmoid(m: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow for large |m|."""
    m = np.asarray(m, dtype=DTYPE)
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    e = np.exp(m[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    velocities: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             state: OptimizerState) -> list[np.ndarray]:
    """One momentum step ``v <- mu*v - lr*g; p <- p + v``.

    Velocities are created lazily on the first call. Returns new parameter
    arrays; the inputs are not modified.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocities:
        state.velocities = [np.zeros_like(p, dtype=DTYPE) for p in params]
    if len(state.velocities) != len(params):
        raise DimensionError("optimizer state does not match parameter count")
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        v = state.velocities[i]
        if p.shape != g.shape or p.shape != v.shape:
            raise DimensionError(
                f"parameter {i}: shapes {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = state.momentum * v - state.learning_rate * g
        state.velocities[i] = v
        out.append(p + v)
    return out


def finite_diff_grad(loss_fn: Callable[[list[np.ndarray]], float],
                     params: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every parameter entry."""
    if h <= 0:
        raise ValueError("step h must be positive")
    work = [np.array(p, dtype=DTYPE, copy=True) for p in params]
    grads = [np.zeros_like(p) for p in work]
    for p, g in zip(work, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = loss_fn(work)
            flat[j] = orig - h
            fm = loss_fn(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
    return grads


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective_history: list[float]
    n_iter: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ikd,ikd->ik", diff, diff)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Parameters
    ----------
    points : ndarray, shape (n, d)
        One item per row.
    k : int
        Number of clusters, ``1 <= k <= n``.
    seed : int
        Seed for the k-means++ draws; results are deterministic given it.

    Returns
    -------
    KMeansResult
        Assignments, centroids and the objective after every iteration.
        Every cluster is non-empty: an emptied cluster is re-seeded from the
        point farthest from its current centroid. Distance ties go to the
        lowest centroid index.
    """
    points = as_matrix(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} items")
    rng = make_rng(seed)

    centroids = np.empty((k, points.shape[1]), dtype=DTYPE)
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[c] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[c:c + 1])[:, 0])

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centroids)
        new = np.argmin(d, axis=1)
        _fill_empty(points, new, d, k)
        # objective after the assignment step, then after the update step
        history.append(float(d[np.arange(n), new].sum()))
        changed = not np.array_equal(new, assignments)
        assignments = new
        for c in range(k):
            centroids[c] = points[assignments == c].mean(axis=0)
        history.append(float(_sq_dists(points, centroids)[np.arange(n), assignments].sum()))
        if not changed:
            break
    return KMeansResult(assignments, centroids.copy(), history, it)


def _fill_empty(points, assignments, d, k):
    for c in range(k):
        if np.any(assignments == c):
            continue
        # farthest point from its assigned centroid, taken from a cluster with >1 member
        counts = np.bincount(assignments, minlength=k)
        own = d[np.arange(len(points)), assignments]
        own = np.where(counts[assignments] > 1, own, -np.inf)
        idx = int(np.argmax(own))
        assignments[idx] = c
        d[idx, c] = 0.0
