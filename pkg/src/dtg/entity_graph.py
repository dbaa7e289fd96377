"""Per-entity graphs built from sensor time series.

Each feature (sensor modality) of an entity is a node; arcs carry the
correlation coefficient between the two feature series. The correlation
method is chosen per entity by comparing significance-test confidence
across Pearson, Spearman and Kendall.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

METHODS = ("pearson", "spearman", "kendall")
MIN_LENGTH = 4


class DegenerateInputError(ValueError):
    """Correlation is undefined for a zero-variance series."""


@dataclass(frozen=True)
class FeatureSeries:
    feature_id: str
    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size < MIN_LENGTH:
            raise ValueError(f"feature {self.feature_id!r}: need at least {MIN_LENGTH} samples")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"feature {self.feature_id!r}: missing or non-finite values")
        object.__setattr__(self, "values", values)


@dataclass
class EntityGraph:
    """Features as nodes, correlation coefficients as arc weights.

    ``arc_weights[i, j]`` is the weight of the arc along which node ``i``
    aggregates from node ``j``. For graphs built from data it is the
    (symmetric) correlation matrix; adapted graphs may be asymmetric.
    """

    entity_id: str
    entity_type: str
    feature_ids: list[str]
    features: np.ndarray  # (N_f, T), row order == feature_ids
    arc_weights: np.ndarray  # (N_f, N_f)
    correlation_method: str
    report: CorrelationReport | None = field(default=None, repr=False, compare=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "entity_type": self.entity_type,
            "feature_ids": list(self.feature_ids),
            "features": self.features.tolist(),
            "arc_weights": self.arc_weights.tolist(),
            "correlation_method": self.correlation_method,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EntityGraph":
        return cls(d["entity_id"], d["entity_type"], list(d["feature_ids"]),
                   np.asarray(d["features"], dtype=np.float64),
                   np.asarray(d["arc_weights"], dtype=np.float64),
                   d["correlation_method"])


@dataclass
class CorrelationReport:
    coefficients: dict[str, np.ndarray]
    p_values: dict[str, np.ndarray]
    mean_confidence: dict[str, float]
    pairs: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "methods": {
                m: {
                    "coefficients": self.coefficients[m].tolist(),
                    "p_values": self.p_values[m].tolist(),
                    "mean_confidence": self.mean_confidence[m],
                }
                for m in METHODS
            },
        }


@dataclass
class FeatureRegressor:
    target: int
    neighbors: list[int]
    coef: np.ndarray
    intercept: float
    ridge: float

    def to_dict(self) -> dict:
        return {"target": self.target, "neighbors": list(self.neighbors),
                "coef": self.coef.tolist(), "intercept": self.intercept, "ridge": self.ridge}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureRegressor":
        return cls(int(d["target"]), [int(i) for i in d["neighbors"]],
                   np.asarray(d["coef"], dtype=np.float64), float(d["intercept"]),
                   float(d["ridge"]))


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < MIN_LENGTH:
        raise ValueError(f"need at least {MIN_LENGTH} samples, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInputError("zero-variance input")
    return x, y


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def correlation(method: str, x, y) -> float:
    """Correlation coefficient of two equal-length series.

    Spearman is Pearson on average ranks; Kendall is tau-b.
    """
    x, y = _check_pair(x, y)
    if method == "pearson":
        r = _pearson(x, y)
    elif method == "spearman":
        r = _pearson(stats.rankdata(x), stats.rankdata(y))
    elif method == "kendall":
        r = float(stats.kendalltau(x, y, variant="b").statistic)
    else:
        raise ValueError(f"unknown correlation method {method!r}")
    return float(np.clip(r, -1.0, 1.0))


def significance(method: str, coeff: float, n: int) -> float:
    """Two-sided p-value for ``coeff`` computed from ``n`` samples.

    Pearson and Spearman use the t statistic with n-2 degrees of freedom;
    Kendall uses the normal approximation of tau under independence.
    """
    if n < MIN_LENGTH:
        raise ValueError(f"need n >= {MIN_LENGTH}")
    if abs(coeff) > 1.0:
        raise ValueError(f"|coeff| > 1: {coeff}")
    if abs(coeff) == 1.0:
        return 0.0
    if method in ("pearson", "spearman"):
        t = coeff * np.sqrt((n - 2) / (1.0 - coeff * coeff))
        p = 2.0 * stats.t.sf(abs(t), n - 2)
    elif method == "kendall":
        z = 3.0 * coeff * np.sqrt(n * (n - 1)) / np.sqrt(2.0 * (2 * n + 5))
        p = 2.0 * stats.norm.sf(abs(z))
    else:
        raise ValueError(f"unknown correlation method {method!r}")
    return float(min(max(p, 0.0), 1.0))


def select_method(series: list[FeatureSeries]) -> tuple[str, CorrelationReport]:
    """Pick the method with the highest mean confidence (1 - p) over all pairs.

    A pair involving a constant series has an undefined coefficient; it is
    recorded with coefficient 0, p-value 1 and confidence 0 for every
    method. Ties resolve in the order pearson, spearman, kendall.
    """
    n = len(series)
    if n < 2:
        raise ValueError("need at least 2 features")
    length = series[0].values.size
    if any(s.values.size != length for s in series):
        raise ValueError("all feature series must have the same length")
    pairs = list(itertools.combinations(range(n), 2))
    coefs = {m: np.eye(n) for m in METHODS}
    pvals = {m: np.zeros((n, n)) for m in METHODS}
    conf = {}
    for m in METHODS:
        total = 0.0
        for i, j in pairs:
            try:
                r = correlation(m, series[i].values, series[j].values)
                p = significance(m, r, length)
            except DegenerateInputError:
                r, p = 0.0, 1.0
            coefs[m][i, j] = coefs[m][j, i] = r
            pvals[m][i, j] = pvals[m][j, i] = p
            total += 1.0 - p
        conf[m] = total / len(pairs)
    best = max(METHODS, key=lambda m: (conf[m], -METHODS.index(m)))
    return best, CorrelationReport(coefs, pvals, conf, pairs)


def build_entity_graph(entity_id: str, entity_type: str,
                       series: list[FeatureSeries]) -> EntityGraph:
    """Select the correlation method and fill the arc weights (unit diagonal).

    The selection report is kept on ``graph.report``.
    """
    if len(series) < 2:
        raise ValueError(f"entity {entity_id!r}: need at least 2 features, got {len(series)}")
    lengths = {s.values.size for s in series}
    if len(lengths) != 1:
        raise ValueError(f"entity {entity_id!r}: mismatched series lengths {sorted(lengths)}")
    method, report = select_method(series)
    E = report.coefficients[method].copy()
    np.fill_diagonal(E, 1.0)
    graph = EntityGraph(entity_id, entity_type, [s.feature_id for s in series],
                        np.vstack([s.values for s in series]), E, method, report)
    return graph


def neighbors_of(arc_weights: np.ndarray, i: int, delta: float) -> list[int]:
    row = np.abs(arc_weights[i])
    return [j for j in range(row.size) if j != i and row[j] > delta]


def fit_regressors(graph: EntityGraph, history: np.ndarray, delta: float = 0.3,
                   ridge: float = 1e-8) -> list[FeatureRegressor]:
    """Ridge least-squares model for each feature over its correlated neighbours.

    ``history`` is (T, N_f) with columns in node order. The intercept is not
    penalised. A feature with no neighbour above ``delta`` gets a constant
    model equal to its historical mean.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != graph.n_features:
        raise ValueError(f"history shape {history.shape} does not match {graph.n_features} features")
    regs = []
    for i in range(graph.n_features):
        nb = neighbors_of(graph.arc_weights, i, delta)
        y = history[:, i]
        if not nb:
            regs.append(FeatureRegressor(i, [], np.zeros(0), float(y.mean()), ridge))
            continue
        Xn = history[:, nb]
        xm, ym = Xn.mean(axis=0), y.mean()
        Xc, yc = Xn - xm, y - ym
        coef = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(len(nb)), Xc.T @ yc)
        regs.append(FeatureRegressor(i, nb, coef, float(ym - xm @ coef), ridge))
    return regs


def predict_feature(regressor: FeatureRegressor, neighbor_values) -> float:
    v = np.asarray(neighbor_values, dtype=np.float64).reshape(-1)
    if v.size != len(regressor.neighbors):
        raise ValueError(f"expected {len(regressor.neighbors)} neighbour values, got {v.size}")
    return float(regressor.intercept + v @ regressor.coef)


def predict_all(regressors: list[FeatureRegressor], values: np.ndarray) -> np.ndarray:
    """Predict every feature from the other entries of one feature-value vector."""
    values = np.asarray(values, dtype=np.float64)
    return np.array([predict_feature(r, values[r.neighbors]) for r in regressors])
