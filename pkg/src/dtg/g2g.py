"""Graph-to-graph transformation models.

A model maps the feature matrix of a source entity (N x T) to the feature
matrix and topology of a target entity with the same number of nodes. The
encoder is a GCN over the frozen source adjacency, the decoder is the
sigmoid of latent inner products. Sources with a different number of
features than their target are padded with pseudo features or merged by
k-means first.

Adjacency convention: ``A[i, j] == 1`` means node ``i`` aggregates from node
``j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .entity_graph import EntityGraph
from .numerics import DimensionError, OptimizerState, kmeans, make_rng, sigmoid, sgd_step

CLAMP = 1e-12


@dataclass
class AdaptationRecord:
    mode: str = "none"  # none | padded | clustered
    n_source: int = 0
    pseudo_indices: list[int] = field(default_factory=list)
    assignments: list[int] = field(default_factory=list)

    @property
    def n_adapted(self) -> int:
        if self.mode == "padded":
            return self.n_source + len(self.pseudo_indices)
        if self.mode == "clustered":
            return max(self.assignments) + 1
        return self.n_source

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Map a raw source feature matrix (rows = source features) onto the adapted graph."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-2] != self.n_source:
            raise DimensionError(f"expected {self.n_source} source rows, got {X.shape[-2]}")
        if self.mode == "padded":
            pad = np.zeros(X.shape[:-2] + (len(self.pseudo_indices), X.shape[-1]))
            return np.concatenate([X, pad], axis=-2)
        if self.mode == "clustered":
            labels = np.asarray(self.assignments)
            return np.stack([X[..., labels == c, :].mean(axis=-2) for c in range(self.n_adapted)],
                            axis=-2)
        return X

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n_source": self.n_source,
                "pseudo_indices": list(self.pseudo_indices),
                "assignments": list(self.assignments)}

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationRecord":
        return cls(d["mode"], int(d["n_source"]), [int(i) for i in d["pseudo_indices"]],
                   [int(i) for i in d["assignments"]])


@dataclass
class TrainConfig:
    lam: float = 1.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 1000
    delta: float = 0.3
    hidden_dims: list[int] | None = None  # None -> one hidden layer of width T
    seed: int = 0
    row_normalize: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def layer_dims(self, T: int) -> list[int]:
        hidden = [T] if self.hidden_dims is None else list(self.hidden_dims)
        return [T, *hidden, T]


@dataclass
class G2GModel:
    source_type: str
    target_type: str
    layer_dims: list[int]
    weights: list[np.ndarray]
    delta: float
    adjacency: np.ndarray
    adaptation: AdaptationRecord = field(default_factory=AdaptationRecord)
    lam: float = 1.0
    row_normalize: bool = False
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.layer_dims[0] != self.layer_dims[-1]:
            raise ValueError("output width F must equal window length T")
        for i, W in enumerate(self.weights):
            if W.shape != (self.layer_dims[i], self.layer_dims[i + 1]):
                raise DimensionError(f"W{i} has shape {W.shape}, expected "
                                     f"{(self.layer_dims[i], self.layer_dims[i + 1])}")
        if not self.adaptation.n_source:
            self.adaptation.n_source = self.adjacency.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def window(self) -> int:
        return self.layer_dims[0]

    @property
    def best_loss_history(self) -> list[float]:
        return list(np.minimum.accumulate(self.loss_history)) if self.loss_history else []

    def propagation_matrix(self) -> np.ndarray:
        return _propagation_matrix(self.adjacency, self.row_normalize)

    def param_count(self) -> int:
        return int(sum(W.size for W in self.weights))


@dataclass
class G2GOutput:
    Z: np.ndarray
    P: np.ndarray
    A_hat: np.ndarray


def adjacency_from_graph(g: EntityGraph | np.ndarray, delta: float) -> np.ndarray:
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    E = g.arc_weights if isinstance(g, EntityGraph) else np.asarray(g, dtype=np.float64)
    A = (np.abs(E) > delta).astype(np.float64)
    np.fill_diagonal(A, 1.0)
    return A


def adapt_pair(source: EntityGraph, target: EntityGraph, seed: int = 0
               ) -> tuple[EntityGraph, AdaptationRecord]:
    """Bring the source graph to the target's order; the target is left untouched."""
    ns, nt = source.n_features, target.n_features
    if ns == nt:
        return source, AdaptationRecord("none", ns)
    T = source.features.shape[1]
    if ns < nt:
        pseudo = list(range(ns, nt))
        E = np.zeros((nt, nt))
        E[:ns, :ns] = source.arc_weights
        E[ns:, :ns] = 1.0  # inward arcs real -> pseudo only
        np.fill_diagonal(E, 1.0)
        feats = np.vstack([source.features, np.zeros((nt - ns, T))])
        ids = list(source.feature_ids) + [f"__pseudo_{k}" for k in range(nt - ns)]
        rec = AdaptationRecord("padded", ns, pseudo_indices=pseudo)
    else:
        res = kmeans(source.features, nt, seed=seed)
        labels = res.assignments
        E = np.eye(nt)
        for a in range(nt):
            for b in range(nt):
                if a == b:
                    continue
                vals = source.arc_weights[np.ix_(labels == a, labels == b)].ravel()
                sign = -1.0 if vals.mean() < 0 else 1.0
                E[a, b] = np.clip(sign * np.abs(vals).mean(), -1.0, 1.0)
        feats = res.centroids
        ids = ["+".join(source.feature_ids[i] for i in np.flatnonzero(labels == c))
               for c in range(nt)]
        rec = AdaptationRecord("clustered", ns, assignments=[int(v) for v in labels])
    adapted = EntityGraph(source.entity_id, source.entity_type, ids, feats, E,
                          source.correlation_method)
    return adapted, rec


# -- forward / backward -------------------------------------------------------

def _propagation_matrix(A: np.ndarray, row_normalize: bool) -> np.ndarray:
    if not row_normalize:
        return A
    return A / A.sum(axis=1, keepdims=True)


def _aggregate(A: np.ndarray, H: np.ndarray) -> np.ndarray:
    # Row i sums only over its own in-neighbours, so appending nodes that
    # no existing row reads from leaves existing rows bit-identical.
    out = np.empty(H.shape[:-2] + (A.shape[0], H.shape[-1]))
    for i in range(A.shape[0]):
        nb = np.flatnonzero(A[i])
        out[..., i, :] = (A[i, nb][:, None] * H[..., nb, :]).sum(axis=-2)
    return out


def _dense(H: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("...nt,tf->...nf", H, W)


def _forward(A: np.ndarray, weights: list[np.ndarray], X: np.ndarray):
    H = X
    cache = []
    last = len(weights) - 1
    for k, W in enumerate(weights):
        AH = _aggregate(A, H)
        pre = _dense(AH, W)
        cache.append((AH, pre))
        H = pre if k == last else np.maximum(pre, 0.0)
    return H, cache


def encode(model: G2GModel, X: np.ndarray) -> np.ndarray:
    """GCN encoder: ReLU on every layer but the last."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-2:] != (model.n_nodes, model.window):
        raise DimensionError(f"expected X of shape {(model.n_nodes, model.window)}, got {X.shape}")
    Z, _ = _forward(model.propagation_matrix(), model.weights, X)
    return Z


def _gram(Z: np.ndarray) -> np.ndarray:
    Q = np.matmul(Z, np.swapaxes(Z, -1, -2))
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def decode(Z: np.ndarray, delta: float) -> G2GOutput:
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    P = sigmoid(_gram(Z))
    return G2GOutput(Z, P, (P > delta).astype(np.float64))


def sparsity_weight(A_target: np.ndarray) -> float:
    N = A_target.shape[-1]
    return (N * N - float(A_target.sum())) / (N * N)


def topology_loss(P: np.ndarray, A_target: np.ndarray) -> float:
    """Sparsity-weighted binary cross-entropy between P and the target adjacency."""
    if P.shape != A_target.shape:
        raise DimensionError(f"P {P.shape} vs target adjacency {A_target.shape}")
    Pc = np.clip(P, CLAMP, 1.0 - CLAMP)
    S = sparsity_weight(A_target)
    return float(np.sum(-S * A_target * np.log(Pc) - (1.0 - A_target) * np.log(1.0 - Pc)))


def _clamped_logs(Q: np.ndarray):
    """``log(clip(P))`` and ``log(1 - clip(P))`` for ``P = sigmoid(Q)``, from logits.

    Same values as clamping P and taking logs, without the cancellation in
    ``1 - P`` when P is close to 1. Also returns the mask of unclamped entries.
    """
    lo, hi = np.log(CLAMP), np.log1p(-CLAMP)
    log_p = -np.logaddexp(0.0, -Q)
    log_q = -np.logaddexp(0.0, Q)
    inside = (log_p > lo) & (log_q > lo)
    return np.clip(log_p, lo, hi), np.clip(log_q, lo, hi), inside


def topology_loss_from_logits(Q: np.ndarray, A_target: np.ndarray) -> float:
    log_p, log_q, _ = _clamped_logs(Q)
    S = sparsity_weight(A_target)
    return float(np.sum(-S * A_target * log_p - (1.0 - A_target) * log_q))


def feature_loss(Z: np.ndarray, X_target: np.ndarray) -> float:
    """Sum over nodes of the Euclidean distance between feature rows (not squared)."""
    if Z.shape != X_target.shape:
        raise DimensionError(f"Z {Z.shape} vs target features {X_target.shape}")
    return float(np.linalg.norm(X_target - Z, axis=-1).sum())


def total_loss(P, Z, A_target, X_target, lam: float) -> float:
    return topology_loss(P, A_target) + lam * feature_loss(Z, X_target)


def _batch_loss_and_grads(A, weights, Xs, As_t, Xt, lam, need_grad=True):
    """Mean loss over a batch of pairs and its gradient w.r.t. every weight."""
    B = Xs.shape[0]
    Z, cache = _forward(A, weights, Xs)
    Q = _gram(Z)
    log_p, log_q, inside = _clamped_logs(Q)
    N = A.shape[0]
    S = (N * N - As_t.sum(axis=(-2, -1))) / (N * N)
    S = S[:, None, None]
    LT = np.sum(-S * As_t * log_p - (1.0 - As_t) * log_q)
    D = Z - Xt
    r = np.linalg.norm(D, axis=-1)
    loss = (LT + lam * r.sum()) / B
    if not need_grad:
        return float(loss), None
    P = sigmoid(Q)
    G = np.where(inside, -S * As_t * (1.0 - P) + (1.0 - As_t) * P, 0.0)
    dZ = np.matmul(G + np.swapaxes(G, -1, -2), Z)
    safe = np.where(r > 0, r, 1.0)
    dZ += lam * np.where(r[..., None] > 0, D / safe[..., None], 0.0)
    dZ /= B
    grads = [None] * len(weights)
    dH = dZ
    last = len(weights) - 1
    for k in range(last, -1, -1):
        AH, pre = cache[k]
        dpre = dH if k == last else dH * (pre > 0)
        grads[k] = np.einsum("bnt,bnf->tf", AH, dpre)
        if k:
            dH = np.matmul(A.T, _dense(dpre, weights[k].T))
    return float(loss), grads


def grad_total_loss(model: G2GModel, X_source, A_target, X_target, lam: float):
    """Exact gradient of the total loss on one pair w.r.t. each weight matrix.

    The loss is evaluated on the smooth probabilities ``P``; the thresholded
    adjacency is inference-only.
    """
    Xs = np.asarray(X_source, dtype=np.float64)[None]
    At = np.asarray(A_target, dtype=np.float64)[None]
    Xt = np.asarray(X_target, dtype=np.float64)[None]
    if Xs.shape != Xt.shape or At.shape[1:] != (Xs.shape[1],) * 2:
        raise DimensionError("source, target and adjacency shapes are inconsistent")
    _, grads = _batch_loss_and_grads(model.propagation_matrix(), model.weights, Xs, At, Xt, lam)
    return grads


def pair_loss(model: G2GModel, X_source, A_target, X_target, lam: float) -> float:
    """Total loss of one pair, with the topology term evaluated from logits."""
    Z = encode(model, X_source)
    A_target = np.asarray(A_target, dtype=np.float64)
    return (topology_loss_from_logits(_gram(Z), A_target)
            + lam * feature_loss(Z, np.asarray(X_target, dtype=np.float64)))


def xavier_init(layer_dims: list[int], seed: int) -> list[np.ndarray]:
    rng = make_rng(seed)
    ws = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
    return ws


def train_g2g(pairs, config: TrainConfig | None = None, source_type: str = "",
              target_type: str = "", adaptation: AdaptationRecord | None = None) -> G2GModel:
    """Full-batch training on ``(X_source, A_source, X_target, A_target)`` pairs.

    All pairs must already be adapted to a common order N and share the same
    source adjacency, which the returned model freezes. The loss is averaged
    over pairs. ``loss_history[e]`` is the loss before epoch ``e`` and the
    last entry the loss after training.
    """
    config = config or TrainConfig()
    if not pairs:
        raise ValueError("no training pairs")
    Xs = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    A = np.asarray(pairs[0][1], dtype=np.float64)
    Xt = np.stack([np.asarray(p[2], dtype=np.float64) for p in pairs])
    At = np.stack([np.asarray(p[3], dtype=np.float64) for p in pairs])
    B, N, T = Xs.shape
    if Xt.shape != (B, N, T) or At.shape != (B, N, N) or A.shape != (N, N):
        raise DimensionError(f"non-conforming pair shapes: source {Xs.shape[1:]}, "
                             f"target {Xt.shape[1:]}, adjacency {A.shape}")
    for p in pairs[1:]:
        if not np.array_equal(np.asarray(p[1], dtype=np.float64), A):
            raise ValueError("all pairs must share the same source adjacency")
    dims = config.layer_dims(T)
    weights = xavier_init(dims, config.seed)
    Ap = _propagation_matrix(A, config.row_normalize)
    opt = OptimizerState(config.learning_rate, config.momentum)
    history = []
    for _ in range(config.epochs):
        loss, grads = _batch_loss_and_grads(Ap, weights, Xs, At, Xt, config.lam)
        history.append(loss)
        weights = sgd_step(weights, grads, opt)
    history.append(_batch_loss_and_grads(Ap, weights, Xs, At, Xt, config.lam, need_grad=False)[0])
    if not all(np.all(np.isfinite(W)) for W in weights):
        raise FloatingPointError("training diverged; lower the learning rate")
    return G2GModel(source_type, target_type, dims, weights, config.delta, A,
                    adaptation or AdaptationRecord("none", N), config.lam,
                    config.row_normalize, history)


def apply_g2g(model: G2GModel, X_source) -> G2GOutput:
    return decode(encode(model, X_source), model.delta)
