"""Ensemble fusion of data-driven regressors with external domain-knowledge
models (DKMs), distilled into a small generator by adversarial training.

External DKMs run as child processes speaking newline-delimited JSON on
stdin/stdout::

    -> {"id": 3, "inputs": [0.1, 2.0]}
    <- {"id": 3, "outputs": [0.4, 1.9]}

and answer the probe ``{"id": 0, "inputs": []}`` with
``{"id": 0, "outputs": [], "dim": N}``.
"""
from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .entity_graph import FeatureRegressor, predict_all
from .numerics import DimensionError, OptimizerState, make_rng, sgd_step, sigmoid

log = logging.getLogger(__name__)

INTERNAL = "internal_regressors"
EXTERNAL = "external_dkm"


class RegistrationError(RuntimeError):
    pass


class MemberError(RuntimeError):
    pass


class DkmProcess:
    """Line-oriented JSON client for one external predictor process.

    Requests are serialised with a lock; a reader thread feeds responses to
    a queue so that reads can time out.
    """

    def __init__(self, command: str | list[str], timeout: float = 5.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._next_id = 1
        self._proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      stderr=subprocess.DEVNULL, text=True, bufsize=1)
        self._lines: queue.Queue = queue.Queue()
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _roundtrip(self, req_id: int, inputs: list[float]) -> dict:
        msg = json.dumps({"id": req_id, "inputs": inputs}, separators=(",", ":"))
        try:
            self._proc.stdin.write(msg + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise MemberError(f"DKM {self.argv[0]!r}: process not accepting input") from exc
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise MemberError(f"DKM {self.argv[0]!r}: no response within {self.timeout}s") from None
        if line is None:
            raise MemberError(f"DKM {self.argv[0]!r}: process exited")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MemberError(f"DKM {self.argv[0]!r}: malformed response {line.strip()!r}") from exc
        if not isinstance(resp, dict) or resp.get("id") != req_id or "outputs" not in resp:
            raise MemberError(f"DKM {self.argv[0]!r}: unexpected response {line.strip()!r}")
        return resp

    def probe(self) -> int:
        with self._lock:
            resp = self._roundtrip(0, [])
        dim = resp.get("dim")
        if not isinstance(dim, int) or dim < 1 or resp["outputs"] != []:
            raise MemberError(f"DKM {self.argv[0]!r}: bad probe response {resp!r}")
        return dim

    def request(self, inputs) -> np.ndarray:
        with self._lock:
            req_id = self._next_id
            self._next_id += 1
            resp = self._roundtrip(req_id, [float(v) for v in inputs])
        return np.asarray(resp["outputs"], dtype=np.float64)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()


@dataclass
class PredictorHandle:
    kind: str
    identifier: str
    dim: int
    predict_fn: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    trust_weight: float = 1.0
    param_count: int = 0
    process: DkmProcess | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.trust_weight > 0:
            raise RegistrationError(f"{self.identifier}: trust weight must be positive")

    def predict(self, x: np.ndarray) -> np.ndarray:
        try:
            y = np.asarray(self.predict_fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)
        except Exception as exc:
            raise MemberError(f"member {self.identifier!r} failed: {exc}") from exc
        if y.shape != (self.dim,) or not np.all(np.isfinite(y)):
            raise MemberError(f"member {self.identifier!r} returned {y.shape} output, "
                              f"expected ({self.dim},) finite values")
        return y

    def close(self):
        if self.process is not None:
            self.process.close()


def internal_member(regressors: list[FeatureRegressor], identifier: str = "regressors",
                    trust_weight: float = 1.0) -> PredictorHandle:
    """Wrap an entity's per-feature regressors as an ensemble member."""
    n_params = sum(r.coef.size + 1 for r in regressors)
    return PredictorHandle(INTERNAL, identifier, len(regressors),
                           lambda x: predict_all(regressors, x), trust_weight, n_params)


def register_dkm(descriptor: str | list[str], trust_weight: float = 1.0,
                 dim: int | None = None, timeout: float = 5.0,
                 param_count: int = 0) -> PredictorHandle:
    """Launch an external predictor and validate it with a probe round-trip.

    ``dim`` is the entity's feature count; a predictor reporting or
    returning a different dimension is rejected. ``param_count`` is the
    model size the caller declares for the DKM (the protocol carries none).
    """
    if not trust_weight > 0:
        raise RegistrationError(f"trust weight must be positive, got {trust_weight}")
    try:
        proc = DkmProcess(descriptor, timeout)
    except OSError as exc:
        raise RegistrationError(f"cannot launch DKM {descriptor!r}: {exc}") from exc
    try:
        reported = proc.probe()
        if dim is not None and reported != dim:
            raise RegistrationError(f"DKM {descriptor!r} reports dim {reported}, entity has {dim}")
        out = proc.request(np.zeros(reported))
        if out.shape != (reported,):
            raise RegistrationError(f"DKM {descriptor!r} returned {out.size} outputs for "
                                    f"dim {reported}")
    except (MemberError, RegistrationError) as exc:
        proc.close()
        if isinstance(exc, RegistrationError):
            raise
        raise RegistrationError(str(exc)) from exc
    ident = descriptor if isinstance(descriptor, str) else " ".join(descriptor)
    return PredictorHandle(EXTERNAL, ident, reported, proc.request, trust_weight,
                           int(param_count), proc)


@dataclass
class EnsembleModel:
    members: list[PredictorHandle]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        dims = {m.dim for m in self.members}
        if len(dims) != 1:
            raise DimensionError(f"members disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.members[0].dim

    @property
    def weights(self) -> np.ndarray:
        w = np.array([m.trust_weight for m in self.members], dtype=np.float64)
        return w / w.sum()

    def effective_param_count(self) -> int:
        return int(sum(m.param_count for m in self.members))

    def close(self):
        for m in self.members:
            m.close()


def ensemble_predict(ensemble: EnsembleModel, x) -> np.ndarray:
    """Trust-weighted average of the member outputs."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != ensemble.dim:
        raise DimensionError(f"input has {x.size} entries, ensemble expects {ensemble.dim}")
    out = np.zeros(ensemble.dim)
    for w, m in zip(ensemble.weights, ensemble.members):
        out += w * m.predict(x)
    return out


def ensemble_predict_batch(ensemble: EnsembleModel, X: np.ndarray) -> np.ndarray:
    return np.stack([ensemble_predict(ensemble, x) for x in X])


# -- networks -------------------------------------------------------------------

@dataclass
class Generator:
    """Noise (dim N) -> ReLU hidden layer -> feature values (dim N)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "Generator":
        a1, a2 = np.sqrt(6.0 / (dim + hidden)), np.sqrt(6.0 / (hidden + dim))
        return cls(rng.uniform(-a1, a1, (dim, hidden)), np.zeros(hidden),
                   rng.uniform(-a2, a2, (hidden, dim)), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.W1.shape[0]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def with_params(self, ps) -> "Generator":
        return Generator(*ps)

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params))

    def forward(self, Z: np.ndarray):
        pre = Z @ self.W1 + self.b1
        h = np.maximum(pre, 0.0)
        return h @ self.W2 + self.b2, (Z, pre, h)

    def backward(self, cache, d_out):
        Z, pre, h = cache
        dW2 = h.T @ d_out
        db2 = d_out.sum(axis=0)
        dpre = (d_out @ self.W2.T) * (pre > 0)
        return [Z.T @ dpre, dpre.sum(axis=0), dW2, db2]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("W1", "b1", "W2", "b2")}

    @classmethod
    def from_dict(cls, d: dict) -> "Generator":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2")))


@dataclass
class Discriminator:
    """Feature values (dim N) -> ReLU hidden layer -> probability of 'ensemble output'."""

    V1: np.ndarray
    c1: np.ndarray
    V2: np.ndarray
    c2: np.ndarray

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "Discriminator":
        a1, a2 = np.sqrt(6.0 / (dim + hidden)), np.sqrt(6.0 / (hidden + 1))
        return cls(rng.uniform(-a1, a1, (dim, hidden)), np.zeros(hidden),
                   rng.uniform(-a2, a2, (hidden, 1)), np.zeros(1))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.V1, self.c1, self.V2, self.c2]

    def with_params(self, ps) -> "Discriminator":
        return Discriminator(*ps)

    def logits(self, X: np.ndarray):
        pre = X @ self.V1 + self.c1
        h = np.maximum(pre, 0.0)
        return (h @ self.V2 + self.c2)[:, 0], (X, pre, h)

    def prob(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(X)[0])

    def backward(self, cache, d_logits):
        """Gradients w.r.t. the parameters and the input, given dL/dlogits."""
        X, pre, h = cache
        d = d_logits[:, None]
        dV2 = h.T @ d
        dc2 = d.sum(axis=0)
        dpre = (d @ self.V2.T) * (pre > 0)
        return [X.T @ dpre, dpre.sum(axis=0), dV2, dc2], dpre @ self.V1.T


def _softplus(x):
    return np.logaddexp(0.0, x)


def discriminator_loss(disc: Discriminator, real: np.ndarray, fake: np.ndarray):
    """``-mean log D(real) - mean log(1 - D(fake))`` and its parameter gradients."""
    s_r, c_r = disc.logits(real)
    s_f, c_f = disc.logits(fake)
    loss = _softplus(-s_r).mean() + _softplus(s_f).mean()
    g_r, _ = disc.backward(c_r, (sigmoid(s_r) - 1.0) / len(s_r))
    g_f, _ = disc.backward(c_f, sigmoid(s_f) / len(s_f))
    return float(loss), [a + b for a, b in zip(g_r, g_f)]


def generator_loss(gen: Generator, disc: Discriminator, noise: np.ndarray):
    """Non-saturating ``-mean log D(G(z))`` and its generator gradients."""
    fake, g_cache = gen.forward(noise)
    s_f, d_cache = disc.logits(fake)
    loss = _softplus(-s_f).mean()
    _, d_fake = disc.backward(d_cache, (sigmoid(s_f) - 1.0) / len(s_f))
    return float(loss), gen.backward(g_cache, d_fake)


def generator_predict(gen: Generator, noise) -> np.ndarray:
    z = np.asarray(noise, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != gen.dim:
        raise DimensionError(f"noise has {z.shape[1]} entries, generator expects {gen.dim}")
    out = gen.forward(z)[0]
    return out[0] if single else out


@dataclass
class FusionConfig:
    noise_std: float = 1.0
    batch_size: int = 64
    max_epochs: int = 3000
    band: tuple[float, float] = (0.45, 0.55)
    consecutive_checks: int = 5
    check_every: int = 10
    min_epochs: int = 300
    learning_rate: float = 0.02
    d_learning_rate: float | None = 0.05  # None -> learning_rate
    momentum: float = 0.0
    hidden_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.band
        if not 0.0 < lo < 0.5 < hi < 1.0:
            raise ValueError(f"equilibrium band must satisfy 0 < lo < 0.5 < hi < 1, got {self.band}")
        self.band = (float(lo), float(hi))


@dataclass
class DistillReport:
    converged: bool
    epochs: int
    final_accuracy: float
    accuracy_history: list[tuple[int, float]]
    mean_distance: float
    covariance_distance: float
    generator_params: int
    ensemble_params: int

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "epochs": self.epochs,
            "final_discriminator_accuracy": self.final_accuracy,
            "accuracy_history": [[e, a] for e, a in self.accuracy_history],
            "mean_distance": self.mean_distance,
            "covariance_distance": self.covariance_distance,
            "generator_params": self.generator_params,
            "ensemble_params": self.ensemble_params,
        }


def discriminator_accuracy(disc: Discriminator, real: np.ndarray, fake: np.ndarray) -> float:
    correct = np.sum(disc.prob(real) > 0.5) + np.sum(disc.prob(fake) <= 0.5)
    return float(correct) / (len(real) + len(fake))


def distill(ensemble: EnsembleModel, config: FusionConfig | None = None
            ) -> tuple[Generator, DistillReport]:
    """Adversarially distil the ensemble into a generator.

    Each epoch draws one Gaussian noise batch that is fed to both the
    generator and the ensemble, then takes one discriminator step and one
    generator step. Every ``check_every`` epochs past ``min_epochs`` the
    discriminator is scored on a fresh held-out batch; training stops once
    its accuracy has stayed inside ``band`` for ``consecutive_checks`` checks
    in a row. Hitting ``max_epochs`` is reported as non-converged.
    """
    cfg = config or FusionConfig()
    n = ensemble.dim
    rng = make_rng(cfg.seed)
    eval_rng = make_rng(cfg.seed + 1)
    hidden = cfg.hidden_factor * n
    gen = Generator.init(n, hidden, rng)
    disc = Discriminator.init(n, hidden, rng)
    g_opt = OptimizerState(cfg.learning_rate, cfg.momentum)
    d_opt = OptimizerState(cfg.d_learning_rate or cfg.learning_rate, cfg.momentum)
    lo, hi = cfg.band
    streak = 0
    history: list[tuple[int, float]] = []
    converged = False
    epoch = 0
    acc = float("nan")
    for epoch in range(1, cfg.max_epochs + 1):
        noise = rng.normal(0.0, cfg.noise_std, (cfg.batch_size, n))
        real = ensemble_predict_batch(ensemble, noise)
        fake = gen.forward(noise)[0]
        _, d_grads = discriminator_loss(disc, real, fake)
        disc = disc.with_params(sgd_step(disc.params, d_grads, d_opt))
        _, g_grads = generator_loss(gen, disc, noise)
        gen = gen.with_params(sgd_step(gen.params, g_grads, g_opt))

        if epoch >= cfg.min_epochs and epoch % cfg.check_every == 0:
            held = eval_rng.normal(0.0, cfg.noise_std, (cfg.batch_size, n))
            acc = discriminator_accuracy(disc, ensemble_predict_batch(ensemble, held),
                                         gen.forward(held)[0])
            history.append((epoch, acc))
            streak = streak + 1 if lo <= acc <= hi else 0
            if streak >= cfg.consecutive_checks:
                converged = True
                break
    if not converged:
        log.info("distillation stopped at max_epochs=%d without equilibrium", cfg.max_epochs)

    held = eval_rng.normal(0.0, cfg.noise_std, (cfg.batch_size, n))
    ens_out = ensemble_predict_batch(ensemble, held)
    gen_out = gen.forward(held)[0]
    if np.isnan(acc):
        acc = discriminator_accuracy(disc, ens_out, gen_out)
    cov_e = np.cov(ens_out, rowvar=False).reshape(n, n)
    cov_g = np.cov(gen_out, rowvar=False).reshape(n, n)
    report = DistillReport(
        converged, epoch, acc, history,
        float(np.linalg.norm(gen_out.mean(axis=0) - ens_out.mean(axis=0))),
        float(np.linalg.norm(cov_g - cov_e)),
        gen.param_count(), ensemble.effective_param_count())
    return gen, report
