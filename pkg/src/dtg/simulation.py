"""System-wide digital twin graph: propagation of observed changes,
structural edits with lazy retraining, and the on-disk model database."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .data import window
from .entity_graph import EntityGraph, FeatureRegressor, FeatureSeries, build_entity_graph, fit_regressors
from .g2g import AdaptationRecord, G2GModel, TrainConfig, adapt_pair, adjacency_from_graph, apply_g2g, train_g2g
from .gaen import Generator, generator_predict

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TopologyError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


@dataclass
class GaenBundle:
    """Distilled generator for one entity plus the ensemble it was distilled from."""

    generator: Generator
    members: list[dict] = field(default_factory=list)  # identifier, kind, weight
    report: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"generator": self.generator.to_dict(), "members": self.members,
                "report": self.report}

    @classmethod
    def from_dict(cls, d: dict) -> "GaenBundle":
        return cls(Generator.from_dict(d["generator"]), d.get("members", []), d.get("report", {}))


@dataclass
class EntityRecord:
    graph: EntityGraph
    regressors: list[FeatureRegressor]
    bundle: GaenBundle | None = None

    @property
    def entity_id(self) -> str:
        return self.graph.entity_id

    @property
    def history(self) -> np.ndarray:
        return self.graph.features


@dataclass
class Arc:
    source: str
    target: str
    model: G2GModel
    signature: str


@dataclass
class SystemGraph:
    entities: dict[str, EntityRecord]
    arcs: dict[tuple[str, str], Arc]
    state: dict[str, np.ndarray]
    window: int

    def in_arcs(self, target: str) -> list[Arc]:
        return [self.arcs[k] for k in sorted(self.arcs) if k[1] == target]

    def incident(self, entity_id: str) -> list[tuple[str, str]]:
        return sorted(k for k in self.arcs if entity_id in k)

    def copy(self) -> "SystemGraph":
        return SystemGraph(dict(self.entities), dict(self.arcs),
                           {k: v.copy() for k, v in self.state.items()}, self.window)

    def validate(self):
        for (s, t), arc in self.arcs.items():
            if s == t:
                raise TopologyError(f"self-arc on {s!r}")
            for e in (s, t):
                if e not in self.entities:
                    raise TopologyError(f"arc ({s!r}, {t!r}) references unknown entity {e!r}")
            src, tgt = self.entities[s].graph, self.entities[t].graph
            m = arc.model
            if m.adaptation.n_source != src.n_features or m.n_nodes != tgt.n_features:
                raise TopologyError(f"model on arc ({s!r}, {t!r}) maps {m.adaptation.n_source} -> "
                                   f"{m.n_nodes} features, entities have {src.n_features} -> "
                                   f"{tgt.n_features}")
            if (m.source_type and m.source_type != src.entity_type) or \
                    (m.target_type and m.target_type != tgt.entity_type):
                raise TopologyError(f"model on arc ({s!r}, {t!r}) is for {m.source_type!r} -> "
                                   f"{m.target_type!r}")
            if m.window != self.window:
                raise TopologyError(f"model on arc ({s!r}, {t!r}) has window {m.window}, "
                                   f"system uses {self.window}")

    def to_dot(self) -> str:
        lines = ["digraph DTG {"]
        for eid in sorted(self.entities):
            g = self.entities[eid].graph
            lines.append(f'  "{eid}" [label="{eid}\\n{g.entity_type} ({g.n_features} features)"];')
        for (s, t) in sorted(self.arcs):
            lines.append(f'  "{s}" -> "{t}" [label="{self.arcs[(s, t)].signature[:8]}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def model_signature(source_type: str, target_type: str, n: int, T: int,
                    hidden_dims: list[int], delta: float, lam: float) -> str:
    key = json.dumps({"source_type": source_type, "target_type": target_type, "N": n, "T": T,
                      "hidden_dims": list(hidden_dims), "delta": delta, "lam": lam},
                     sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(key.encode()).hexdigest()


def signature_for(model: G2GModel) -> str:
    return model_signature(model.source_type, model.target_type, model.n_nodes, model.window,
                           model.layer_dims[1:-1], model.delta, model.lam)


def build_system(records: list[EntityRecord], arcs, models: dict, window: int) -> SystemGraph:
    """Assemble and validate a system; initial state is each entity's last window."""
    entities = {}
    for r in records:
        if r.entity_id in entities:
            raise TopologyError(f"duplicate entity {r.entity_id!r}")
        entities[r.entity_id] = r
    arc_map = {}
    for s, t in arcs:
        if s not in entities or t not in entities:
            missing = s if s not in entities else t
            raise TopologyError(f"arc ({s!r}, {t!r}) references unknown entity {missing!r}")
        if (s, t) not in models:
            raise TopologyError(f"no model for arc ({s!r}, {t!r})")
        m = models[(s, t)]
        arc_map[(s, t)] = Arc(s, t, m, signature_for(m))
    state = {}
    for eid, r in entities.items():
        if r.history.shape[1] < window:
            raise TopologyError(f"entity {eid!r} has {r.history.shape[1]} samples, window is {window}")
        state[eid] = r.history[:, -window:].copy()
    system = SystemGraph(entities, arc_map, state, window)
    system.validate()
    return system


# -- propagation ----------------------------------------------------------------

def relative_change(prev: np.ndarray, nxt: np.ndarray) -> float:
    return float(np.max(np.abs(nxt - prev)) / (np.max(np.abs(prev)) + 1e-12))


def converged(prev: dict, nxt: dict, eps: float) -> bool:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not prev:
        return True
    return max(relative_change(prev[k], nxt[k]) for k in prev) < eps


@dataclass
class IterationRecord:
    iteration: int
    max_relative_change: dict[str, float]
    updated: list[str]
    generator_used: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "max_relative_change": self.max_relative_change,
                "updated": self.updated, "generator_used": self.generator_used}


@dataclass
class SimulationTrace:
    iterations: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    observed: list[str] = field(default_factory=list)

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {"converged": self.converged, "iteration_count": self.n_iter,
                "observed": self.observed,
                "iterations": [it.to_dict() for it in self.iterations]}


def _reconcile(record: EntityRecord, Z: np.ndarray, pinned: np.ndarray) -> tuple[np.ndarray, bool]:
    """Refresh the latest timestep of unpinned features from within-entity models.

    Only features with at least one correlated neighbour are refreshed. With a
    fused generator the generator replaces the regressors.
    """
    Z = Z.copy()
    latest = Z[:, -1].copy()
    if record.bundle is not None:
        pred = generator_predict(record.bundle.generator, latest)
        Z[~pinned, -1] = pred[~pinned]
        return Z, True
    for reg in record.regressors:
        if reg.neighbors and not pinned[reg.target]:
            Z[reg.target, -1] = reg.intercept + latest[reg.neighbors] @ reg.coef
    return Z, False


def _observation_matrix(system: SystemGraph, eid: str, obs) -> tuple[np.ndarray, np.ndarray]:
    current = system.state[eid]
    n, T = current.shape
    if isinstance(obs, dict):
        ids = system.entities[eid].graph.feature_ids
        M = current.copy()
        pinned = np.zeros(n, dtype=bool)
        for fid, vals in obs.items():
            if fid not in ids:
                raise KeyError(f"entity {eid!r} has no feature {fid!r}")
            i = ids.index(fid)
            vals = np.asarray(vals, dtype=np.float64)
            if vals.ndim == 0:
                M[i, -1] = vals
            elif vals.shape == (T,):
                M[i] = vals
            else:
                raise ValueError(f"observation for {eid}.{fid} must be a scalar or length {T}")
            pinned[i] = True
        return M, pinned
    M = np.asarray(obs, dtype=np.float64)
    if M.shape != (n, T):
        raise ValueError(f"observation for {eid!r} has shape {M.shape}, expected {(n, T)}")
    return M.copy(), np.ones(n, dtype=bool)


def propagate(system: SystemGraph, observations: dict | None = None, eps: float = 1e-4,
              max_iters: int = 100) -> tuple[dict[str, np.ndarray], SimulationTrace]:
    """Propagate observed changes through the system to a fixed point.

    ``observations`` maps entity id to either a full ``N_f x T`` matrix or a
    ``{feature_id: values}`` dict (a length-T vector, or a scalar for the
    latest timestep). Observed features are pinned. Rounds are synchronous:
    every target whose source changed in the previous round is recomputed
    from the previous state (averaging over changed in-arcs), then committed.
    Stops when the largest relative change of a round is below ``eps``.
    The system itself is not modified.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    observations = observations or {}
    state = {k: v.copy() for k, v in system.state.items()}
    pinned = {k: np.zeros(v.shape[0], dtype=bool) for k, v in state.items()}
    changed = set()
    trace = SimulationTrace(observed=sorted(observations))
    for eid in sorted(observations):
        if eid not in system.entities:
            raise KeyError(f"unknown entity {eid!r}")
        M, mask = _observation_matrix(system, eid, observations[eid])
        pinned[eid] = mask
        if not mask.all():
            M, _ = _reconcile(system.entities[eid], M, mask)
        if not np.array_equal(M, state[eid]):
            changed.add(eid)
        state[eid] = M

    for it in range(1, max_iters + 1):
        prev = state
        updates, gen_used = {}, []
        targets = sorted({t for (s, t) in system.arcs if s in changed and not pinned[t].all()})
        for t in targets:
            outs = [apply_g2g(a.model, a.model.adaptation.apply(prev[a.source])).Z
                    for a in system.in_arcs(t) if a.source in changed]
            Z = np.mean(outs, axis=0) if len(outs) > 1 else outs[0]
            Z = np.where(pinned[t][:, None], prev[t], Z)
            Z, used = _reconcile(system.entities[t], Z, pinned[t])
            if used:
                gen_used.append(t)
            updates[t] = Z
        state = {**prev, **updates}
        changes = {k: relative_change(prev[k], state[k]) for k in sorted(state)}
        changed = {k for k in updates if changes[k] > 0.0}
        trace.iterations.append(IterationRecord(it, changes, sorted(updates), gen_used))
        if converged(prev, state, eps):
            trace.converged = True
            break
    return state, trace


# -- database ---------------------------------------------------------------------

def serialize_model(model: G2GModel, signature: str) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "signature": signature,
        "source_type": model.source_type,
        "target_type": model.target_type,
        "layer_dims": list(model.layer_dims),
        "shapes": [list(W.shape) for W in model.weights],
        "delta": model.delta,
        "lam": model.lam,
        "row_normalize": model.row_normalize,
        "adjacency": model.adjacency.tolist(),
        "adaptation": model.adaptation.to_dict(),
        "loss_history": list(model.loss_history),
    }
    blob = b"".join(np.ascontiguousarray(W, dtype="<f8").tobytes() for W in model.weights)
    return (json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
            + base64.b64encode(blob) + b"\n")


def deserialize_model(data: bytes) -> tuple[G2GModel, str]:
    head, _, body = data.partition(b"\n")
    header = json.loads(head)
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"unsupported record format {header.get('format_version')}")
    raw = base64.b64decode(body.strip(), validate=True)
    flat = np.frombuffer(raw, dtype="<f8")
    weights, off = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape))
        weights.append(flat[off:off + size].reshape(shape).astype(np.float64))
        off += size
    if off != flat.size:
        raise IntegrityError("weight block length does not match header shapes")
    model = G2GModel(header["source_type"], header["target_type"], header["layer_dims"], weights,
                     header["delta"], np.asarray(header["adjacency"], dtype=np.float64),
                     AdaptationRecord.from_dict(header["adaptation"]), header["lam"],
                     header["row_normalize"], list(header["loss_history"]))
    return model, header["signature"]


def _entity_template_key(entity_type: str) -> str:
    return "entity-" + hashlib.sha256(entity_type.encode()).hexdigest()


class DtgDatabase:
    """Content-addressed store of trained G2G models and entity templates.

    Layout: ``manifest.json`` indexes every record (file name + sha256); each
    G2G record is a JSON header line followed by a base64 line holding the
    little-endian float64 weights in layer order. Writes go to a temporary
    file and are renamed into place under a file lock.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._flock = FileLock(str(self.root / ".lock"))
        if not (self.root / "manifest.json").exists():
            with self._flock:
                if not (self.root / "manifest.json").exists():
                    self._write_manifest({"format_version": FORMAT_VERSION, "records": {}})

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        return json.loads(self.manifest_path.read_text())

    def _atomic_write(self, path: Path, data: bytes):
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _write_manifest(self, manifest: dict):
        self._atomic_write(self.manifest_path,
                           (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())

    def _put_bytes(self, key: str, kind: str, data: bytes):
        fname = f"{key}.rec"
        with self._lock, self._flock:
            self._atomic_write(self.root / fname, data)
            manifest = self.manifest()
            manifest["records"][key] = {"file": fname, "kind": kind,
                                        "sha256": hashlib.sha256(data).hexdigest()}
            self._write_manifest(manifest)

    def _get_bytes(self, key: str) -> bytes | None:
        entry = self.manifest()["records"].get(key)
        if entry is None:
            return None
        path = self.root / entry["file"]
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise IntegrityError(f"record {key} is missing its file {entry['file']}") from None
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"record {key} ({entry['file']}) fails its checksum")
        return data

    def put(self, signature: str, model: G2GModel):
        self._put_bytes(signature, "g2g", serialize_model(model, signature))

    def get(self, signature: str) -> G2GModel | None:
        data = self._get_bytes(signature)
        if data is None:
            return None
        model, stored = deserialize_model(data)
        if stored != signature:
            raise IntegrityError(f"record {signature} holds signature {stored}")
        return model

    def get_bytes(self, signature: str) -> bytes | None:
        return self._get_bytes(signature)

    def put_entity(self, entity_type: str, template: dict):
        data = (json.dumps({"entity_type": entity_type, **template}, sort_keys=True,
                           separators=(",", ":")) + "\n").encode()
        self._put_bytes(_entity_template_key(entity_type), "entity", data)

    def get_entity(self, entity_type: str) -> dict | None:
        data = self._get_bytes(_entity_template_key(entity_type))
        return None if data is None else json.loads(data)

    def list(self) -> list[dict]:
        recs = self.manifest()["records"]
        return [{"key": k, **recs[k]} for k in sorted(recs)]

    def verify(self) -> list[str]:
        """Keys of records whose file is missing or fails its checksum."""
        bad = []
        for key in sorted(self.manifest()["records"]):
            try:
                self._get_bytes(key)
            except IntegrityError:
                bad.append(key)
        return bad


def db_get(db: DtgDatabase, signature: str) -> G2GModel | None:
    return db.get(signature)


def db_put(db: DtgDatabase, signature: str, model: G2GModel):
    db.put(signature, model)


# -- lazy construction ------------------------------------------------------------

class LazyBuilder:
    """Entity-graph and G2G construction backed by the database.

    A request is served from the database when a record with the same key
    exists and is only built or trained otherwise. ``train_calls`` and
    ``build_calls`` count actual work done.
    """

    def __init__(self, db: DtgDatabase, config: TrainConfig, window: int, stride: int = 1,
                 ridge: float = 1e-8):
        self.db = db
        self.config = config
        self.window = window
        self.stride = stride
        self.ridge = ridge
        self.train_calls = 0
        self.build_calls = 0
        self.loss_curves: dict[tuple[str, str], list[float]] = {}

    def entity(self, entity_id: str, entity_type: str, series: list[FeatureSeries]) -> EntityRecord:
        ids = [s.feature_id for s in series]
        history = np.vstack([s.values for s in series])
        tmpl = self.db.get_entity(entity_type)
        if tmpl is not None and tmpl["feature_ids"] == ids and tmpl["delta"] == self.config.delta:
            graph = EntityGraph(entity_id, entity_type, ids, history,
                                np.asarray(tmpl["arc_weights"], dtype=np.float64),
                                tmpl["correlation_method"])
            regs = [FeatureRegressor.from_dict(d) for d in tmpl["regressors"]]
            return EntityRecord(graph, regs)
        self.build_calls += 1
        graph = build_entity_graph(entity_id, entity_type, series)
        regs = fit_regressors(graph, history.T, self.config.delta, self.ridge)
        self.db.put_entity(entity_type, {
            "feature_ids": ids, "delta": self.config.delta,
            "arc_weights": graph.arc_weights.tolist(),
            "correlation_method": graph.correlation_method,
            "regressors": [r.to_dict() for r in regs]})
        return EntityRecord(graph, regs)

    def signature(self, source: EntityGraph, target: EntityGraph) -> str:
        return model_signature(source.entity_type, target.entity_type, target.n_features,
                               self.window, self.config.layer_dims(self.window)[1:-1],
                               self.config.delta, self.config.lam)

    def arc_model(self, source: EntityRecord, target: EntityRecord) -> tuple[G2GModel, str, bool]:
        """Fetch or train the model for ``source -> target``; the flag is True if trained."""
        src, tgt = source.graph, target.graph
        sig = self.signature(src, tgt)
        model = self.db.get(sig)
        if model is not None and model.adaptation.n_source == src.n_features:
            return model, sig, False
        adapted, record = adapt_pair(src, tgt, seed=self.config.seed)
        arc = (src.entity_id, tgt.entity_id)
        n = min(src.features.shape[1], tgt.features.shape[1])
        if n < self.window:
            raise InsufficientDataError(
                f"arc {arc[0]} -> {arc[1]}: {n} aligned samples, need at least {self.window}")
        A_s = adjacency_from_graph(adapted, self.config.delta)
        A_t = adjacency_from_graph(tgt, self.config.delta)
        xs = window(record.apply(src.features[:, -n:]), self.window, self.stride)
        xt = window(tgt.features[:, -n:], self.window, self.stride)
        self.train_calls += 1
        model = train_g2g([(a, A_s, b, A_t) for a, b in zip(xs, xt)], self.config,
                          src.entity_type, tgt.entity_type, record)
        self.loss_curves[arc] = list(model.loss_history)
        self.db.put(sig, model)
        return model, sig, True


@dataclass
class ScenarioEvent:
    kind: str  # observe | remove_entity | add_entity | rewire
    entity_id: str | None = None
    entity_type: str | None = None
    series: list[FeatureSeries] | None = None
    observations: dict | None = None
    add_arcs: list[tuple[str, str]] = field(default_factory=list)
    remove_arcs: list[tuple[str, str]] = field(default_factory=list)

    KINDS = ("observe", "remove_entity", "add_entity", "rewire")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        self.add_arcs = [tuple(a) for a in self.add_arcs]
        self.remove_arcs = [tuple(a) for a in self.remove_arcs]


def apply_structural_change(system: SystemGraph, event: ScenarioEvent,
                            builder: LazyBuilder) -> SystemGraph:
    """Apply a structural event; only arcs incident to the change are (re)built.

    Returns a new SystemGraph; untouched arcs keep their model objects.
    Replacing an existing entity (``add_entity`` with a known id) keeps its
    arcs and refreshes every incident model through the database.
    """
    new = system.copy()
    if event.kind == "remove_entity":
        if event.entity_id not in new.entities:
            raise TopologyError(f"cannot remove unknown entity {event.entity_id!r}")
        for key in new.incident(event.entity_id):
            del new.arcs[key]
        del new.entities[event.entity_id]
        del new.state[event.entity_id]
        return new

    stale: list[tuple[str, str]] = []
    if event.kind == "add_entity":
        if not event.entity_id or not event.entity_type or not event.series:
            raise TopologyError("add_entity needs entity_id, entity_type and series")
        rec = builder.entity(event.entity_id, event.entity_type, event.series)
        if rec.history.shape[1] < new.window:
            raise InsufficientDataError(f"entity {event.entity_id!r}: {rec.history.shape[1]} "
                                        f"samples, window is {new.window}")
        replaced = event.entity_id in new.entities
        new.entities[event.entity_id] = rec
        new.state[event.entity_id] = rec.history[:, -new.window:].copy()
        if replaced:
            stale.extend(new.incident(event.entity_id))
    elif event.kind == "rewire":
        for key in event.remove_arcs:
            if key not in new.arcs:
                raise TopologyError(f"cannot remove missing arc {key}")
            del new.arcs[key]
    else:
        raise TopologyError(f"{event.kind!r} is not a structural event")

    for s, t in event.add_arcs:
        if s == t:
            raise TopologyError(f"self-arc on {s!r}")
        for e in (s, t):
            if e not in new.entities:
                raise TopologyError(f"arc ({s!r}, {t!r}) references unknown entity {e!r}")
        stale.append((s, t))
    for s, t in sorted(set(stale)):
        model, sig, _ = builder.arc_model(new.entities[s], new.entities[t])
        new.arcs[(s, t)] = Arc(s, t, model, sig)
    new.validate()
    return new
