"""Batch pipeline: build entity graphs, train arc models, fuse DKMs, simulate.

Every command reads a JSON config (see ``ProjectConfig``); individual keys
can be overridden with ``--set key=value`` (value parsed as JSON). On
failure a single-line JSON error is written to stderr and the exit code is
non-zero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import IngestionError, ProjectConfig, ingest
from .entity_graph import EntityGraph, FeatureRegressor, build_entity_graph, fit_regressors
from .g2g import adjacency_from_graph
from .gaen import EnsembleModel, distill, internal_member, register_dkm
from .simulation import (DtgDatabase, EntityRecord, GaenBundle, LazyBuilder, ScenarioEvent,
                         SystemGraph, apply_structural_change, build_system, propagate)

log = logging.getLogger("dtg")

SYSTEM_FORMAT = 1


class CommandError(RuntimeError):
    pass


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CommandError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from None


def load_topology(path) -> dict:
    topo = _load_json(path)
    ids = [e["entity_id"] for e in topo.get("entities", [])]
    if len(set(ids)) != len(ids):
        raise CommandError("topology: entity ids must be unique")
    for s, t in topo.get("arcs", []):
        if s not in ids or t not in ids:
            raise CommandError(f"topology: arc ({s}, {t}) references an undeclared entity")
    return topo


def _entity_path(cfg: ProjectConfig, eid: str) -> Path:
    return Path(cfg.output_dir) / "entities" / f"{eid}.json"


def _load_record(cfg: ProjectConfig, eid: str) -> EntityRecord:
    path = _entity_path(cfg, eid)
    if not path.exists():
        raise CommandError(f"no entity artifact for {eid!r}; run build-entity first")
    d = _load_json(path)
    rec = EntityRecord(EntityGraph.from_dict(d["graph"]),
                       [FeatureRegressor.from_dict(r) for r in d["regressors"]])
    fusion = Path(cfg.output_dir) / "fusion" / f"{eid}.json"
    if fusion.exists():
        rec.bundle = GaenBundle.from_dict(_load_json(fusion))
    return rec


def cmd_build_entity(cfg: ProjectConfig, args) -> int:
    topo = load_topology(args.topology)
    db = DtgDatabase(cfg.db_dir)
    for ent in topo["entities"]:
        series, _, gaps = ingest(Path(cfg.data_dir) / ent["data"])
        graph = build_entity_graph(ent["entity_id"], ent["entity_type"], series)
        regs = fit_regressors(graph, graph.features.T, cfg.delta, cfg.ridge)
        report = {
            "entity_id": graph.entity_id,
            "entity_type": graph.entity_type,
            "correlation_method": graph.correlation_method,
            "confidence": graph.report.mean_confidence,
            "correlation": graph.report.to_dict(),
            "adjacency": adjacency_from_graph(graph, cfg.delta).tolist(),
            "gaps": {g.feature_id: {"interior": g.interior_filled, "edge": g.edge_filled}
                     for g in gaps},
            "graph": graph.to_dict(),
            "regressors": [r.to_dict() for r in regs],
        }
        _dump(_entity_path(cfg, graph.entity_id), report)
        db.put_entity(graph.entity_type, {
            "feature_ids": graph.feature_ids, "delta": cfg.delta,
            "arc_weights": graph.arc_weights.tolist(),
            "correlation_method": graph.correlation_method,
            "regressors": [r.to_dict() for r in regs]})
        log.info("entity %s: %s (mean confidence %.4f)", graph.entity_id,
                 graph.correlation_method, graph.report.mean_confidence[graph.correlation_method])
    return 0


def _write_loss_curve(path: Path, history: list[float]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "best_loss"])
    best = float("inf")
    for e, v in enumerate(history):
        best = min(best, v)
        w.writerow([e, repr(v), repr(best)])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def cmd_train_g2g(cfg: ProjectConfig, args) -> int:
    topo = load_topology(args.topology)
    db = DtgDatabase(cfg.db_dir)
    builder = LazyBuilder(db, cfg.train_config(), cfg.window, cfg.stride, cfg.ridge)
    records = {e["entity_id"]: _load_record(cfg, e["entity_id"]) for e in topo["entities"]}
    arcs = []
    for s, t in topo["arcs"]:
        model, sig, trained = builder.arc_model(records[s], records[t])
        log.info("arc %s -> %s: %s (%s)", s, t, sig[:12], "trained" if trained else "db hit")
        _write_loss_curve(Path(cfg.output_dir) / "loss_curves" / f"{s}__{t}.csv",
                          model.loss_history)
        arcs.append({"source": s, "target": t, "signature": sig,
                     "adaptation": model.adaptation.mode,
                     "final_loss": model.loss_history[-1] if model.loss_history else None})
    system = {
        "format_version": SYSTEM_FORMAT,
        "window": cfg.window,
        "entities": [{"entity_id": e["entity_id"], "entity_type": e["entity_type"],
                      "data": e["data"]} for e in topo["entities"]],
        "arcs": arcs,
    }
    _dump(Path(cfg.output_dir) / "system.json", system)
    return 0


def parse_dkm_spec(spec: str) -> tuple[str, float, int]:
    """``CMD[:weight[:params]]``; trailing numeric fields are split off the right."""
    parts = spec.split(":")
    nums = []
    while len(parts) > 1 and len(nums) < 2:
        try:
            nums.insert(0, float(parts[-1]))
        except ValueError:
            break
        parts.pop()
    cmd = ":".join(parts)
    weight = nums[0] if nums else 1.0
    params = int(nums[1]) if len(nums) > 1 else 0
    return cmd, weight, params


def cmd_fuse(cfg: ProjectConfig, args) -> int:
    rec = _load_record(cfg, args.entity)
    members = [internal_member(rec.regressors, f"{args.entity}:regressors",
                               args.internal_weight)]
    try:
        for spec in args.dkm or []:
            cmd, weight, params = parse_dkm_spec(spec)
            members.append(register_dkm(cmd, weight, rec.graph.n_features, cfg.dkm_timeout, params))
        ens = EnsembleModel(members)
        gen, report = distill(ens, cfg.fusion_config())
    finally:
        for m in members:
            m.close()
    bundle = GaenBundle(gen, [{"identifier": m.identifier, "kind": m.kind,
                               "weight": float(w), "param_count": m.param_count}
                              for m, w in zip(members, ens.weights)],
                        {"entity_id": args.entity, **report.to_dict()})
    _dump(Path(cfg.output_dir) / "fusion" / f"{args.entity}.json", bundle.to_dict())
    log.info("fusion %s: converged=%s accuracy=%.3f", args.entity, report.converged,
             report.final_accuracy)
    return 0


def load_system(cfg: ProjectConfig, path) -> tuple[SystemGraph, dict]:
    spec = _load_json(path)
    if spec.get("format_version") != SYSTEM_FORMAT:
        raise CommandError(f"{path}: unsupported system format {spec.get('format_version')}")
    db = DtgDatabase(cfg.db_dir)
    records = [_load_record(cfg, e["entity_id"]) for e in spec["entities"]]
    models = {}
    for a in spec["arcs"]:
        m = db.get(a["signature"])
        if m is None:
            raise CommandError(f"model {a['signature']} for arc {a['source']} -> {a['target']} "
                               "is not in the database")
        models[(a["source"], a["target"])] = m
    system = build_system(records, [(a["source"], a["target"]) for a in spec["arcs"]], models,
                          spec["window"])
    return system, spec


def _event_from_json(cfg: ProjectConfig, ev: dict) -> ScenarioEvent:
    kind = ev.get("kind")
    if kind == "observe":
        obs = {}
        for eid, o in ev.get("observations", {}).items():
            obs[eid] = o["matrix"] if "matrix" in o else o["features"]
        return ScenarioEvent("observe", observations=obs)
    if kind == "remove_entity":
        return ScenarioEvent(kind, entity_id=ev["entity"])
    if kind == "add_entity":
        series, _, _ = ingest(Path(cfg.data_dir) / ev["data"])
        return ScenarioEvent(kind, entity_id=ev["entity"], entity_type=ev["entity_type"],
                             series=series, add_arcs=ev.get("arcs", []))
    if kind == "rewire":
        return ScenarioEvent(kind, add_arcs=ev.get("add_arcs", []),
                             remove_arcs=ev.get("remove_arcs", []))
    raise CommandError(f"unknown scenario event kind {kind!r}")


def state_to_json(system: SystemGraph) -> dict:
    return {eid: {"feature_ids": system.entities[eid].graph.feature_ids,
                  "state": system.state[eid].tolist()}
            for eid in sorted(system.state)}


def cmd_simulate(cfg: ProjectConfig, args) -> int:
    system, _ = load_system(cfg, args.system)
    events = _load_json(args.scenario)
    if not isinstance(events, list):
        raise CommandError("scenario must be a JSON array of events")
    builder = LazyBuilder(DtgDatabase(cfg.db_dir), cfg.train_config(), system.window,
                          cfg.stride, cfg.ridge)
    traces = []
    for i, raw in enumerate(events):
        ev = _event_from_json(cfg, raw)
        if ev.kind == "observe":
            state, trace = propagate(system, ev.observations, cfg.epsilon, cfg.max_iters)
            system.state = state
            traces.append({"event": i, "kind": ev.kind, **trace.to_dict()})
        else:
            system = apply_structural_change(system, ev, builder)
            traces.append({"event": i, "kind": ev.kind,
                           "arcs": [[s, t, system.arcs[(s, t)].signature]
                                    for s, t in sorted(system.arcs)]})
    out = Path(cfg.output_dir) / "simulation"
    _dump(out / "final_state.json", state_to_json(system))
    _dump(out / "trace.json", traces)
    if args.dot:
        Path(args.dot).write_text(system.to_dot())
    return 0


def cmd_db(cfg: ProjectConfig, args) -> int:
    db = DtgDatabase(cfg.db_dir)
    if args.action == "list":
        print(json.dumps(db.list(), indent=2))
        return 0
    bad = db.verify()
    if bad:
        raise CommandError(f"integrity check failed for records: {', '.join(bad)}")
    print(json.dumps({"ok": True, "records": len(db.list())}))
    return 0


def cmd_synth(cfg, args) -> int:
    from .synthetic import write_chain_project
    write_chain_project(args.out, length=args.length, seed=args.seed)
    return 0


def _parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dtg", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, topology=False):
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        if topology:
            p.add_argument("--topology", required=True)
        return p

    p = common(sub.add_parser("build-entity", help="build entity graphs and regressors"), True)
    p.set_defaults(func=cmd_build_entity)
    p = common(sub.add_parser("train-g2g", help="train (or fetch) every arc model"), True)
    p.set_defaults(func=cmd_train_g2g)
    p = common(sub.add_parser("fuse", help="distil regressors + DKMs into a generator"))
    p.add_argument("--entity", required=True)
    p.add_argument("--dkm", action="append", metavar="CMD[:WEIGHT[:PARAMS]]")
    p.add_argument("--internal-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_fuse)
    p = common(sub.add_parser("simulate", help="run a scenario against a trained system"))
    p.add_argument("--system", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--dot")
    p.set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("db", help="inspect the model database"))
    p.add_argument("action", choices=["list", "verify"])
    p.set_defaults(func=cmd_db)
    p = sub.add_parser("synth", help="write the synthetic chain project")
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=240)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if hasattr(args, "config"):
            cfg = ProjectConfig.load(args.config, _parse_overrides(args.set))
        return args.func(cfg, args)
    except (CommandError, IngestionError, ValueError, KeyError, RuntimeError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\"")}
        sys.stderr.write(json.dumps(err) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
