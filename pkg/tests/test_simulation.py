import threading

import numpy as np
import pytest

from dtg.entity_graph import EntityGraph, FeatureRegressor, FeatureSeries
from dtg.g2g import G2GModel, TrainConfig
from dtg.simulation import (DtgDatabase, EntityRecord, InsufficientDataError, IntegrityError,
                            LazyBuilder, ScenarioEvent, TopologyError, apply_structural_change,
                            build_system, converged, deserialize_model, model_signature,
                            propagate, serialize_model, signature_for)

T = 4


def record(eid, n=2, etype="pump", history=None, regressors=None):
    history = np.arange(n * 10, dtype=float).reshape(n, 10) if history is None else history
    g = EntityGraph(eid, etype, [f"x{i}" for i in range(n)], history, np.eye(n), "pearson")
    regs = regressors or [FeatureRegressor(i, [], np.zeros(0), 0.0, 0.0) for i in range(n)]
    return EntityRecord(g, regs)


def linear_model(gain, n=2, stype="pump", ttype="pump"):
    """Single GCN layer with identity adjacency: Z = gain * X."""
    return G2GModel(stype, ttype, [T, T], [gain * np.eye(T)], 0.3, np.eye(n))


def chain_system(length, gain=2.0):
    ids = [f"e{i}" for i in range(length)]
    arcs = list(zip(ids, ids[1:]))
    return build_system([record(e) for e in ids], arcs,
                        {a: linear_model(gain) for a in arcs}, T)


def test_build_system_initial_state_is_last_window():
    sys_ = chain_system(2)
    np.testing.assert_array_equal(sys_.state["e0"], sys_.entities["e0"].history[:, -T:])


def test_build_system_errors():
    a, b = record("a"), record("b")
    m = {("a", "b"): linear_model(1.0)}
    with pytest.raises(TopologyError, match="unknown"):
        build_system([a], [("a", "b")], m, T)
    with pytest.raises(TopologyError, match="no model"):
        build_system([a, b], [("a", "b")], {}, T)
    with pytest.raises(TopologyError, match="duplicate"):
        build_system([a, a], [], {}, T)
    with pytest.raises(TopologyError, match="window"):
        build_system([a, b], [("a", "b")], m, 12)
    with pytest.raises(TopologyError, match="-> 'valve'"):
        build_system([a, b], [("a", "b")], {("a", "b"): linear_model(1.0, ttype="valve")}, T)
    with pytest.raises(TopologyError, match="features"):
        build_system([a, record("c", n=3)], [("a", "c")], {("a", "c"): linear_model(1.0)}, T)
    with pytest.raises(TopologyError, match="self-arc"):
        build_system([a], [("a", "a")], {("a", "a"): linear_model(1.0)}, T)


def test_two_entity_linear_oracle():
    sys_ = chain_system(2, gain=2.0)
    obs = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 0.5, 2.0]])
    state, trace = propagate(sys_, {"e0": obs})
    np.testing.assert_allclose(state["e1"], 2.0 * obs)
    np.testing.assert_array_equal(state["e0"], obs)
    assert trace.converged and trace.n_iter == 2


def test_empty_observations_single_iteration():
    sys_ = chain_system(3)
    state, trace = propagate(sys_, {})
    assert trace.converged and trace.n_iter == 1
    for k in sys_.state:
        np.testing.assert_array_equal(state[k], sys_.state[k])


@pytest.mark.parametrize("length", [2, 3, 5])
def test_acyclic_chain_converges_within_depth_plus_one(length):
    sys_ = chain_system(length, gain=0.5)
    state, trace = propagate(sys_, {"e0": np.ones((2, T))})
    assert trace.converged and trace.n_iter <= length
    np.testing.assert_allclose(state[f"e{length - 1}"], 0.5 ** (length - 1) * np.ones((2, T)))


def test_propagate_does_not_mutate_system():
    sys_ = chain_system(3)
    before = {k: v.copy() for k, v in sys_.state.items()}
    propagate(sys_, {"e0": np.zeros((2, T))})
    for k in before:
        np.testing.assert_array_equal(sys_.state[k], before[k])


def test_observed_entity_stays_pinned_in_cycle():
    a, b = record("a"), record("b")
    arcs = [("a", "b"), ("b", "a")]
    sys_ = build_system([a, b], arcs, {k: linear_model(3.0) for k in arcs}, T)
    obs = np.full((2, T), 1.0)
    state, trace = propagate(sys_, {"a": obs})
    np.testing.assert_array_equal(state["a"], obs)
    np.testing.assert_allclose(state["b"], 3.0 * obs)
    assert trace.converged


def test_contracting_cycle_reaches_fixed_point():
    ids = ["a", "b", "c"]
    arcs = [("a", "b"), ("b", "c"), ("c", "b")]
    sys_ = build_system([record(e) for e in ids], arcs, {k: linear_model(0.5) for k in arcs}, T)
    state, trace = propagate(sys_, {"a": np.ones((2, T))}, eps=1e-6, max_iters=200)
    assert trace.converged
    # b = 0.5 * mean(a, c) is only used on rounds where both changed; the fixed point is finite
    assert np.all(np.isfinite(state["b"])) and np.all(np.isfinite(state["c"]))


def test_expanding_cycle_hits_iteration_cap():
    arcs = [("a", "b"), ("b", "a")]
    sys_ = build_system([record("a"), record("b")], arcs, {k: linear_model(2.0) for k in arcs}, T)
    _, trace = propagate(sys_, {"a": {"x0": 100.0}}, max_iters=7)
    assert not trace.converged and trace.n_iter == 7


def test_partial_observation_pins_only_listed_feature():
    regs = [FeatureRegressor(0, [], np.zeros(0), 0.0, 0.0),
            FeatureRegressor(1, [0], np.array([10.0]), 1.0, 0.0)]
    sys_ = build_system([record("a", regressors=regs), record("b")], [("a", "b")],
                        {("a", "b"): linear_model(1.0)}, T)
    state, _ = propagate(sys_, {"a": {"x0": 2.0}})
    assert state["a"][0, -1] == 2.0
    assert state["a"][1, -1] == pytest.approx(21.0)  # reconciled from x0
    np.testing.assert_allclose(state["b"], state["a"])


def test_observation_validation():
    sys_ = chain_system(2)
    with pytest.raises(KeyError):
        propagate(sys_, {"nope": np.zeros((2, T))})
    with pytest.raises(KeyError):
        propagate(sys_, {"e0": {"zz": 1.0}})
    with pytest.raises(ValueError):
        propagate(sys_, {"e0": np.zeros((3, T))})
    with pytest.raises(ValueError):
        propagate(sys_, {}, eps=0.0)


def test_converged_oracle():
    prev = {"a": np.array([[1.0, 2.0]])}
    assert converged(prev, {"a": np.array([[1.0, 2.0001]])}, 1e-4)      # 5e-5 relative
    assert not converged(prev, {"a": np.array([[1.0, 2.001]])}, 1e-4)   # 5e-4 relative
    assert converged({}, {}, 1e-4)


def test_to_dot_lists_entities_and_arcs():
    dot = chain_system(2).to_dot()
    assert '"e0" -> "e1"' in dot and dot.startswith("digraph")


# -- database ------------------------------------------------------------------

def test_signature_is_stable_and_sensitive():
    s = model_signature("a", "b", 3, 4, [4], 0.3, 1.0)
    assert s == model_signature("a", "b", 3, 4, [4], 0.3, 1.0)
    assert s != model_signature("a", "b", 3, 4, [4], 0.3, 2.0)
    assert s != model_signature("b", "a", 3, 4, [4], 0.3, 1.0)


def test_serialization_round_trip():
    m = linear_model(1.5)
    m.loss_history = [3.0, 2.0]
    data = serialize_model(m, "sig")
    back, sig = deserialize_model(data)
    assert sig == "sig"
    np.testing.assert_array_equal(back.weights[0], m.weights[0])
    assert serialize_model(back, "sig") == data


def test_db_round_trip(tmp_path):
    db = DtgDatabase(tmp_path)
    m = linear_model(2.0)
    sig = signature_for(m)
    assert db.get(sig) is None
    db.put(sig, m)
    np.testing.assert_array_equal(DtgDatabase(tmp_path).get(sig).weights[0], m.weights[0])
    assert [r["key"] for r in db.list()] == [sig]
    assert db.verify() == []


def test_db_detects_corruption(tmp_path):
    db = DtgDatabase(tmp_path)
    db.put("k", linear_model(2.0))
    path = tmp_path / "k.rec"
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    assert db.verify() == ["k"]
    with pytest.raises(IntegrityError, match="k"):
        db.get("k")


def test_db_missing_file(tmp_path):
    db = DtgDatabase(tmp_path)
    db.put("k", linear_model(2.0))
    (tmp_path / "k.rec").unlink()
    assert db.verify() == ["k"]


def test_db_concurrent_writers_last_wins(tmp_path):
    db = DtgDatabase(tmp_path)
    models = [linear_model(float(g)) for g in range(8)]
    threads = [threading.Thread(target=db.put, args=("k", m)) for m in models]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert db.verify() == []
    gain = db.get("k").weights[0][0, 0]
    assert gain in range(8)


def test_db_entity_templates(tmp_path):
    db = DtgDatabase(tmp_path)
    db.put_entity("pump", {"feature_ids": ["a"]})
    assert db.get_entity("pump")["feature_ids"] == ["a"]
    assert db.get_entity("valve") is None


# -- lazy construction ------------------------------------------------------------

def series_for(seed, n=2, length=16):
    r = np.random.default_rng(seed)
    base = np.cumsum(r.normal(size=length))
    return [FeatureSeries(f"x{i}", base * (i + 1) + 0.1 * r.normal(size=length)) for i in range(n)]


@pytest.fixture
def builder(tmp_path):
    return LazyBuilder(DtgDatabase(tmp_path), TrainConfig(epochs=3, learning_rate=0.001), T)


def small_system(builder, types=("pump", "pump", "valve")):
    recs = [builder.entity(f"e{i}", t, series_for(i)) for i, t in enumerate(types)]
    arcs = [("e0", "e1"), ("e1", "e2")]
    models = {}
    for s, t in arcs:
        models[(s, t)] = builder.arc_model(recs[int(s[1])], recs[int(t[1])])[0]
    return build_system(recs, arcs, models, T)


def test_builder_reuses_same_type_pair(builder):
    small_system(builder)
    # pump->pump and pump->valve; entity templates for pump and valve
    assert builder.train_calls == 2
    assert builder.build_calls == 2


def test_readding_arc_trains_nothing_and_is_byte_identical(builder):
    sys_ = small_system(builder)
    sig = sys_.arcs[("e1", "e2")].signature
    before = builder.db.get_bytes(sig)
    calls = builder.train_calls
    removed = apply_structural_change(sys_, ScenarioEvent("rewire", remove_arcs=[("e1", "e2")]),
                                      builder)
    assert ("e1", "e2") not in removed.arcs
    back = apply_structural_change(removed, ScenarioEvent("rewire", add_arcs=[("e1", "e2")]),
                                   builder)
    assert builder.train_calls == calls
    assert builder.db.get_bytes(sig) == before
    assert serialize_model(back.arcs[("e1", "e2")].model, sig) == before


def test_new_arc_type_trains_once(builder):
    sys_ = small_system(builder)
    calls = builder.train_calls
    ev = ScenarioEvent("rewire", add_arcs=[("e2", "e0")])
    sys2 = apply_structural_change(sys_, ev, builder)
    assert builder.train_calls == calls + 1
    apply_structural_change(sys2, ScenarioEvent("rewire", add_arcs=[("e2", "e1")]), builder)
    assert builder.train_calls == calls + 1


def test_structural_change_keeps_untouched_models(builder):
    sys_ = small_system(builder)
    ev = ScenarioEvent("add_entity", "e3", "valve", series_for(9), add_arcs=[("e0", "e3")])
    new = apply_structural_change(sys_, ev, builder)
    assert new.arcs[("e0", "e1")].model is sys_.arcs[("e0", "e1")].model
    assert "e3" not in sys_.entities
    assert set(new.arcs) == {("e0", "e1"), ("e1", "e2"), ("e0", "e3")}


def test_remove_entity_drops_incident_arcs(builder):
    sys_ = small_system(builder)
    new = apply_structural_change(sys_, ScenarioEvent("remove_entity", "e1"), builder)
    assert new.arcs == {} and "e1" not in new.entities and "e1" not in new.state


def test_structural_errors(builder):
    sys_ = small_system(builder)
    with pytest.raises(TopologyError):
        apply_structural_change(sys_, ScenarioEvent("remove_entity", "zz"), builder)
    with pytest.raises(TopologyError):
        apply_structural_change(sys_, ScenarioEvent("rewire", remove_arcs=[("e0", "e2")]), builder)
    with pytest.raises(TopologyError):
        apply_structural_change(sys_, ScenarioEvent("rewire", add_arcs=[("e0", "zz")]), builder)
    with pytest.raises(ValueError):
        ScenarioEvent("explode")


def test_short_history_rejected(tmp_path):
    b = LazyBuilder(DtgDatabase(tmp_path), TrainConfig(epochs=1), window=8)
    short = [b.entity(e, "pump", series_for(i, length=6)) for i, e in enumerate("ab")]
    with pytest.raises(InsufficientDataError):
        b.arc_model(*short)
    assert b.train_calls == 0


def test_replacing_entity_refreshes_incident_arcs(builder):
    sys_ = small_system(builder)
    calls = builder.train_calls
    ev = ScenarioEvent("add_entity", "e1", "pump", series_for(5))
    new = apply_structural_change(sys_, ev, builder)
    assert builder.train_calls == calls  # same types, served from the database
    assert set(new.arcs) == set(sys_.arcs)
    np.testing.assert_array_equal(new.state["e1"], new.entities["e1"].history[:, -T:])
