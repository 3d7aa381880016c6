import numpy as np
import pytest

from fkge.bus import scan_for_rows
from fkge.federation import (Federation, FederationConfig, OwnerActor, State, handshake,
                             kgemb_update, self_train)
from fkge.kge import TrainConfig, init_embeddings, train_epochs
from fkge.ppat import PpatConfig, TranslatedBundle

FAST_PPAT = PpatConfig(max_epochs=3, hidden=16)


def make_actors(graphs, dim=8, epochs=20, seed=0):
    actors = []
    for g in graphs:
        cfg = TrainConfig(dim=dim, learning_rate=0.1, epochs_per_round=5, seed=seed)
        a = OwnerActor(g, train_epochs(g, init_embeddings(g, cfg), cfg, epochs=epochs), cfg)
        a.initialize()
        actors.append(a)
    return actors


def make_fed(small_federation, **kw):
    graphs, aligns = small_federation
    kw.setdefault("max_ticks", 4)
    kw.setdefault("patience", 10)
    return Federation(make_actors(graphs), aligns, FAST_PPAT, FederationConfig(**kw))


def _actor(state):
    a = OwnerActor.__new__(OwnerActor)
    a.state = state
    return a


@pytest.mark.parametrize("req, tgt, aligned, want", [
    (State.READY, State.READY, True, "accept"),
    (State.SLEEP, State.READY, True, "accept"),
    (State.READY, State.SLEEP, True, "accept"),
    (State.SLEEP, State.SLEEP, True, "enqueue"),
    (State.READY, State.BUSY, True, "enqueue"),
    (State.BUSY, State.READY, True, "enqueue"),
    (State.READY, State.READY, False, "reject"),
])
def test_handshake_rules(req, tgt, aligned, want):
    assert handshake(_actor(req), _actor(tgt), aligned) == want


def test_deterministic_replay(small_federation):
    a = make_fed(small_federation)
    a.run()
    b = make_fed(small_federation)
    b.run()
    assert a.bus.records() == b.bus.records()
    assert [(r.tick, r.actor, r.event, r.score) for r in a.history] == \
           [(r.tick, r.actor, r.event, r.score) for r in b.history]


def test_threads_do_not_change_the_trace(small_federation):
    a = make_fed(small_federation)
    a.run()
    b = make_fed(small_federation, threads=3)
    b.run()
    assert a.bus.records() == b.bus.records()
    for gid in a.actors:
        assert a.actors[gid].best_table.equals(b.actors[gid].best_table)


def test_best_score_monotone_and_session_cap(small_federation):
    fed = make_fed(small_federation, max_ticks=6)
    fed.run()
    for a in fed.actors.values():
        best = [r.best_score for r in a.history]
        assert best == sorted(best)
        assert a.best_score == best[-1]
    assert 0 < fed.max_concurrent <= len(fed.actors)


def test_scripted_first_wave(small_federation):
    script = [[("g1", "g3"), ("g2", "g1"), ("g3", "g2")]]
    fed = make_fed(small_federation, scheduler="scripted", script=script, max_ticks=1)
    fed.run()
    first = sorted((s.client, s.host) for s in fed.sessions)
    assert first == sorted(script[0])
    # every actor was host once and client once in the same wave
    assert fed.max_concurrent == 3


def test_privacy_ledgers_match_labels(small_federation):
    fed = make_fed(small_federation)
    fed.run()
    assert fed.sessions
    for s in fed.sessions:
        assert s.ledger.query_count == s.labels_issued
        assert s.ledger.epsilon() >= np.log(1 / s.ledger.delta) / s.ledger.max_moment
    assert fed.max_epsilon() == max(s.ledger.epsilon() for s in fed.sessions)


def test_no_raw_client_rows_on_the_wire(small_federation):
    fed = make_fed(small_federation, audit=True)
    fed.run()
    msgs = fed.bus.trace
    for s in fed.sessions:
        assert s.raw_rows is not None
        assert scan_for_rows(msgs, s.raw_rows) == []


def test_scan_would_catch_a_leak(small_federation):
    fed = make_fed(small_federation, audit=True, max_ticks=1)
    fed.run()
    s = fed.sessions[0]
    # a bundle that echoed the client's raw rows would be found
    leak = [m for m in fed.bus.trace if m.kind.value == "TranslatedBundle" and m.meta["session"] == s.tag][0]
    leak.payload = s.raw_rows[:3].astype("<f8").tobytes()
    leak.meta = {**leak.meta, "rows": 3}
    assert scan_for_rows([leak], s.raw_rows)


def _bundle(actor, rows, ent_ids, virtual=0):
    d = actor.table.dim
    rng = np.random.default_rng(0)
    vt = np.zeros((virtual, 3), dtype=np.int64)
    if virtual:
        vt[:, 0] = ent_ids[:virtual]
        vt[:, 1] = actor.graph.n_relations
        vt[:, 2] = actor.graph.n_entities + np.arange(virtual)
    return TranslatedBundle("s", "x", actor.graph_id, ent_ids, rows, np.zeros(0, np.int64),
                            np.zeros((0, d)), rng.normal(size=(virtual, d)), rng.normal(size=(1, d)),
                            vt, 1.0)


def test_backtrack_restores_exact_snapshot(small_federation):
    graphs, _ = small_federation
    (a,) = make_actors(graphs[:1])
    before, score = a.best_table.copy(), a.best_score
    ids = np.arange(60)
    junk = np.full((60, a.table.dim), 50.0)  # wrecks the aligned rows
    res = kgemb_update(a, _bundle(a, junk, ids, virtual=10))
    assert not res.improved and not a.improved
    assert a.table.equals(before) and a.best_table.equals(before)
    assert a.best_score == score
    assert a.table is not a.best_table


def test_virtual_rows_are_stripped(small_federation):
    graphs, _ = small_federation
    (a,) = make_actors(graphs[:1])
    n_e, n_r, n_t = a.graph.n_entities, a.graph.n_relations, len(a.graph)
    res = kgemb_update(a, _bundle(a, a.table.entity[:20].copy(), np.arange(20), virtual=15))
    assert res.virtual_triples == 15
    assert res.triples_during == n_t + 15
    assert res.triples_after == n_t == len(a.graph)
    assert (a.table.n_entities, a.table.n_relations) == (n_e, n_r)
    assert (a.best_table.n_entities, a.best_table.n_relations) == (n_e, n_r)
    simple = kgemb_update(a, _bundle(a, a.table.entity[:20].copy(), np.arange(20), virtual=15), simple=True)
    assert simple.virtual_triples == 0 and simple.triples_during == n_t


def test_bundle_dimension_mismatch(small_federation):
    graphs, _ = small_federation
    (a,) = make_actors(graphs[:1])
    b = _bundle(a, np.zeros((2, 3)), np.arange(2))
    with pytest.raises(ValueError, match="dimension"):
        kgemb_update(a, b)


def test_self_train_is_seeded_per_round(small_federation):
    graphs, _ = small_federation
    (a,) = make_actors(graphs[:1])
    (b,) = make_actors(graphs[:1])
    assert self_train(a) == self_train(b)
    assert a.rounds == 1 and a.round_seed(0) != OwnerActor(a.graph, a.table, a.train_cfg).round_seed(0)


def test_sleep_policy(small_federation):
    fed = make_fed(small_federation, idle="sleep", max_ticks=5)
    fed.start()
    seen = set()
    for _ in range(5):
        fed.step()
        seen.update(a.state for a in fed.actors.values())
    assert State.SLEEP in seen
    assert not any(r.event == "self_train" for r in fed.history)


def test_patience_stops_early(small_federation):
    fed = make_fed(small_federation, max_ticks=50, patience=1)
    fed.run()
    assert fed.tick < 50


@pytest.mark.parametrize("kw", [{"scheduler": "random"}, {"idle": "nap"}, {"threads": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FederationConfig(**kw)


def test_duplicate_ids(small_federation):
    graphs, aligns = small_federation
    acts = make_actors(graphs[:1], epochs=0)
    with pytest.raises(ValueError, match="duplicate"):
        Federation(acts + acts, aligns)
