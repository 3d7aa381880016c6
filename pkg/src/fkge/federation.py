"""Owner actors, the handshake protocol and the tick-driven federation loop.

Each tick runs four phases:

1. deliver due bus messages (requests join the target's FIFO queue and wake
   a sleeping target; broadcasts wake sleepers),
2. form a wave of sessions: every host that is not Busy serves the oldest
   queued requester that is free to act as a client,
3. run the wave (PPAT, then KGEmb-Update with backtracking on the host),
   optionally on a thread pool, committing session traffic in wave order,
4. follow-up: improved hosts with an empty queue broadcast and request
   sessions with every peer; the rest self-train or sleep.

The requester of a handshake is the client, the target is the host. An
actor hosts at most one session and is client in at most one session per
wave, so N actors run at most N concurrent sessions.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bus import MessageKind, SessionChannel, SimBus
from .evaluation import improvement_score
from .kg import AlignmentSet, KnowledgeGraph
from .kge import EmbeddingTable, TrainConfig, train_epochs
from .ppat import (PpatConfig, TranslatedBundle, client_view, host_view, new_session,
                   run_session)
from .privacy import PrivacyLedger

log = logging.getLogger(__name__)

SCHEDULERS = ("deterministic", "seeded", "scripted")
IDLE_POLICIES = ("train", "sleep")


class State(str, Enum):
    READY = "Ready"
    BUSY = "Busy"
    SLEEP = "Sleep"


@dataclass
class FederationConfig:
    max_ticks: int = 30
    patience: int = 3
    idle: str = "train"
    wake_ticks: int = 2
    scheduler: str = "deterministic"
    script: list[list[tuple[str, str]]] = field(default_factory=list)
    seed: int = 0
    noise_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0
    threads: int = 1
    simple: bool = False
    use_contexts: bool = True
    lam: float = 0.05
    delta: float = 1e-5
    max_moment: int = 32
    audit: bool = False

    def __post_init__(self):
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"scheduler must be one of {SCHEDULERS}")
        if self.idle not in IDLE_POLICIES:
            raise ValueError(f"idle must be one of {IDLE_POLICIES}")
        if self.max_ticks < 0 or self.patience < 1 or self.wake_ticks < 1 or self.threads < 1:
            raise ValueError("max_ticks >= 0, patience, wake_ticks and threads >= 1 required")


@dataclass
class RoundRecord:
    tick: int
    actor: str
    event: str
    score: float
    best_score: float
    improved: bool
    partner: str = ""
    epsilon: float | None = None
    virtual_triples: int = 0


@dataclass(eq=False)
class OwnerActor:
    graph: KnowledgeGraph
    table: EmbeddingTable
    train_cfg: TrainConfig
    best_table: EmbeddingTable = None  # type: ignore[assignment]
    best_score: float = -math.inf
    state: State = State.READY
    queue: deque = field(default_factory=deque)
    improved: bool = False
    rounds: int = 0
    wake_at: int | None = None
    peer_cursor: int = 0
    history: list[RoundRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.best_table is None:
            self.best_table = self.table.copy()

    @property
    def graph_id(self) -> str:
        return self.graph.graph_id

    def round_seed(self, base: int) -> int:
        name = int.from_bytes(self.graph_id.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        return int(np.random.SeedSequence([base, name, self.rounds]).generate_state(1)[0])

    def initialize(self, eval_seed: int = 0) -> float:
        """Score the current table and make it the best snapshot."""
        self.best_score = improvement_score(self.graph, self.table, eval_seed)
        self.best_table = self.table.copy()
        return self.best_score


@dataclass
class UpdateResult:
    score: float
    improved: bool
    triples_during: int
    triples_after: int
    virtual_triples: int


def accept_or_backtrack(actor: OwnerActor, candidate: EmbeddingTable, eval_seed: int) -> tuple[float, bool]:
    score = improvement_score(actor.graph, candidate, eval_seed)
    if score > actor.best_score:
        actor.best_score = score
        actor.best_table = candidate.copy()
        actor.table = candidate
        actor.improved = True
    else:
        actor.table = actor.best_table.copy()
        actor.improved = False
    return score, actor.improved


def kgemb_update(actor: OwnerActor, bundle: TranslatedBundle | None, train_seed: int = 0,
                 eval_seed: int = 0, simple: bool = False) -> UpdateResult:
    """Aggregate a bundle into the host, retrain, then keep or backtrack.

    With ``bundle=None`` this is a plain self-training round. Virtual rows
    and triples exist only for the retraining and are stripped before
    scoring, so the graph and table shapes never change.
    """
    g = actor.graph
    tbl = actor.table.copy()
    if bundle is not None:
        if bundle.dim != tbl.dim:
            raise ValueError(f"bundle dimension {bundle.dim} does not match table dimension {tbl.dim}")
        tbl.entity[bundle.entity_ids] = bundle.entity_rows
        tbl.relation[bundle.relation_ids] = bundle.relation_rows
    work = g
    n_virtual = 0
    if bundle is not None and not simple and len(bundle.virtual_triples):
        labels_e, labels_r = bundle.virtual_labels()
        work = g.extended(labels_e, labels_r, bundle.virtual_triples)
        rng = np.random.default_rng(actor.round_seed(train_seed + 1))
        tbl = tbl.appended(bundle.virtual_entity_rows, bundle.virtual_relation_rows, rng)
        n_virtual = len(bundle.virtual_triples)
    triples_during = len(work)
    tbl = train_epochs(work, tbl, actor.train_cfg, seed=actor.round_seed(train_seed))
    tbl = tbl.truncated(g.n_entities, g.n_relations)
    actor.rounds += 1
    score, improved = accept_or_backtrack(actor, tbl, eval_seed)
    return UpdateResult(score, improved, triples_during, len(actor.graph), n_virtual)


def handshake(requester: OwnerActor, target: OwnerActor, aligned: bool) -> str:
    """Decide a handshake request: ``accept``, ``reject`` or ``enqueue``.

    Success needs both sides not Busy and at least one of them Ready.
    """
    if not aligned:
        return "reject"
    if target.state is State.BUSY:
        return "enqueue"
    if requester.state is State.BUSY:
        return "enqueue"
    if State.READY not in (requester.state, target.state):
        return "enqueue"
    return "accept"


@dataclass
class SessionResult:
    client: str
    host: str
    tag: str
    bundle: TranslatedBundle
    update: UpdateResult
    ledger: PrivacyLedger
    outbox: list
    labels_issued: int
    raw_rows: np.ndarray | None = None


class Federation:
    """Drives a set of owner actors over the simulated bus."""

    def __init__(self, actors: list[OwnerActor], alignments: list[AlignmentSet],
                 ppat_cfg: PpatConfig | None = None, cfg: FederationConfig | None = None,
                 bus: SimBus | None = None):
        self.cfg = cfg or FederationConfig()
        self.ppat_cfg = ppat_cfg or PpatConfig()
        self.actors = {a.graph_id: a for a in actors}
        if len(self.actors) != len(actors):
            raise ValueError("duplicate graph ids")
        self.ids = sorted(self.actors)
        self.align: dict[frozenset, AlignmentSet] = {}
        for al in alignments:
            if len(al):
                self.align[frozenset(al.pair)] = al
        self.bus = bus or SimBus(self.cfg.seed)
        for gid in self.ids:
            self.bus.register(gid)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.tick = 0
        self.sessions: list[SessionResult] = []
        self.max_concurrent = 0
        self.session_cap = 2 * math.comb(len(self.ids), 2)
        self.last_improvement = 0
        self.history: list[RoundRecord] = []
        self._in_flight: set[tuple[str, str]] = set()
        self._script = [list(w) for w in self.cfg.script]

    # ------------------------------------------------------------------ helpers
    def peers(self, gid: str) -> list[str]:
        return [p for p in self.ids if p != gid and frozenset((gid, p)) in self.align]

    def _record(self, rec: RoundRecord) -> None:
        self.actors[rec.actor].history.append(rec)
        self.history.append(rec)

    def _request(self, client: str, host: str) -> None:
        if (client, host) in self._in_flight or client in self.actors[host].queue:
            return
        self._in_flight.add((client, host))
        self.bus.send(MessageKind.HANDSHAKE_REQUEST, client, host, self.tick)

    def _next_peer(self, gid: str) -> str | None:
        peers = self.peers(gid)
        if not peers:
            return None
        a = self.actors[gid]
        if self.cfg.scheduler == "seeded":
            return peers[int(self.rng.integers(len(peers)))]
        p = peers[a.peer_cursor % len(peers)]
        a.peer_cursor += 1
        return p

    def _broadcast(self, gid: str) -> None:
        for p in self.peers(gid):
            self.bus.send(MessageKind.WAKE_UP_BROADCAST, gid, p, self.tick)
        for p in self.peers(gid):
            self._request(gid, p)

    # ------------------------------------------------------------------ phases
    def _deliver(self) -> None:
        for msg in self.bus.deliver_due(self.tick):
            target = self.actors[msg.dst]
            if msg.kind is MessageKind.HANDSHAKE_REQUEST:
                self._in_flight.discard((msg.src, msg.dst))
                decision = handshake(self.actors[msg.src], target,
                                     frozenset((msg.src, msg.dst)) in self.align)
                if decision == "reject":
                    self.bus.send(MessageKind.HANDSHAKE_REJECT, msg.dst, msg.src, self.tick)
                    continue
                if target.state is State.SLEEP:
                    target.state, target.wake_at = State.READY, None
                if msg.src not in target.queue:
                    target.queue.append(msg.src)
            elif msg.kind is MessageKind.WAKE_UP_BROADCAST:
                if target.state is State.SLEEP:
                    target.state, target.wake_at = State.READY, None

    def _host_order(self) -> list[str]:
        if self.cfg.scheduler == "seeded":
            return [self.ids[i] for i in self.rng.permutation(len(self.ids))]
        return list(self.ids)

    def _form_wave(self) -> list[tuple[str, str]]:
        snapshot = {gid: a.state for gid, a in self.actors.items()}
        clients: set[str] = set()
        wave = []
        for h in self._host_order():
            host = self.actors[h]
            if snapshot[h] is State.BUSY or not host.queue or len(wave) >= self.session_cap:
                continue
            for c in list(host.queue):
                if c in clients or snapshot[c] is State.BUSY:
                    continue
                if State.READY not in (snapshot[c], snapshot[h]):
                    continue
                host.queue.remove(c)
                clients.add(c)
                wave.append((c, h))
                break
        for c, h in wave:
            self.actors[h].state = State.BUSY
            self.bus.send(MessageKind.HANDSHAKE_ACCEPT, h, c, self.tick)
        self.max_concurrent = max(self.max_concurrent, len(wave))
        return wave

    def _run_one(self, client: str, host: str, cview, seed: int) -> SessionResult:
        h = self.actors[host]
        al = self.align[frozenset((client, host))]
        hview = host_view(h.graph, h.table, al)
        ledger = PrivacyLedger(self.cfg.lam, self.cfg.delta, self.cfg.max_moment)
        pcfg = self.ppat_cfg
        if self.cfg.simple and not pcfg.simple:
            pcfg = PpatConfig(**{**pcfg.__dict__, "simple": True})
        tag = f"s{len(self.sessions)}-{client}>{host}@{self.tick}"
        session = new_session(client, host, h.table.dim, len(hview.rows), pcfg, ledger, seed, tag)
        channel = SessionChannel()
        bundle = run_session(session, cview, hview, channel)
        update = kgemb_update(h, bundle, self.cfg.train_seed, self.cfg.eval_seed,
                              self.cfg.simple)
        return SessionResult(client, host, tag, bundle, update, ledger, channel.outbox,
                             session.labels_issued)

    def _run_wave(self, wave: list[tuple[str, str]]) -> list[SessionResult]:
        # client views are snapshotted first: a client may host in the same wave
        views, raws, seeds = [], [], []
        for i, (c, h) in enumerate(wave):
            ca = self.actors[c]
            al = self.align[frozenset((c, h))]
            views.append(client_view(ca.graph, ca.table.copy(), al, self.cfg.use_contexts))
            raws.append(np.concatenate([ca.table.entity, ca.table.relation])
                        if self.cfg.audit else None)
            seeds.append(int(np.random.SeedSequence(
                [self.cfg.noise_seed, self.cfg.seed, self.tick, i, len(self.sessions)]).generate_state(1)[0]))
        jobs = [(c, h, v, s) for (c, h), v, s in zip(wave, views, seeds)]
        if self.cfg.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                results = list(pool.map(lambda j: self._run_one(*j), jobs))
        else:
            results = [self._run_one(*j) for j in jobs]
        for r, raw in zip(results, raws):
            r.raw_rows = raw
            self.bus.commit(r.outbox, self.tick)
            h = self.actors[r.host]
            h.state = State.READY
            self.bus.send(MessageKind.SESSION_DONE, r.host, r.client, self.tick,
                          session=r.tag, improved=r.update.improved)
            self._record(RoundRecord(self.tick, r.host, "kgemb_update", r.update.score,
                                     h.best_score, r.update.improved, r.client,
                                     r.ledger.epsilon(), r.update.virtual_triples))
            if not self.cfg.audit:
                r.outbox = []
            self.sessions.append(r)
        return results

    def _follow_up(self, hosted: dict[str, bool], clients: set[str]) -> None:
        for gid in self.ids:
            a = self.actors[gid]
            if a.state is State.SLEEP:
                if a.wake_at is not None and self.tick >= a.wake_at:
                    a.state, a.wake_at = State.READY, None
                    p = self._next_peer(gid)
                    if p:
                        self._request(gid, p)
                continue
            if a.queue:
                continue
            if gid in hosted and hosted[gid]:
                self._broadcast(gid)
                continue
            if gid in clients and gid not in hosted:
                continue
            if self.cfg.idle == "sleep":
                a.state, a.wake_at = State.SLEEP, self.tick + self.cfg.wake_ticks
                continue
            score, improved = self_train(a, self.cfg.train_seed, self.cfg.eval_seed)
            self._record(RoundRecord(self.tick, gid, "self_train", score, a.best_score, improved))
            if improved:
                self._broadcast(gid)
            else:
                p = self._next_peer(gid)
                if p:
                    self._request(gid, p)

    # ------------------------------------------------------------------ driver
    def start(self) -> None:
        """Initial requests: the first scripted wave, or one request per actor."""
        for gid in self.ids:
            a = self.actors[gid]
            self._record(RoundRecord(0, gid, "initial", a.best_score, a.best_score, False))
        if self.cfg.scheduler == "scripted" and self._script:
            for c, h in self._script.pop(0):
                self._request(c, h)
            return
        for gid in self.ids:
            p = self._next_peer(gid)
            if p:
                self._request(gid, p)

    def step(self) -> list[SessionResult]:
        self.tick += 1
        self._deliver()
        wave = self._form_wave()
        results = self._run_wave(wave) if wave else []
        if self.cfg.scheduler == "scripted" and self._script:
            for c, h in self._script.pop(0):
                self._request(c, h)
        hosted = {r.host: r.update.improved for r in results}
        clients = {r.client for r in results}
        before = len(self.history)
        self._follow_up(hosted, clients)
        if any(r.update.improved for r in results) or any(
                rec.improved for rec in self.history[before:]):
            self.last_improvement = self.tick
        return results

    def done(self) -> bool:
        if self.tick >= self.cfg.max_ticks:
            return True
        return self.tick - self.last_improvement >= self.cfg.patience

    def run(self) -> dict[str, EmbeddingTable]:
        self.start()
        while not self.done():
            self.step()
        return {gid: a.best_table for gid, a in self.actors.items()}

    def max_epsilon(self) -> float | None:
        return max((r.ledger.epsilon() for r in self.sessions), default=None)


def self_train(actor: OwnerActor, train_seed: int = 0, eval_seed: int = 0) -> tuple[float, bool]:
    """One training round on the actor's own graph, kept only if it improves."""
    res = kgemb_update(actor, None, train_seed, eval_seed)
    return res.score, res.improved
