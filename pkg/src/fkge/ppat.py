"""Privacy-preserving adversarial translation between two graphs.

The client owns a linear generator ``G(x) = W x``. The host owns the teacher
ensemble and the student discriminator, and only ever sees ``G(X)`` rows.
Student labels come exclusively from the noisy PATE vote, so the student
(and through it the generator gradient) never touches the host's real rows
directly.

Gradient transfer: the host knows ``delta = dL/dG(X)`` but not ``X``. It sends
``A = delta^T G(X)`` (d x d); since ``G(X) = X W^T`` the client recovers
``dL/dW = delta^T X = A W^{-T}`` without the host learning anything beyond
what it was sent.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .bus import MessageKind, SessionChannel
from .kg import AlignmentSet, KnowledgeGraph, NeighborContext, extract_neighbor_context
from .kge import EmbeddingTable
from .privacy import PrivacyLedger, pate_vote_batch

log = logging.getLogger(__name__)

P_MIN = 1e-7
P_MAX = 1.0 - 1e-7
REFINE_MODES = ("none", "aligned", "csls")
W_INITS = ("orthogonal", "identity")


@dataclass
class PpatConfig:
    batch_size: int = 32
    teachers: int = 4
    learning_rate: float = 0.02
    momentum: float = 0.9
    hidden: int = 64
    leak: float = 0.2
    max_epochs: int = 50
    patience: int = 5
    window: int = 3
    w_init: str = "orthogonal"
    orthogonalize: float = 0.01
    refine: str = "aligned"
    refine_steps: int = 1
    csls_k: int = 10
    converge_tol: float = 1e-9
    simple: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.teachers < 1 or self.hidden < 1:
            raise ValueError("batch_size, teachers and hidden must be positive")
        if self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be positive and momentum in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.window < 1:
            raise ValueError("max_epochs >= 0, patience >= 1 and window >= 1 required")
        if self.w_init not in W_INITS:
            raise ValueError(f"w_init must be one of {W_INITS}")
        if self.refine not in REFINE_MODES:
            raise ValueError(f"refine must be one of {REFINE_MODES}")
        if not 0 <= self.orthogonalize < 0.5:
            raise ValueError("orthogonalize must lie in [0, 0.5)")


# --------------------------------------------------------------------------- discriminator

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(eq=False)
class Discriminator:
    """Two-layer perceptron ``d -> hidden -> 1`` with leaky ReLU and a sigmoid head."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    leak: float = 0.2

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator, leak: float = 0.2):
        s1 = math.sqrt(6.0 / (dim + hidden))
        s2 = math.sqrt(6.0 / (hidden + 1))
        return cls(rng.uniform(-s1, s1, (hidden, dim)), np.zeros(hidden),
                   rng.uniform(-s2, s2, hidden), np.zeros(1), leak)

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, x: np.ndarray):
        z1 = x @ self.w1.T + self.b1
        a1 = np.where(z1 > 0, z1, self.leak * z1)
        z2 = a1 @ self.w2 + self.b2[0]
        return z2, (x, z1, a1)

    def prob(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(self.forward(x)[0])

    def backward(self, cache, dz2: np.ndarray):
        """Gradients of ``sum(dz2 * logit)`` w.r.t. parameters and inputs."""
        x, z1, a1 = cache
        grads = {"w2": a1.T @ dz2, "b2": np.array([dz2.sum()])}
        dz1 = np.outer(dz2, self.w2) * np.where(z1 > 0, 1.0, self.leak)
        grads["w1"] = dz1.T @ x
        grads["b1"] = dz1.sum(0)
        return grads, dz1 @ self.w1

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params().values())


class Momentum:
    """SGD with classical momentum over a dict of arrays, updated in place."""

    def __init__(self, lr: float, momentum: float):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            v = self.velocity.get(name)
            v = grads[name] if v is None else self.momentum * v + grads[name]
            self.velocity[name] = v
            p -= self.lr * v


def _log_clamped(p):
    """``log`` of the clamped probability and its derivative w.r.t. the logit."""
    pc = np.clip(p, P_MIN, P_MAX)
    inside = (p > P_MIN) & (p < P_MAX)
    return np.log(pc), inside


# --------------------------------------------------------------------------- losses

def generator_objective(student: Discriminator, fake: np.ndarray) -> tuple[float, np.ndarray]:
    """``mean log(1 - S(G(x)))`` and its gradient w.r.t. the fake rows."""
    z, cache = student.forward(fake)
    p = _sigmoid(z)
    logq, inside = _log_clamped(1.0 - p)
    n = len(fake)
    dz = np.where(inside, -p, 0.0) / n
    _, dx = student.backward(cache, dz)
    return float(logq.mean()), dx


def teacher_objective(teacher: Discriminator, fake: np.ndarray, real: np.ndarray):
    """Summed teacher loss ``-[sum log(1 - T(fake)) + sum log T(real)]`` and parameter grads."""
    x = np.concatenate([fake, real])
    z, cache = teacher.forward(x)
    p = _sigmoid(z)
    nf = len(fake)
    lf, in_f = _log_clamped(1.0 - p[:nf])
    lr_, in_r = _log_clamped(p[nf:])
    loss = -(lf.sum() + lr_.sum())
    dz = np.concatenate([np.where(in_f, p[:nf], 0.0), np.where(in_r, p[nf:] - 1.0, 0.0)])
    grads, _ = teacher.backward(cache, dz)
    return float(loss), grads


def student_objective(student: Discriminator, fake: np.ndarray, labels: np.ndarray):
    """Mean log-likelihood of the vote labels under the student, and the
    gradients of its negation (the quantity the student descends)."""
    z, cache = student.forward(fake)
    p = _sigmoid(z)
    g = np.asarray(labels, dtype=np.float64)
    l1, in1 = _log_clamped(p)
    l0, in0 = _log_clamped(1.0 - p)
    value = float(np.mean(g * l1 + (1.0 - g) * l0))
    n = len(fake)
    dz = (g * np.where(in1, p - 1.0, 0.0) + (1.0 - g) * np.where(in0, p, 0.0)) / n
    grads, _ = student.backward(cache, dz)
    return value, grads


def weight_gradient(W: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Client side: recover ``dL/dW = A W^{-T}`` from the host's ``A = delta^T G(X)``."""
    return np.linalg.solve(W, A.T).T


def procrustes(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Orthogonal ``Q`` minimising ``||src Q^T - dst||_F``."""
    u, _, vt = np.linalg.svd(dst.T @ src)
    return u @ vt


def csls_pairs(src: np.ndarray, dst: np.ndarray, k: int = 10) -> np.ndarray:
    """Mutual nearest neighbours under cross-domain similarity local scaling."""
    a = src / np.maximum(np.linalg.norm(src, axis=1, keepdims=True), 1e-12)
    b = dst / np.maximum(np.linalg.norm(dst, axis=1, keepdims=True), 1e-12)
    sim = a @ b.T
    k = max(1, min(k, sim.shape[0], sim.shape[1]))
    r_src = np.sort(sim, axis=1)[:, -k:].mean(1)
    r_dst = np.sort(sim, axis=0)[-k:, :].mean(0)
    csls = 2 * sim - r_src[:, None] - r_dst[None, :]
    fwd = csls.argmax(1)
    bwd = csls.argmax(0)
    i = np.flatnonzero(bwd[fwd] == np.arange(len(src)))
    return np.stack([i, fwd[i]], axis=1)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def partition(n: int, parts: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint, exhaustive split of ``range(n)`` into near-equal index sets."""
    return [np.sort(p) for p in np.array_split(rng.permutation(n), parts)]


# --------------------------------------------------------------------------- views and bundle

@dataclass(eq=False)
class ClientView:
    """What the client holds for one session: its aligned rows in alignment order."""

    graph_id: str
    rows: np.ndarray
    n_entity_rows: int
    table: EmbeddingTable | None = None
    contexts: list[NeighborContext] = field(default_factory=list)
    aligned_relations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass(eq=False)
class HostView:
    graph_id: str
    rows: np.ndarray
    entity_ids: np.ndarray
    relation_ids: np.ndarray
    n_entities: int
    n_relations: int


def client_view(g: KnowledgeGraph, tbl: EmbeddingTable, align: AlignmentSet,
                contexts: bool = True) -> ClientView:
    local = align.oriented(g.graph_id)
    ents, rels = local.entity_pairs[:, 0], local.relation_pairs[:, 0]
    rows = np.concatenate([tbl.entity[ents], tbl.relation[rels]])
    ctx = extract_neighbor_context(g, local) if contexts and len(ents) else []
    return ClientView(g.graph_id, rows, len(ents), tbl, ctx, rels)


def host_view(g: KnowledgeGraph, tbl: EmbeddingTable, align: AlignmentSet) -> HostView:
    local = align.oriented(g.graph_id)
    ents, rels = local.entity_pairs[:, 0], local.relation_pairs[:, 0]
    rows = np.concatenate([tbl.entity[ents], tbl.relation[rels]])
    return HostView(g.graph_id, rows, ents, rels, tbl.n_entities, tbl.n_relations)


@dataclass(eq=False)
class VirtualExtension:
    """Translated one-hop neighbourhood, in client-local virtual numbering.

    ``triples`` rows are ``(center, relation code, virtual entity, center is head)``;
    ``center`` indexes the aligned entities, a relation code ``k >= 0`` is
    virtual relation ``k`` and ``-(j + 1)`` is aligned relation ``j``.
    """

    entity_rows: np.ndarray
    relation_rows: np.ndarray
    triples: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "VirtualExtension":
        return cls(np.zeros((0, dim)), np.zeros((0, dim)), np.zeros((0, 4), dtype=np.int64))


@dataclass(eq=False)
class TranslatedBundle:
    """Everything the host receives at the end of a session, in host id space."""

    session: str
    client: str
    host: str
    entity_ids: np.ndarray
    entity_rows: np.ndarray
    relation_ids: np.ndarray
    relation_rows: np.ndarray
    virtual_entity_rows: np.ndarray
    virtual_relation_rows: np.ndarray
    virtual_triples: np.ndarray
    epsilon: float
    epochs: int = 0
    converged: bool = False

    @property
    def dim(self) -> int:
        return self.entity_rows.shape[1] if len(self.entity_rows) else self.relation_rows.shape[1]

    def virtual_labels(self) -> tuple[list[str], list[str]]:
        ents = [f"~{self.session}/e{k}" for k in range(len(self.virtual_entity_rows))]
        rels = [f"~{self.session}/r{k}" for k in range(len(self.virtual_relation_rows))]
        return ents, rels


# --------------------------------------------------------------------------- session

@dataclass(eq=False)
class PpatSession:
    client: str
    host: str
    W: np.ndarray
    teachers: list[Discriminator]
    student: Discriminator
    partitions: list[np.ndarray]
    ledger: PrivacyLedger
    cfg: PpatConfig
    tag: str
    rng_client: np.random.Generator
    rng_host: np.random.Generator
    rng_noise: np.random.Generator
    labels_issued: int = 0
    epochs: int = 0
    converged: bool = False
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        c = self.cfg
        self.gen_opt = Momentum(c.learning_rate, c.momentum)
        self.teacher_opts = [Momentum(c.learning_rate, c.momentum) for _ in self.teachers]
        self.student_opt = Momentum(c.learning_rate, c.momentum)

    @property
    def dim(self) -> int:
        return self.W.shape[0]


def new_session(client: str, host: str, dim: int, n_real: int, cfg: PpatConfig | None = None,
                ledger: PrivacyLedger | None = None, seed: int = 0, tag: str | None = None
                ) -> PpatSession:
    cfg = cfg or PpatConfig()
    if n_real < 1:
        raise ValueError("a session needs at least one aligned item")
    ss = np.random.SeedSequence(seed)
    rc, rh, rn = (np.random.default_rng(s) for s in ss.spawn(3))
    n_teachers = cfg.teachers
    if n_real < n_teachers:
        n_teachers = max(1, n_real)
        log.warning("only %d aligned items; using %d teachers instead of %d",
                    n_real, n_teachers, cfg.teachers)
    W = random_orthogonal(dim, rc) if cfg.w_init == "orthogonal" else np.eye(dim)
    teachers = [Discriminator.create(dim, cfg.hidden, rh, cfg.leak) for _ in range(n_teachers)]
    student = Discriminator.create(dim, cfg.hidden, rh, cfg.leak)
    parts = partition(n_real, n_teachers, rh)
    return PpatSession(client, host, W, teachers, student, parts, ledger or PrivacyLedger(), cfg,
                       tag or f"{client}>{host}#{seed}", rc, rh, rn)


def generate(session: PpatSession, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != session.dim:
        raise ValueError(f"expected rows of length {session.dim}, got shape {x.shape}")
    return x @ session.W.T


def generator_loss(session: PpatSession, fake: np.ndarray) -> float:
    return generator_objective(session.student, fake)[0]


def generator_grad_message(session: PpatSession, fake: np.ndarray) -> tuple[float, np.ndarray]:
    """Host side: loss and the d x d matrix ``delta^T G(X)`` sent back to the client."""
    loss, delta = generator_objective(session.student, fake)
    return loss, delta.T @ fake


def teacher_loss(session: PpatSession, i: int, fake: np.ndarray, real: np.ndarray) -> float:
    return teacher_objective(session.teachers[i], fake, real)[0]


def teacher_step(session: PpatSession, fake: np.ndarray, y: np.ndarray) -> list[float]:
    """One update per teacher on the shared fake batch and real rows of its own partition.

    Each teacher draws up to ``batch_size`` real rows from its partition per
    step (stochastic estimate of the full partition sum).
    """
    losses = []
    bs = session.cfg.batch_size
    for t, opt, part in zip(session.teachers, session.teacher_opts, session.partitions):
        if len(part) > bs:
            part = part[session.rng_host.choice(len(part), bs, replace=False)]
        real = y[part]
        loss, grads = teacher_objective(t, fake, real)
        scale = 1.0 / (len(fake) + len(real))
        opt.step(t.params(), {k: v * scale for k, v in grads.items()})
        losses.append(loss)
    return losses


def teacher_votes(session: PpatSession, fake: np.ndarray) -> np.ndarray:
    return np.stack([(t.prob(fake) > 0.5).astype(np.int64) for t in session.teachers])


def student_step(session: PpatSession, fake: np.ndarray, zero_noise: bool = False
                 ) -> tuple[float, np.ndarray]:
    """Label the fake batch by noisy vote and train the student on it.

    Returns the student objective (mean log-likelihood, before the update)
    and the labels.
    """
    labels, _ = pate_vote_batch(teacher_votes(session, fake), session.ledger, session.rng_noise,
                                zero_noise=zero_noise)
    session.labels_issued += len(labels)
    value, grads = student_objective(session.student, fake, labels)
    session.student_opt.step(session.student.params(), grads)
    return value, labels


def apply_generator_update(session: PpatSession, A: np.ndarray) -> None:
    """Client side: momentum step on W from the host's matrix, then pull W toward orthogonal."""
    dW = weight_gradient(session.W, A)
    session.gen_opt.step({"W": session.W}, {"W": dW})
    b = session.cfg.orthogonalize
    if b:
        W = session.W
        session.W[:] = (1 + b) * W - b * (W @ W.T) @ W


def _residual(fake: np.ndarray, y: np.ndarray) -> float:
    return float(np.linalg.norm(fake - y) / max(1.0, np.linalg.norm(y)))


def build_virtual_bundle(session: PpatSession, contexts: list[NeighborContext],
                         table: EmbeddingTable, aligned_relations: np.ndarray | None = None
                         ) -> VirtualExtension:
    """Client side: translate the one-hop neighbourhood of every aligned entity.

    Each distinct adjacent entity and each distinct non-aligned joining
    relation becomes one virtual row; edges keep their direction.
    """
    if session.cfg.simple or not contexts:
        return VirtualExtension.empty(session.dim)
    rel_code = {}
    if aligned_relations is not None:
        rel_code = {int(r): -(j + 1) for j, r in enumerate(aligned_relations)}
    ent_index: dict[int, int] = {}
    rel_index: dict[int, int] = {}
    triples = []
    for ci, ctx in enumerate(contexts):
        for e, r, head in zip(ctx.adjacent, ctx.relations, ctx.center_is_head):
            e, r = int(e), int(r)
            v = ent_index.setdefault(e, len(ent_index))
            code = rel_code.get(r)
            if code is None:
                code = rel_index.setdefault(r, len(rel_index))
            triples.append((ci, code, v, int(head)))
    ents = np.fromiter(ent_index, dtype=np.int64, count=len(ent_index))
    rels = np.fromiter(rel_index, dtype=np.int64, count=len(rel_index))
    return VirtualExtension(
        generate(session, table.entity[ents]) if len(ents) else np.zeros((0, session.dim)),
        generate(session, table.relation[rels]) if len(rels) else np.zeros((0, session.dim)),
        np.array(triples, dtype=np.int64).reshape(-1, 4),
    )


def resolve_virtual_triples(ext_triples: np.ndarray, host: HostView) -> np.ndarray:
    """Host side: map client-local virtual numbering to host ids (virtual ids after host ids)."""
    t = np.asarray(ext_triples, dtype=np.int64).reshape(-1, 4)
    out = np.empty((len(t), 3), dtype=np.int64)
    center = host.entity_ids[t[:, 0]]
    vent = host.n_entities + t[:, 2]
    code = t[:, 1]
    aligned = code < 0
    rel = np.where(aligned, 0, host.n_relations + code)
    if aligned.any():
        rel[aligned] = host.relation_ids[-code[aligned] - 1]
    head = t[:, 3].astype(bool)
    out[:, 0] = np.where(head, center, vent)
    out[:, 1] = rel
    out[:, 2] = np.where(head, vent, center)
    return out


def _refine(session: PpatSession, x: np.ndarray, y: np.ndarray, channel: SessionChannel) -> None:
    c = session.cfg
    for _ in range(c.refine_steps):
        fake = channel.send_matrix(MessageKind.ADV_BATCH, session.client, session.host,
                                   generate(session, x), session=session.tag, phase="refine")
        if c.refine == "aligned":
            Q = procrustes(fake, y)
        else:
            pairs = csls_pairs(fake, y, c.csls_k)
            if len(pairs) < 2:
                return
            Q = procrustes(fake[pairs[:, 0]], y[pairs[:, 1]])
        Q = channel.send_matrix(MessageKind.GRAD_BATCH, session.host, session.client, Q,
                                session=session.tag, phase="refine")
        session.W = Q @ session.W


def run_session(session: PpatSession, x: ClientView, y: HostView,
                channel: SessionChannel | None = None) -> TranslatedBundle:
    """Train the translation for one (client, host) pair and return the host's bundle.

    Per batch: generate, transmit, teacher updates, noisy vote, student
    update, generator loss, gradient matrix back to the client, W update.
    Training stops when the moving average of student accuracy has not
    improved for ``patience`` epochs, at ``max_epochs``, or at once if the
    paired residual is already below ``converge_tol``.
    """
    channel = channel or SessionChannel()
    c = session.cfg
    X, Y = x.rows, y.rows
    n = len(X)
    if n == 0:
        raise ValueError("alignment is empty")
    if len(Y) != n or X.shape[1] != session.dim or Y.shape[1] != session.dim:
        raise ValueError("client and host views do not line up")

    probe = channel.send_matrix(MessageKind.ADV_BATCH, session.client, session.host,
                                generate(session, X), session=session.tag, phase="probe")
    session.converged = _residual(probe, Y) <= c.converge_tol
    best, stale, accs = -np.inf, 0, []
    while not session.converged and session.epochs < c.max_epochs:
        order = session.rng_client.permutation(n)
        correct = 0
        for s in range(0, n, c.batch_size):
            fake = channel.send_matrix(MessageKind.ADV_BATCH, session.client, session.host,
                                       generate(session, X[order[s:s + c.batch_size]]),
                                       session=session.tag)
            teacher_step(session, fake, Y)
            _, labels = student_step(session, fake)
            correct += int(((session.student.prob(fake) > 0.5) == labels).sum())
            g_loss, A = generator_grad_message(session, fake)
            A = channel.send_matrix(MessageKind.GRAD_BATCH, session.host, session.client, A,
                                    session=session.tag)
            apply_generator_update(session, A)
        session.epochs += 1
        accs.append(correct / n)
        avg = float(np.mean(accs[-c.window:]))
        session.history.append({"epoch": session.epochs, "student_accuracy": correct / n,
                                "moving_average": avg, "generator_loss": g_loss,
                                "epsilon": session.ledger.epsilon()})
        if avg > best + 1e-12:
            best, stale = avg, 0
        else:
            stale += 1
            if stale >= c.patience:
                break
    if not session.converged and c.refine != "none":
        _refine(session, X, Y, channel)

    ext = (build_virtual_bundle(session, x.contexts, x.table, x.aligned_relations)
           if x.table is not None else VirtualExtension.empty(session.dim))
    payload = np.concatenate([generate(session, X), ext.entity_rows, ext.relation_rows])
    got = channel.send_matrix(
        MessageKind.TRANSLATED_BUNDLE, session.client, session.host, payload,
        session=session.tag, aligned_entities=x.n_entity_rows,
        aligned_relations=n - x.n_entity_rows, virtual_entities=len(ext.entity_rows),
        virtual_relations=len(ext.relation_rows), virtual_triples=ext.triples.tolist())
    ne, nve, nvr = x.n_entity_rows, len(ext.entity_rows), len(ext.relation_rows)
    return TranslatedBundle(
        session=session.tag, client=session.client, host=session.host,
        entity_ids=y.entity_ids, entity_rows=got[:ne],
        relation_ids=y.relation_ids, relation_rows=got[ne:n],
        virtual_entity_rows=got[n:n + nve], virtual_relation_rows=got[n + nve:n + nve + nvr],
        virtual_triples=resolve_virtual_triples(ext.triples, y),
        epsilon=session.ledger.epsilon(), epochs=session.epochs, converged=session.converged)
