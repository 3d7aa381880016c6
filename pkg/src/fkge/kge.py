"""Translation-family embeddings: TransE, TransH, TransR and TransD.

Scores are dissimilarities (lower is more plausible). Training minimises the
margin ranking loss ``mean(max(0, margin + s(pos) - s(neg)))`` with plain
mini-batch SGD and one corrupted triple per positive.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np

from . import kernels
from .kg import KnowledgeGraph, sample_negatives

MODELS = ("TransE", "TransH", "TransR", "TransD")
MODEL_TAGS = {name: i for i, name in enumerate(MODELS)}
EMBED_MAGIC = b"FKE1"

# model -> extra parameter arrays: (name, owner "ent"/"rel", trailing shape factor)
_EXTRAS = {
    "TransE": (),
    "TransH": (("normal", "rel", 1),),
    "TransR": (("matrix", "rel", 2),),
    "TransD": (("ent_proj", "ent", 1), ("rel_proj", "rel", 1)),
}


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "TransE"
    dim: int = 100
    learning_rate: float = 0.5
    batch_size: int = 100
    margin: float = 1.0
    norm: int = 1
    epochs_per_round: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODELS}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.margin < 0:
            raise ValueError("learning rate and batch size must be positive, margin non-negative")
        if self.norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        if self.epochs_per_round < 0:
            raise ValueError("epochs_per_round must be non-negative")


@dataclass
class EmbeddingTable:
    model: str
    dim: int
    entity: np.ndarray
    relation: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    norm: int = 1

    @property
    def n_entities(self) -> int:
        return len(self.entity)

    @property
    def n_relations(self) -> int:
        return len(self.relation)

    def params(self) -> dict[str, np.ndarray]:
        return {"entity": self.entity, "relation": self.relation, **self.extras}

    def copy(self) -> "EmbeddingTable":
        return replace(self, entity=self.entity.copy(), relation=self.relation.copy(),
                       extras={k: v.copy() for k, v in self.extras.items()})

    def equals(self, other: "EmbeddingTable") -> bool:
        if (self.model, self.dim, self.norm) != (other.model, other.dim, other.norm):
            return False
        a, b = self.params(), other.params()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params().values())

    def truncated(self, n_entities: int, n_relations: int) -> "EmbeddingTable":
        """Drop rows past the given counts (strips appended virtual rows)."""
        extras = {}
        for name, owner, _ in _EXTRAS[self.model]:
            n = n_entities if owner == "ent" else n_relations
            extras[name] = self.extras[name][:n].copy()
        return replace(self, entity=self.entity[:n_entities].copy(),
                       relation=self.relation[:n_relations].copy(), extras=extras)

    def appended(self, entity_rows: np.ndarray, relation_rows: np.ndarray,
                 rng: np.random.Generator) -> "EmbeddingTable":
        """Add rows; model extras for the new rows get fresh initial values."""
        entity_rows = np.asarray(entity_rows, dtype=np.float64).reshape(-1, self.dim)
        relation_rows = np.asarray(relation_rows, dtype=np.float64).reshape(-1, self.dim)
        fresh = _init_extras(self.model, self.dim, len(entity_rows), len(relation_rows), rng)
        extras = {k: np.concatenate([v, fresh[k]]) for k, v in self.extras.items()}
        return replace(self, entity=np.concatenate([self.entity, entity_rows]),
                       relation=np.concatenate([self.relation, relation_rows]), extras=extras)


def _uniform_unit(rng, n, d):
    bound = 6.0 / np.sqrt(d)
    v = rng.uniform(-bound, bound, size=(n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _init_extras(model, d, n_ent, n_rel, rng):
    out = {}
    for name, owner, order in _EXTRAS[model]:
        n = n_ent if owner == "ent" else n_rel
        if order == 2:
            out[name] = np.tile(np.eye(d), (n, 1, 1))
        else:
            out[name] = _uniform_unit(rng, n, d)
    return out


def init_embeddings(g: KnowledgeGraph, cfg: TrainConfig) -> EmbeddingTable:
    if cfg.dim < 1:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(cfg.seed)
    ent = _uniform_unit(rng, g.n_entities, cfg.dim)
    rel = _uniform_unit(rng, g.n_relations, cfg.dim)
    extras = _init_extras(cfg.model, cfg.dim, g.n_entities, g.n_relations, rng)
    return EmbeddingTable(cfg.model, cfg.dim, ent, rel, extras, cfg.norm)


# --------------------------------------------------------------------------- scoring

def _residual(tbl: EmbeddingTable, h, r, t):
    """Translation residual v with score = ||v||_p, plus cached pieces."""
    E, R = tbl.entity, tbl.relation
    eh, er, et = E[h], R[r], E[t]
    m = tbl.model
    if m == "TransE":
        return eh + er - et, {}
    if m == "TransH":
        w = tbl.extras["normal"][r]
        wh = np.einsum("ij,ij->i", w, eh)[:, None]
        wt = np.einsum("ij,ij->i", w, et)[:, None]
        return (eh - wh * w) + er - (et - wt * w), {"w": w, "a": et - eh}
    if m == "TransR":
        M = tbl.extras["matrix"][r]
        diff = eh - et
        return np.einsum("nij,nj->ni", M, diff) + er, {"M": M, "diff": diff}
    if m == "TransD":
        hp = tbl.extras["ent_proj"][h]
        tp = tbl.extras["ent_proj"][t]
        rp = tbl.extras["rel_proj"][r]
        hh = np.einsum("ij,ij->i", hp, eh)[:, None]
        tt = np.einsum("ij,ij->i", tp, et)[:, None]
        return eh + hh * rp + er - et - tt * rp, {"hp": hp, "tp": tp, "rp": rp, "hh": hh, "tt": tt}
    raise ValueError(m)


def _split(triples):
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return t[:, 0], t[:, 1], t[:, 2]


def score_triples(tbl: EmbeddingTable, triples: np.ndarray) -> np.ndarray:
    h, r, t = _split(triples)
    v, _ = _residual(tbl, h, r, t)
    if tbl.norm == 1:
        return np.abs(v).sum(axis=1)
    return np.sqrt((v * v).sum(axis=1))


def score_triple(tbl: EmbeddingTable, triple, model: str | None = None) -> float:
    if model is not None and model != tbl.model:
        raise ValueError(f"table holds {tbl.model}, not {model}")
    return float(score_triples(tbl, np.asarray(triple).reshape(1, 3))[0])


def score_gradients(tbl: EmbeddingTable, triples: np.ndarray, weights: np.ndarray
                    ) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Gradient of ``sum_i weights[i] * score(triple_i)``.

    Returns ``{param: (row_indices, row_gradients)}``; rows may repeat and
    must be scatter-added.
    """
    h, r, t = _split(triples)
    wts = np.asarray(weights, dtype=np.float64)[:, None]
    v, c = _residual(tbl, h, r, t)
    if tbl.norm == 1:
        g = np.sign(v)
    else:
        n = np.sqrt((v * v).sum(axis=1, keepdims=True))
        g = np.divide(v, n, out=np.zeros_like(v), where=n > 0)
    g = g * wts
    m = tbl.model
    if m == "TransE":
        return {"entity": (np.concatenate([h, t]), np.concatenate([g, -g])), "relation": (r, g)}
    if m == "TransH":
        w, a = c["w"], c["a"]
        wg = np.einsum("ij,ij->i", w, g)[:, None]
        gh = g - wg * w
        wa = np.einsum("ij,ij->i", w, a)[:, None]
        gw = wg * a + wa * g
        return {"entity": (np.concatenate([h, t]), np.concatenate([gh, -gh])),
                "relation": (r, g), "normal": (r, gw)}
    if m == "TransR":
        M, diff = c["M"], c["diff"]
        gh = np.einsum("nji,nj->ni", M, g)
        gM = g[:, :, None] * diff[:, None, :]
        return {"entity": (np.concatenate([h, t]), np.concatenate([gh, -gh])),
                "relation": (r, g), "matrix": (r, gM)}
    if m == "TransD":
        hp, tp, rp, hh, tt = c["hp"], c["tp"], c["rp"], c["hh"], c["tt"]
        rg = np.einsum("ij,ij->i", rp, g)[:, None]
        eh, et = tbl.entity[h], tbl.entity[t]
        return {
            "entity": (np.concatenate([h, t]), np.concatenate([g + rg * hp, -g - rg * tp])),
            "ent_proj": (np.concatenate([h, t]), np.concatenate([rg * eh, -rg * et])),
            "relation": (r, g),
            "rel_proj": (r, (hh - tt) * g),
        }
    raise ValueError(m)


def margin_loss(tbl: EmbeddingTable, pos: np.ndarray, neg: np.ndarray, margin: float) -> float:
    return float(np.maximum(0.0, margin + score_triples(tbl, pos) - score_triples(tbl, neg)).mean())


def project_constraints(tbl: EmbeddingTable, rows: np.ndarray | None = None) -> None:
    """Clip entity rows to the unit L2 ball; TransH normals back to unit length."""
    E = tbl.entity
    idx = slice(None) if rows is None else np.unique(rows)
    n = np.linalg.norm(E[idx], axis=1, keepdims=True)
    E[idx] = E[idx] / np.maximum(n, 1.0)
    if tbl.model == "TransH":
        w = tbl.extras["normal"]
        n = np.linalg.norm(w, axis=1, keepdims=True)
        n[n == 0] = 1.0
        w /= n


def sgd_batch(tbl: EmbeddingTable, pos: np.ndarray, neg: np.ndarray, lr: float, margin: float) -> float:
    """One SGD step on a batch; returns the batch loss before the step."""
    sp, sn = score_triples(tbl, pos), score_triples(tbl, neg)
    hinge = margin + sp - sn
    active = hinge > 0
    loss = float(np.maximum(hinge, 0.0).mean())
    if not active.any():
        return loss
    w = active / len(pos)
    params = tbl.params()
    touched = []
    # both gradients are taken at the pre-step parameters
    steps = [score_gradients(tbl, trip, sign * w[active])
             for trip, sign in ((pos[active], 1.0), (neg[active], -1.0))]
    for trip, grads in zip((pos[active], neg[active]), steps):
        for name, (idx, gr) in grads.items():
            np.add.at(params[name], idx, -lr * gr)
        touched.append(trip[:, [0, 2]].ravel())
    project_constraints(tbl, np.concatenate(touched))
    return loss


def train_epochs(g: KnowledgeGraph, tbl: EmbeddingTable, cfg: TrainConfig,
                 epochs: int | None = None, seed: int | None = None) -> EmbeddingTable:
    """Run ``epochs`` (default ``cfg.epochs_per_round``) of margin-ranking SGD.

    Returns a new table; the input is left untouched.
    """
    if tbl.n_entities != g.n_entities or tbl.n_relations != g.n_relations:
        raise ValueError(f"table shape ({tbl.n_entities}, {tbl.n_relations}) does not match graph "
                         f"({g.n_entities}, {g.n_relations})")
    if tbl.dim != cfg.dim:
        raise ValueError("table dimension differs from config")
    epochs = cfg.epochs_per_round if epochs is None else epochs
    out = tbl.copy()
    project_constraints(out)
    train = g.train
    if not len(train) or epochs == 0:
        return out
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    bs = cfg.batch_size
    for _ in range(epochs):
        order = rng.permutation(len(train))
        pos = train[order]
        neg = sample_negatives(g, pos, rng=rng)
        if out.model == "TransE":
            kernels.transe_sgd_epoch(out.entity, out.relation, pos, neg, bs,
                                     cfg.learning_rate, cfg.margin, out.norm)
        else:
            for s in range(0, len(pos), bs):
                sgd_batch(out, pos[s:s + bs], neg[s:s + bs], cfg.learning_rate, cfg.margin)
        if not out.is_finite():
            raise FloatingPointError(
                f"{g.graph_id}: non-finite embeddings after SGD (learning rate {cfg.learning_rate} "
                "is probably too high)")
    return out


# --------------------------------------------------------------------------- persistence
# "FKE1" | u8 model tag | u8 norm | u32 dim | u64 entities | u64 relations |
# little-endian f64 arrays: entity, relation, then model extras in fixed order.

_HEADER = struct.Struct("<4sBBIQQ")


def embedding_payload_size(n_entities: int, n_relations: int, dim: int, model: str = "TransE") -> int:
    """Bytes of f64 payload for a table of the given shape."""
    total = (n_entities + n_relations) * dim
    for _, owner, order in _EXTRAS[model]:
        n = n_entities if owner == "ent" else n_relations
        total += n * dim ** order
    return 8 * total


def write_embeddings(tbl: EmbeddingTable, fh: BinaryIO) -> None:
    fh.write(_HEADER.pack(EMBED_MAGIC, MODEL_TAGS[tbl.model], tbl.norm, tbl.dim,
                          tbl.n_entities, tbl.n_relations))
    fh.write(np.ascontiguousarray(tbl.entity, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(tbl.relation, dtype="<f8").tobytes())
    for name, _, _ in _EXTRAS[tbl.model]:
        fh.write(np.ascontiguousarray(tbl.extras[name], dtype="<f8").tobytes())


def read_embeddings(fh: BinaryIO) -> EmbeddingTable:
    """Read a table array by array, so large checkpoints never sit in memory twice."""
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError("truncated header")
    magic, tag, norm, dim, n_ent, n_rel = _HEADER.unpack(raw)
    if magic != EMBED_MAGIC:
        raise EmbeddingFormatError("not an FKE1 embedding file")
    if tag >= len(MODELS):
        raise EmbeddingFormatError(f"unknown model tag {tag}")
    model = MODELS[tag]

    def take(shape):
        n = int(np.prod(shape)) * 8
        data = fh.read(n)
        if len(data) != n:
            raise EmbeddingFormatError("truncated embedding payload")
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)

    ent = take((n_ent, dim))
    rel = take((n_rel, dim))
    extras = {}
    for name, owner, order in _EXTRAS[model]:
        n = n_ent if owner == "ent" else n_rel
        extras[name] = take((n,) + (dim,) * order)
    return EmbeddingTable(model, dim, ent, rel, extras, norm)


def save_embeddings(tbl: EmbeddingTable) -> bytes:
    buf = io.BytesIO()
    write_embeddings(tbl, buf)
    return buf.getvalue()


def load_embeddings(data: bytes | BinaryIO) -> EmbeddingTable:
    if isinstance(data, (bytes, bytearray, memoryview)):
        return read_embeddings(io.BytesIO(data))
    return read_embeddings(data)
