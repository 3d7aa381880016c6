"""Private per-owner triple storage.

Each knowledge-graph owner keeps its entities, relations and triples in a
:class:`KnowledgeGraph`. Labels are interned to dense owner-local integer ids
on load; triples live in an ``(n, 3)`` int64 array of ``(head, relation,
tail)`` rows and carry a split tag (train / valid / test).
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "valid": VALID, "test": TEST}

GRAPH_MAGIC = b"FKG1"


class GraphFormatError(ValueError):
    """Raised for malformed triple, alignment or cache files."""


class NegativeSamplingError(RuntimeError):
    """Raised when no unseen corruption can be found within the retry bound."""


class SplitError(ValueError):
    pass


@dataclass(eq=False)
class KnowledgeGraph:
    graph_id: str
    entities: list[str]
    relations: list[str]
    triples: np.ndarray
    split: np.ndarray = None  # type: ignore[assignment]
    duplicate_count: int = 0

    def __post_init__(self):
        self.triples = np.ascontiguousarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if self.split is None:
            self.split = np.zeros(len(self.triples), dtype=np.uint8)
        else:
            self.split = np.ascontiguousarray(self.split, dtype=np.uint8)
        if len(self.split) != len(self.triples):
            raise ValueError("split tags and triples differ in length")
        if len(self.triples):
            if self.triples[:, [0, 2]].max() >= len(self.entities) or self.triples.min() < 0:
                raise ValueError("entity id out of range")
            if self.triples[:, 1].max() >= len(self.relations):
                raise ValueError("relation id out of range")

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def subset(self, which: str | int) -> np.ndarray:
        tag = SPLIT_NAMES[which] if isinstance(which, str) else which
        return self.triples[self.split == tag]

    @property
    def train(self) -> np.ndarray:
        return self.subset(TRAIN)

    @property
    def valid(self) -> np.ndarray:
        return self.subset(VALID)

    @property
    def test(self) -> np.ndarray:
        return self.subset(TEST)

    @cached_property
    def entity_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.entities)}

    @cached_property
    def relation_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.relations)}

    def triple_keys(self, triples: np.ndarray | None = None) -> np.ndarray:
        """Encode triples as unique int64 keys (head, relation, tail)."""
        t = self.triples if triples is None else np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return triple_keys(t, self.n_entities, self.n_relations)

    @cached_property
    def known_keys(self) -> np.ndarray:
        """Sorted keys of every stored triple, all splits together."""
        return np.unique(self.triple_keys())

    def contains(self, triples: np.ndarray) -> np.ndarray:
        keys = self.triple_keys(triples)
        known = self.known_keys
        pos = np.searchsorted(known, keys)
        pos = np.minimum(pos, len(known) - 1)
        return known[pos] == keys if len(known) else np.zeros(len(keys), dtype=bool)

    def with_split(self, split: np.ndarray) -> "KnowledgeGraph":
        return KnowledgeGraph(self.graph_id, self.entities, self.relations, self.triples, split,
                              self.duplicate_count)

    def extended(self, entity_labels: list[str], relation_labels: list[str],
                 triples: np.ndarray) -> "KnowledgeGraph":
        """Return a copy with extra entities, relations and train triples appended."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return KnowledgeGraph(
            self.graph_id,
            self.entities + list(entity_labels),
            self.relations + list(relation_labels),
            np.concatenate([self.triples, triples]),
            np.concatenate([self.split, np.full(len(triples), TRAIN, dtype=np.uint8)]),
            self.duplicate_count,
        )

    def same_as(self, other: "KnowledgeGraph") -> bool:
        return (
            self.graph_id == other.graph_id
            and self.entities == other.entities
            and self.relations == other.relations
            and np.array_equal(self.triples, other.triples)
            and np.array_equal(self.split, other.split)
        )


def triple_keys(triples: np.ndarray, n_entities: int, n_relations: int) -> np.ndarray:
    t = np.asarray(triples, dtype=np.int64)
    return (t[:, 0] * n_relations + t[:, 1]) * n_entities + t[:, 2]


# --------------------------------------------------------------------------- ingestion

def _intern(labels: dict[str, int], order: list[str], label: str) -> int:
    idx = labels.get(label)
    if idx is None:
        idx = labels[label] = len(order)
        order.append(label)
    return idx


def read_triples(lines: Iterable[str], graph_id: str = "g") -> KnowledgeGraph:
    """Parse tab-separated ``head<TAB>relation<TAB>tail`` records.

    Blank lines and lines starting with ``#`` are skipped. Duplicate triples
    are dropped and counted.
    """
    ent_ids: dict[str, int] = {}
    rel_ids: dict[str, int] = {}
    entities: list[str] = []
    relations: list[str] = []
    rows = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not all(parts):
            raise GraphFormatError(f"line {lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
        h, r, t = parts
        rows.append((_intern(ent_ids, entities, h), _intern(rel_ids, relations, r),
                     _intern(ent_ids, entities, t)))
    if not rows:
        raise GraphFormatError("no triples found (empty file)")
    arr = np.asarray(rows, dtype=np.int64)
    keys = triple_keys(arr, len(entities), len(relations))
    _, first = np.unique(keys, return_index=True)
    first.sort()
    dupes = len(arr) - len(first)
    if dupes:
        logger.warning("%s: dropped %d duplicate triples", graph_id, dupes)
    return KnowledgeGraph(graph_id, entities, relations, arr[first], duplicate_count=dupes)


def load_graph(path: str | Path, format: str = "tsv", graph_id: str | None = None) -> KnowledgeGraph:
    """Load a graph from a TSV triple file or an ``FKG1`` binary cache."""
    path = Path(path)
    gid = graph_id or path.stem
    if format == "tsv":
        with open(path, encoding="utf-8") as fh:
            return read_triples(fh, gid)
    if format in ("cache", "fkg"):
        with open(path, "rb") as fh:
            g = read_graph_cache(fh)
        if graph_id:
            g.graph_id = graph_id
        return g
    raise ValueError(f"unknown triple format {format!r}")


def write_triples(g: KnowledgeGraph, path: str | Path, which: str | None = None) -> None:
    rows = g.triples if which is None else g.subset(which)
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in rows:
            fh.write(f"{g.entities[h]}\t{g.relations[r]}\t{g.entities[t]}\n")


# Binary cache: "FKG1", then little-endian u32 counts (entities, relations,
# triples, graph-id length), the graph id, label tables (u32 length + utf-8),
# u32 triple rows and u8 split tags.

def _write_labels(fh: BinaryIO, labels: list[str]) -> None:
    for label in labels:
        raw = label.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise GraphFormatError("truncated graph cache")
    return data


def _read_labels(fh: BinaryIO, count: int) -> list[str]:
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        out.append(_read_exact(fh, n).decode("utf-8"))
    return out


def write_graph_cache(g: KnowledgeGraph, fh: BinaryIO) -> None:
    gid = g.graph_id.encode("utf-8")
    fh.write(GRAPH_MAGIC)
    fh.write(struct.pack("<4I", g.n_entities, g.n_relations, len(g), len(gid)))
    fh.write(gid)
    _write_labels(fh, g.entities)
    _write_labels(fh, g.relations)
    fh.write(g.triples.astype("<u4").tobytes())
    fh.write(g.split.astype(np.uint8).tobytes())


def read_graph_cache(fh: BinaryIO) -> KnowledgeGraph:
    if fh.read(4) != GRAPH_MAGIC:
        raise GraphFormatError("not an FKG1 graph cache")
    n_ent, n_rel, n_tri, n_gid = struct.unpack("<4I", _read_exact(fh, 16))
    gid = _read_exact(fh, n_gid).decode("utf-8")
    entities = _read_labels(fh, n_ent)
    relations = _read_labels(fh, n_rel)
    triples = np.frombuffer(_read_exact(fh, 12 * n_tri), dtype="<u4").astype(np.int64).reshape(-1, 3)
    split = np.frombuffer(_read_exact(fh, n_tri), dtype=np.uint8).copy()
    return KnowledgeGraph(gid, entities, relations, triples, split)


def graph_to_bytes(g: KnowledgeGraph) -> bytes:
    buf = io.BytesIO()
    write_graph_cache(g, buf)
    return buf.getvalue()


def graph_from_bytes(data: bytes) -> KnowledgeGraph:
    return read_graph_cache(io.BytesIO(data))


# --------------------------------------------------------------------------- splitting

def split_triples(g: KnowledgeGraph, ratio=(90, 5, 5), seed: int = 0) -> KnowledgeGraph:
    """Assign every triple to train/valid/test.

    Valid and test triples whose entities or relation would otherwise be
    absent from train are moved to train, and replacements are pulled from
    train where that keeps coverage intact, so the counts stay at the ratio
    whenever the graph allows it.
    """
    ratio = tuple(ratio)
    if len(ratio) != 3 or any(r <= 0 for r in ratio) or sum(ratio) != 100:
        raise SplitError(f"ratio must be three positive parts summing to 100, got {ratio}")
    n = len(g)
    n_valid = int(round(n * ratio[1] / 100))
    n_test = int(round(n * ratio[2] / 100))
    if n_valid < 1 or n_test < 1 or n - n_valid - n_test < 1:
        raise SplitError(f"graph with {n} triples is too small for ratio {ratio}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    split = np.full(n, TRAIN, dtype=np.uint8)
    split[order[:n_valid]] = VALID
    split[order[n_valid:n_valid + n_test]] = TEST

    t = g.triples
    ent_cnt = np.zeros(g.n_entities, dtype=np.int64)
    rel_cnt = np.zeros(g.n_relations, dtype=np.int64)
    tr = t[split == TRAIN]
    np.add.at(ent_cnt, tr[:, 0], 1)
    np.add.at(ent_cnt, tr[:, 2], 1)
    np.add.at(rel_cnt, tr[:, 1], 1)

    def covered(i):
        h, r, tt = t[i]
        return ent_cnt[h] > 0 and ent_cnt[tt] > 0 and rel_cnt[r] > 0

    def to_train(i):
        h, r, tt = t[i]
        split[i] = TRAIN
        ent_cnt[h] += 1
        ent_cnt[tt] += 1
        rel_cnt[r] += 1

    def removable(i):
        h, r, tt = t[i]
        need_h = 2 if h == tt else 1
        return ent_cnt[h] > need_h and ent_cnt[tt] > need_h and rel_cnt[r] > 1

    moved = {VALID: 0, TEST: 0}
    for i in order[:n_valid + n_test]:
        if not covered(i):
            moved[int(split[i])] += 1
            to_train(i)
    # Refill from train, scanning in the same seeded order.
    for tag in (VALID, TEST):
        need = moved[tag]
        if not need:
            continue
        for i in order[n_valid + n_test:][::-1]:
            if need == 0:
                break
            if split[i] != TRAIN or not removable(i):
                continue
            h, r, tt = t[i]
            split[i] = tag
            ent_cnt[h] -= 1
            ent_cnt[tt] -= 1
            rel_cnt[r] -= 1
            need -= 1
    if not (split == VALID).any() or not (split == TEST).any():
        raise SplitError("graph too small: valid or test split ended up empty")
    return g.with_split(split)


# --------------------------------------------------------------------------- negatives

def sample_negatives(g: KnowledgeGraph, batch: np.ndarray, seed=None, max_retries: int = 50,
                     rng: np.random.Generator | None = None) -> np.ndarray:
    """One corruption per positive: head or tail replaced by a uniform entity.

    Corruptions that hit any stored triple (train, valid or test) are redrawn,
    up to ``max_retries`` times per triple.
    """
    rng = rng if rng is not None else np.random.default_rng(seed)
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    neg = batch.copy()
    if not len(batch):
        return neg
    corrupt_head = rng.random(len(batch)) < 0.5
    pending = np.arange(len(batch))
    for _ in range(max_retries):
        draws = rng.integers(0, g.n_entities, size=len(pending))
        cand = batch[pending].copy()
        ch = corrupt_head[pending]
        cand[ch, 0] = draws[ch]
        cand[~ch, 2] = draws[~ch]
        bad = g.contains(cand)
        neg[pending] = cand
        pending = pending[bad]
        if not len(pending):
            return neg
    raise NegativeSamplingError(
        f"{g.graph_id}: {len(pending)} positives have no unseen corruption after {max_retries} retries")


# --------------------------------------------------------------------------- alignment

@dataclass(eq=False)
class AlignmentSet:
    """Shared entity and relation ids between two graphs.

    Column 0 of each pair array holds ids in ``pair[0]``, column 1 ids in
    ``pair[1]``.
    """

    pair: tuple[str, str]
    entity_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    relation_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.pair = tuple(self.pair)
        self.entity_pairs = np.asarray(self.entity_pairs, dtype=np.int64).reshape(-1, 2)
        self.relation_pairs = np.asarray(self.relation_pairs, dtype=np.int64).reshape(-1, 2)
        for name, arr in (("entity", self.entity_pairs), ("relation", self.relation_pairs)):
            for col in (0, 1):
                if len(np.unique(arr[:, col])) != len(arr):
                    raise GraphFormatError(f"{name} alignment {self.pair} is not injective")

    def __len__(self) -> int:
        return len(self.entity_pairs) + len(self.relation_pairs)

    def involves(self, graph_id: str) -> bool:
        return graph_id in self.pair

    def other(self, graph_id: str) -> str:
        a, b = self.pair
        return b if graph_id == a else a

    def oriented(self, first: str) -> "AlignmentSet":
        """Return the same alignment with ``first`` in column 0."""
        if self.pair[0] == first:
            return self
        if self.pair[1] != first:
            raise KeyError(f"{first} is not part of alignment {self.pair}")
        return AlignmentSet((self.pair[1], self.pair[0]), self.entity_pairs[:, ::-1],
                            self.relation_pairs[:, ::-1])

    def sampled(self, ratio: float, seed: int, entities: bool = True,
                relations: bool = True) -> "AlignmentSet":
        """Random subsample of the pairs (ablations over aligned-set size)."""
        rng = np.random.default_rng(seed)

        def take(arr, keep):
            if not keep:
                return arr[:0]
            k = int(round(len(arr) * ratio))
            if ratio > 0 and len(arr) and k == 0:
                k = 1
            idx = np.sort(rng.permutation(len(arr))[:k])
            return arr[idx]

        return AlignmentSet(self.pair, take(self.entity_pairs, entities),
                            take(self.relation_pairs, relations))


def check_alignment(align: AlignmentSet, graphs: dict[str, KnowledgeGraph]) -> None:
    for col, gid in enumerate(align.pair):
        if gid not in graphs:
            raise KeyError(f"alignment references unknown graph {gid!r}")
        g = graphs[gid]
        if len(align.entity_pairs) and align.entity_pairs[:, col].max() >= g.n_entities:
            raise ValueError(f"entity alignment id out of range for {gid}")
        if len(align.relation_pairs) and align.relation_pairs[:, col].max() >= g.n_relations:
            raise ValueError(f"relation alignment id out of range for {gid}")


def load_alignment(path: str | Path, graphs: dict[str, KnowledgeGraph]) -> AlignmentSet:
    """Read an alignment file.

    The first non-comment line names the pair (``graphA<TAB>graphB``); each
    following line is ``labelA<TAB>labelB`` with an optional third field
    ``entity`` (default) or ``relation``.
    """
    ent, rel = [], []
    pair = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if pair is None:
                if len(parts) != 2:
                    raise GraphFormatError(f"line {lineno}: header must name two graphs")
                pair = (parts[0], parts[1])
                for gid in pair:
                    if gid not in graphs:
                        raise GraphFormatError(f"line {lineno}: unknown graph {gid!r}")
                continue
            if len(parts) not in (2, 3):
                raise GraphFormatError(f"line {lineno}: expected labelA<TAB>labelB[<TAB>kind]")
            kind = parts[2] if len(parts) == 3 else "entity"
            ga, gb = graphs[pair[0]], graphs[pair[1]]
            if kind == "entity":
                index_a, index_b, out = ga.entity_index, gb.entity_index, ent
            elif kind == "relation":
                index_a, index_b, out = ga.relation_index, gb.relation_index, rel
            else:
                raise GraphFormatError(f"line {lineno}: unknown kind {kind!r}")
            try:
                out.append((index_a[parts[0]], index_b[parts[1]]))
            except KeyError as exc:
                raise GraphFormatError(f"line {lineno}: unknown label {exc.args[0]!r}") from None
    if pair is None:
        raise GraphFormatError("alignment file has no header")
    return AlignmentSet(pair, np.array(ent, dtype=np.int64).reshape(-1, 2),
                        np.array(rel, dtype=np.int64).reshape(-1, 2))


def write_alignment(align: AlignmentSet, graphs: dict[str, KnowledgeGraph], path: str | Path) -> None:
    ga, gb = graphs[align.pair[0]], graphs[align.pair[1]]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{align.pair[0]}\t{align.pair[1]}\n")
        for a, b in align.entity_pairs:
            fh.write(f"{ga.entities[a]}\t{gb.entities[b]}\n")
        for a, b in align.relation_pairs:
            fh.write(f"{ga.relations[a]}\t{gb.relations[b]}\trelation\n")


# --------------------------------------------------------------------------- neighbourhoods

@dataclass(eq=False)
class NeighborContext:
    """One-hop train neighbourhood of an aligned entity in the client graph."""

    center: int
    adjacent: np.ndarray
    relations: np.ndarray
    center_is_head: np.ndarray

    def __len__(self) -> int:
        return len(self.adjacent)


def extract_neighbor_context(g: KnowledgeGraph, align: AlignmentSet) -> list[NeighborContext]:
    """Client-side 1-hop structure around every aligned entity.

    ``align`` must list ``g`` as one side; neighbours that are themselves
    aligned are left out since they travel as aligned rows already.
    """
    local = align.oriented(g.graph_id)
    centers = local.entity_pairs[:, 0]
    slot = np.full(g.n_entities, -1, dtype=np.int64)
    slot[centers] = np.arange(len(centers))
    aligned = slot >= 0
    tr = g.train
    as_head = aligned[tr[:, 0]] & ~aligned[tr[:, 2]]
    as_tail = aligned[tr[:, 2]] & ~aligned[tr[:, 0]]
    owner = np.concatenate([slot[tr[as_head, 0]], slot[tr[as_tail, 2]]])
    adj = np.concatenate([tr[as_head, 2], tr[as_tail, 0]])
    rels = np.concatenate([tr[as_head, 1], tr[as_tail, 1]])
    flags = np.concatenate([np.ones(as_head.sum(), bool), np.zeros(as_tail.sum(), bool)])
    order = np.argsort(owner, kind="stable")
    bounds = np.cumsum(np.bincount(owner, minlength=len(centers)))[:-1]
    parts = [np.split(a[order], bounds) for a in (adj, rels, flags)]
    return [NeighborContext(int(c), a, r, f) for c, a, r, f in zip(centers, *parts)]
