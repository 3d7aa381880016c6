"""Synthetic multi-owner federations for desk-scale experiments.

All graphs are cut out of one latent "world": every world entity has a point
in a low-dimensional space and every world relation is a translation. Tails
are drawn near ``head + relation`` so the triples are learnable by
translation models, and entities shared between owners keep the same latent
point in both graphs. Triples among a shared block are copied into the
partner graph (minus a noise fraction), so the overlap carries common edge
structure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kg import AlignmentSet, KnowledgeGraph


@dataclass
class GraphSpec:
    graph_id: str
    entities: int
    relations: int
    triples: int


@dataclass
class OverlapSpec:
    pair: tuple[str, str]
    entities: int
    relations: int = 0


@dataclass
class SynthConfig:
    graphs: list[GraphSpec]
    overlaps: list[OverlapSpec] = field(default_factory=list)
    latent_dim: int = 8
    temperature: float = 0.05
    candidates: int = 4
    noise: float = 0.1
    shared_copy: float = 0.5
    relation_scale: float = 0.6

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        graphs = [GraphSpec(g["id"], int(g["entities"]), int(g["relations"]), int(g["triples"]))
                  for g in d["graphs"]]
        overlaps = [OverlapSpec(tuple(o["pair"]), int(o.get("entities", 0)), int(o.get("relations", 0)))
                    for o in d.get("overlaps", [])]
        extra = {k: d[k] for k in ("latent_dim", "temperature", "candidates", "noise", "shared_copy",
                                   "relation_scale")
                 if k in d}
        return cls(graphs, overlaps, **extra)

    @classmethod
    def from_json(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _validate(cfg: SynthConfig) -> dict[str, GraphSpec]:
    specs = {g.graph_id: g for g in cfg.graphs}
    if len(specs) != len(cfg.graphs):
        raise ValueError("duplicate graph ids in synth config")
    used_e = {gid: 0 for gid in specs}
    for o in cfg.overlaps:
        a, b = o.pair
        if a not in specs or b not in specs or a == b:
            raise ValueError(f"overlap {o.pair} references unknown or identical graphs")
        used_e[a] += o.entities
        used_e[b] += o.entities
        for gid in (a, b):
            if o.relations > specs[gid].relations:
                raise ValueError(f"relation overlap {o.relations} exceeds {gid}'s "
                                 f"{specs[gid].relations} relations")
    for gid, used in used_e.items():
        if used > specs[gid].entities:
            raise ValueError(f"overlaps need {used} entities in {gid}, which only has "
                             f"{specs[gid].entities}")
    for g in cfg.graphs:
        if g.triples < g.entities // 2:
            raise ValueError(f"{g.graph_id}: too few triples to touch every entity")
    return specs


def generate_synthetic_federation(cfg: SynthConfig | dict, seed: int = 0
                                  ) -> tuple[list[KnowledgeGraph], list[AlignmentSet]]:
    if isinstance(cfg, dict):
        cfg = SynthConfig.from_dict(cfg)
    specs = _validate(cfg)
    rng = np.random.default_rng(seed)

    # World entity ids: pairwise-shared blocks first, then private ones.
    members: dict[str, list[int]] = {gid: [] for gid in specs}
    shared_blocks = []
    next_id = 0
    for o in cfg.overlaps:
        block = list(range(next_id, next_id + o.entities))
        next_id += o.entities
        shared_blocks.append((o, block))
        members[o.pair[0]].extend(block)
        members[o.pair[1]].extend(block)
    for gid, spec in specs.items():
        n_private = spec.entities - len(members[gid])
        members[gid].extend(range(next_id, next_id + n_private))
        next_id += n_private
    n_world = next_id
    n_world_rel = max(s.relations for s in specs.values())

    k = cfg.latent_dim
    z = rng.normal(size=(n_world, k)) / np.sqrt(k)
    rel_vec = rng.normal(size=(n_world_rel, k)) * cfg.relation_scale / np.sqrt(k)

    # World relations used by each graph; aligned relations are the first ones
    # of each graph mapped onto a common world relation.
    graph_rels = {gid: list(range(spec.relations)) for gid, spec in specs.items()}

    facts: dict[str, set[tuple[int, int, int]]] = {gid: set() for gid in specs}
    m = cfg.candidates

    for gid, spec in specs.items():
        pool = np.asarray(members[gid])
        pz = z[pool]
        rels = graph_rels[gid]
        # Per relation: the m nearest pool members to head + relation, with
        # softmax weights over their distances.
        near, weight = [], []
        for r in rels:
            q = pz + rel_vec[r]
            d2 = (q * q).sum(1)[:, None] + (pz * pz).sum(1)[None, :] - 2.0 * q @ pz.T
            d = np.sqrt(np.maximum(d2, 0.0))
            np.fill_diagonal(d, np.inf)
            mm = min(m, len(pool) - 1)
            idx = np.argpartition(d, mm - 1, axis=1)[:, :mm]
            dd = np.take_along_axis(d, idx, axis=1)
            w = np.exp(-(dd - dd.min(axis=1, keepdims=True)) / cfg.temperature)
            near.append(idx)
            weight.append(np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1))

        def draw(h_local, r_local):
            cdf = weight[r_local][h_local]
            j = min(int(np.searchsorted(cdf, rng.random())), len(cdf) - 1)
            return int(pool[near[r_local][h_local, j]])

        target = spec.triples
        n_noise = int(round(target * cfg.noise))
        out = facts[gid]
        for h_local in range(len(pool)):
            r_local = int(rng.integers(len(rels)))
            out.add((int(pool[h_local]), rels[r_local], draw(h_local, r_local)))
        attempts = 0
        while len(out) < target - n_noise and attempts < 20 * target:
            attempts += 1
            h_local = int(rng.integers(len(pool)))
            r_local = int(rng.integers(len(rels)))
            out.add((int(pool[h_local]), rels[r_local], draw(h_local, r_local)))
        while len(out) < target:
            h, t = (int(x) for x in rng.choice(pool, 2, replace=False))
            out.add((h, rels[int(rng.integers(len(rels)))], t))

    # Copy edges inside shared blocks across the pair.
    for o, block in shared_blocks:
        block_set = set(block)
        a, b = o.pair
        for src, dst in ((a, b), (b, a)):
            dst_rels = set(graph_rels[dst])
            inner = [f for f in sorted(facts[src]) if f[0] in block_set and f[2] in block_set
                     and f[1] in dst_rels]
            keep = rng.random(len(inner)) < cfg.shared_copy * (1 - cfg.noise)
            facts[dst].update(f for f, kp in zip(inner, keep) if kp)

    graphs: dict[str, KnowledgeGraph] = {}
    local_ids: dict[str, dict[int, int]] = {}
    for gid, spec in specs.items():
        world_ids = members[gid]
        local = {w: i for i, w in enumerate(world_ids)}
        local_ids[gid] = local
        rows = np.array([(local[h], r, local[t]) for h, r, t in sorted(facts[gid])], dtype=np.int64)
        rows = rows[rng.permutation(len(rows))]
        graphs[gid] = KnowledgeGraph(
            gid,
            [f"{gid}/e{w}" for w in world_ids],
            [f"{gid}/r{r}" for r in graph_rels[gid]],
            rows,
        )
        # Relations never used would break the coverage invariant.
        used = np.unique(rows[:, 1])
        if len(used) != spec.relations:
            graphs[gid] = _drop_unused_relations(graphs[gid])

    aligns = []
    for o, block in shared_blocks:
        a, b = o.pair
        ent_pairs = np.array([(local_ids[a][w], local_ids[b][w]) for w in block],
                             dtype=np.int64).reshape(-1, 2)
        rel_pairs = []
        for r in range(o.relations):
            ra = graphs[a].relation_index.get(f"{a}/r{r}")
            rb = graphs[b].relation_index.get(f"{b}/r{r}")
            if ra is not None and rb is not None:
                rel_pairs.append((ra, rb))
        aligns.append(AlignmentSet((a, b), ent_pairs, np.array(rel_pairs, dtype=np.int64).reshape(-1, 2)))
    return [graphs[g.graph_id] for g in cfg.graphs], aligns


def _drop_unused_relations(g: KnowledgeGraph) -> KnowledgeGraph:
    used = np.unique(g.triples[:, 1])
    remap = np.full(g.n_relations, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    t = g.triples.copy()
    t[:, 1] = remap[t[:, 1]]
    return KnowledgeGraph(g.graph_id, g.entities, [g.relations[i] for i in used], t, g.split)


def default_federation_config(n_graphs: int = 3, entities: int = 2000, overlap: float = 0.1,
                              relations: int = 12, triples_per_entity: float = 4.0,
                              relation_overlap: int = 0) -> dict:
    """Ring-free all-pairs federation with ``overlap`` of each graph shared."""
    ids = [f"g{i + 1}" for i in range(n_graphs)]
    n_pairs = n_graphs - 1
    per_pair = int(round(entities * overlap / max(n_pairs, 1)))
    return {
        "graphs": [{"id": gid, "entities": entities, "relations": relations,
                    "triples": int(entities * triples_per_entity)} for gid in ids],
        "overlaps": [{"pair": [ids[i], ids[j]], "entities": per_pair, "relations": relation_overlap}
                     for i in range(n_graphs) for j in range(i + 1, n_graphs)],
    }
