"""Experiment runner: data setup, the three run modes, artifacts and reports.

A run directory holds::

    config.json          resolved configuration
    rounds.csv           one row per training event (tick-stamped, no wall time)
    metrics.csv          final valid/test metrics per graph
    final_reports.json   the same plus wall times
    privacy.json         max eps_hat over sessions, the floor and query totals
    ledgers/*.json       one moments ledger per PPAT session
    trace.jsonl          bus trace
    checkpoints/*.fke    best embedding table per graph
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import EvalReport, evaluate
from .federation import Federation, FederationConfig, OwnerActor, RoundRecord
from .kg import (AlignmentSet, KnowledgeGraph, check_alignment, load_alignment, load_graph,
                 split_triples, triple_keys)
from .kge import _EXTRAS, MODELS, EmbeddingTable, TrainConfig, init_embeddings, train_epochs, write_embeddings
from .ppat import PpatConfig
from .synth import SynthConfig, default_federation_config, generate_synthetic_federation

log = logging.getLogger(__name__)

ROUND_FIELDS = ("tick", "actor", "event", "partner", "score", "best_score", "improved",
                "epsilon", "virtual_triples")
METRIC_FIELDS = ("graph", "mode", "dim", "split", "accuracy", "hit1", "hit3", "hit10", "mean_rank")


class ReportError(RuntimeError):
    pass


@dataclass
class RunResult:
    mode: str
    out: Path
    reports: dict[str, dict[str, EvalReport]]
    tables: dict[str, EmbeddingTable]
    federation: Federation | None = None
    max_epsilon: float | None = None


# --------------------------------------------------------------------------- data

def prepare_data(cfg: RunConfig) -> tuple[dict[str, KnowledgeGraph], list[AlignmentSet]]:
    seed = cfg["seeds"]["data"]
    ratio = tuple(cfg["split_ratio"])
    if cfg["synth"]:
        spec = cfg["synth"]
        if "graphs" not in spec:
            spec = default_federation_config(**spec)
        graphs, aligns = generate_synthetic_federation(SynthConfig.from_dict(spec), seed)
        graphs = {g.graph_id: split_triples(g, ratio, seed) for g in graphs}
    else:
        graphs = {}
        for entry in cfg["graphs"]:
            fmt = entry.get("format", "tsv")
            g = load_graph(entry["path"], fmt, entry.get("id"))
            if fmt == "tsv":
                g = split_triples(g, ratio, seed)
            if g.graph_id in graphs:
                raise ValueError(f"duplicate graph id {g.graph_id!r}")
            graphs[g.graph_id] = g
        aligns = [load_alignment(p, graphs) for p in cfg["alignments"]]
    for a in aligns:
        check_alignment(a, graphs)
    ab = cfg["ablation"]
    if ab["sample_aligned_ratio"] < 1.0 or ab["entities_only"] or ab["relations_only"]:
        aligns = [a.sampled(ab["sample_aligned_ratio"], seed + i, entities=not ab["relations_only"],
                            relations=not ab["entities_only"]) for i, a in enumerate(aligns)]
    return graphs, aligns


def model_assignment(cfg: RunConfig, graph_ids: list[str]) -> dict[str, str]:
    models = cfg["models"]
    rng = np.random.default_rng(cfg["seeds"]["train"])
    out = {}
    for gid in graph_ids:
        choice = models.get(gid, "TransE") if isinstance(models, dict) else models
        out[gid] = MODELS[int(rng.integers(len(MODELS)))] if choice == "random" else choice
    return out


def train_config(cfg: RunConfig, model: str, dim: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(model=model, dim=dim, learning_rate=t["learning_rate"],
                       batch_size=t["batch_size"], margin=t["margin"], norm=t["norm"],
                       epochs_per_round=t["epochs_per_round"], seed=cfg["seeds"]["train"])


def pretrain(g: KnowledgeGraph, tcfg: TrainConfig, epochs: int) -> EmbeddingTable:
    return train_epochs(g, init_embeddings(g, tcfg), tcfg, epochs=epochs, seed=tcfg.seed)


def ppat_config(cfg: RunConfig) -> PpatConfig:
    p = dict(cfg["ppat"])
    return PpatConfig(simple=cfg["ablation"]["fkge_simple"], **p)


def federation_config(cfg: RunConfig) -> FederationConfig:
    f = cfg["federation"]
    threads = int(os.environ.get("FKGE_THREADS", f["threads"]))
    script = [[tuple(pair) for pair in wave] for wave in f["script"]]
    pr = cfg["privacy"]
    return FederationConfig(
        max_ticks=f["max_ticks"], patience=f["patience"], idle=f["idle"],
        wake_ticks=f["wake_ticks"], scheduler=f["scheduler"], script=script,
        seed=cfg["seeds"]["scheduler"], noise_seed=cfg["seeds"]["noise"],
        train_seed=cfg["seeds"]["train"], eval_seed=cfg["eval"]["seed"], threads=max(1, threads),
        simple=cfg["ablation"]["fkge_simple"], use_contexts=f["use_contexts"],
        lam=pr["lambda"], delta=pr["delta"], max_moment=pr["max_moment"])


# --------------------------------------------------------------------------- unified baseline

def unify(graphs: dict[str, KnowledgeGraph], aligns: list[AlignmentSet]
          ) -> tuple[KnowledgeGraph, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Merge all graphs into one, collapsing aligned entities and relations.

    Returns the merged graph and, per graph, the merged id of every local
    entity and relation.
    """
    ids = sorted(graphs)

    def union_find(kind):
        offset, base = {}, 0
        for gid in ids:
            offset[gid] = base
            base += graphs[gid].n_entities if kind == "ent" else graphs[gid].n_relations
        parent = np.arange(base)

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a in aligns:
            pairs = a.entity_pairs if kind == "ent" else a.relation_pairs
            ga, gb = a.pair
            for x, y in pairs:
                rx, ry = find(offset[ga] + x), find(offset[gb] + y)
                if rx != ry:
                    parent[max(rx, ry)] = min(rx, ry)
        roots = np.array([find(i) for i in range(base)], dtype=np.int64)
        uniq, merged = np.unique(roots, return_inverse=True)
        maps = {}
        for gid in ids:
            n = graphs[gid].n_entities if kind == "ent" else graphs[gid].n_relations
            maps[gid] = merged[offset[gid]:offset[gid] + n]
        labels = []
        for r in uniq:
            for gid in ids:
                n = graphs[gid].n_entities if kind == "ent" else graphs[gid].n_relations
                if offset[gid] <= r < offset[gid] + n:
                    src = graphs[gid].entities if kind == "ent" else graphs[gid].relations
                    labels.append(src[r - offset[gid]])
                    break
        return maps, labels

    emap, elabels = union_find("ent")
    rmap, rlabels = union_find("rel")
    triples, split = [], []
    for gid in ids:
        g = graphs[gid]
        t = g.triples
        triples.append(np.stack([emap[gid][t[:, 0]], rmap[gid][t[:, 1]], emap[gid][t[:, 2]]], 1))
        split.append(g.split)
    t = np.concatenate(triples)
    s = np.concatenate(split)
    # a triple shared by two graphs keeps its first (lowest id graph) split tag
    keys = triple_keys(t, len(elabels), len(rlabels))
    _, first = np.unique(keys, return_index=True)
    first = np.sort(first)
    merged = KnowledgeGraph("unified", elabels, rlabels, t[first], s[first])
    return merged, emap, rmap


def slice_table(tbl: EmbeddingTable, emap: np.ndarray, rmap: np.ndarray) -> EmbeddingTable:
    extras = {}
    for name, owner, _ in _EXTRAS[tbl.model]:
        extras[name] = tbl.extras[name][emap if owner == "ent" else rmap].copy()
    return EmbeddingTable(tbl.model, tbl.dim, tbl.entity[emap].copy(), tbl.relation[rmap].copy(),
                          extras, tbl.norm)


# --------------------------------------------------------------------------- run

def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _round_row(r: RoundRecord) -> dict:
    return {"tick": r.tick, "actor": r.actor, "event": r.event, "partner": r.partner,
            "score": r.score, "best_score": r.best_score, "improved": int(r.improved),
            "epsilon": r.epsilon, "virtual_triples": r.virtual_triples}


def _evaluate_all(graphs, tables, cfg: RunConfig) -> dict[str, dict[str, EvalReport]]:
    ev = cfg["eval"]
    out = {}
    for gid in sorted(graphs):
        out[gid] = {split: evaluate(graphs[gid], tables[gid], split, ev["seed"],
                                    filter_train=ev["filter_train"],
                                    type_constraint=ev["type_constraint"])
                    for split in ("valid", "test")}
    return out


def run(cfg: RunConfig, mode: str = "fkge", out: str | Path | None = None) -> list[RunResult]:
    """Run ``mode`` once per configured dimension; returns one result per dimension."""
    if mode not in ("baseline", "fkge", "unified"):
        raise ValueError(f"unknown mode {mode!r}")
    out = Path(out or cfg["output_dir"])
    graphs, aligns = prepare_data(cfg)
    dims = cfg.dims
    results = []
    for dim in dims:
        target = out if len(dims) == 1 else out / f"dim{dim}"
        results.append(_run_one(cfg, mode, target, graphs, aligns, dim))
    return results


def _run_one(cfg, mode, out: Path, graphs, aligns, dim) -> RunResult:
    t0 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    models = model_assignment(cfg, sorted(graphs))
    epochs = cfg["train"]["pretrain_epochs"]
    fed = None
    rounds: list[RoundRecord] = []
    if mode == "unified":
        merged, emap, rmap = unify(graphs, aligns)
        tcfg = train_config(cfg, models[sorted(graphs)[0]], dim)
        tbl = pretrain(merged, tcfg, epochs)
        tables = {gid: slice_table(tbl, emap[gid], rmap[gid]) for gid in graphs}
    else:
        actors = []
        for gid in sorted(graphs):
            tcfg = train_config(cfg, models[gid], dim)
            a = OwnerActor(graphs[gid], pretrain(graphs[gid], tcfg, epochs), tcfg)
            a.initialize(cfg["eval"]["seed"])
            actors.append(a)
        if mode == "fkge":
            fed = Federation(actors, aligns, ppat_config(cfg), federation_config(cfg))
            fed.run()
            rounds = fed.history
        else:
            rounds = [RoundRecord(0, a.graph_id, "initial", a.best_score, a.best_score, False)
                      for a in actors]
        tables = {a.graph_id: a.best_table for a in actors}

    reports = _evaluate_all(graphs, tables, cfg)
    (out / "rounds.csv").write_text(_csv_text(ROUND_FIELDS, [_round_row(r) for r in rounds]),
                                    encoding="utf-8")
    metric_rows = []
    for gid, by_split in reports.items():
        for split, rep in by_split.items():
            d = rep.as_dict()
            metric_rows.append({"graph": gid, "mode": mode, "dim": dim, **d})
    (out / "metrics.csv").write_text(_csv_text(METRIC_FIELDS, metric_rows), encoding="utf-8")

    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for gid, tbl in tables.items():
        with open(ckpt / f"{gid}.fke", "wb") as fh:
            write_embeddings(tbl, fh)

    privacy = {"mode": mode, "max_epsilon": None, "sessions": 0, "queries": 0}
    if fed is not None:
        led_dir = out / "ledgers"
        led_dir.mkdir(exist_ok=True)
        for i, s in enumerate(fed.sessions):
            snap = s.ledger.snapshot()
            snap.update({"session": s.tag, "client": s.client, "host": s.host,
                         "labels": s.labels_issued})
            (led_dir / f"session_{i:04d}.json").write_text(json.dumps(snap, sort_keys=True) + "\n",
                                                           encoding="utf-8")
        pr = cfg["privacy"]
        privacy.update({
            "max_epsilon": fed.max_epsilon(),
            "sessions": len(fed.sessions),
            "queries": sum(s.ledger.query_count for s in fed.sessions),
            "labels": sum(s.labels_issued for s in fed.sessions),
            "epsilon_floor": math.log(1.0 / pr["delta"]) / pr["max_moment"],
            "lambda": pr["lambda"], "delta": pr["delta"], "max_moment": pr["max_moment"],
            "ticks": fed.tick,
        })
        fed.bus.write_trace(out / "trace.jsonl")
    else:
        (out / "trace.jsonl").write_text("", encoding="utf-8")
    (out / "privacy.json").write_text(json.dumps(privacy, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    final = {"mode": mode, "dim": dim, "models": models, "wall_time": time.perf_counter() - t0,
             "reports": {gid: {s: r.as_dict() for s, r in v.items()} for gid, v in reports.items()}}
    (out / "final_reports.json").write_text(json.dumps(final, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return RunResult(mode, out, reports, tables, fed,
                     fed.max_epsilon() if fed is not None else None)


# --------------------------------------------------------------------------- report

REPORT_METRICS = ("accuracy", "hit1", "hit3", "hit10", "mean_rank")


def report(metrics_dir: str | Path, split: str = "test") -> str:
    """Summarise every run found under ``metrics_dir`` as markdown.

    Also writes ``summary.md`` and ``summary.csv`` there. Non-baseline rows
    get delta columns when a baseline run with the same dimension exists.
    """
    root = Path(metrics_dir)
    if not root.is_dir():
        raise ReportError(f"{root} is not a directory")
    runs = sorted(root.rglob("final_reports.json"))
    if not runs:
        raise ReportError(f"no runs found under {root}")
    rows, notes = [], []
    eps_by_run = {}
    baselines = {}
    loaded = []
    for path in runs:
        data = json.loads(path.read_text(encoding="utf-8"))
        run_dir = path.parent
        eps = None
        ledgers = sorted((run_dir / "ledgers").glob("*.json")) if (run_dir / "ledgers").is_dir() else []
        if ledgers:
            eps = max(json.loads(p.read_text(encoding="utf-8"))["epsilon_hat"] for p in ledgers)
        eps_by_run[str(run_dir)] = eps
        loaded.append((run_dir, data, eps))
        if data["mode"] == "baseline":
            baselines[data["dim"]] = data
    for run_dir, data, eps in loaded:
        base = baselines.get(data["dim"])
        for gid, by_split in sorted(data["reports"].items()):
            rep = by_split[split]
            row = {"run": str(run_dir.relative_to(root)) or ".", "mode": data["mode"],
                   "dim": data["dim"], "graph": gid,
                   **{m: rep[m] for m in REPORT_METRICS}, "max_epsilon": eps}
            if base is not None and data["mode"] != "baseline" and gid in base["reports"]:
                b = base["reports"][gid][split]
                for m in REPORT_METRICS:
                    row[f"delta_{m}"] = rep[m] - b[m]
            rows.append(row)
    if not baselines:
        notes.append("no baseline run found; delta columns omitted")
    has_delta = any("delta_accuracy" in r for r in rows)
    cols = ["run", "mode", "dim", "graph", *REPORT_METRICS]
    if has_delta:
        cols += [f"delta_{m}" for m in REPORT_METRICS]
    cols.append("max_epsilon")
    federated_eps = [e for e in eps_by_run.values() if e is not None]
    overall = max(federated_eps) if federated_eps else None

    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = [f"# Summary ({split} split)", "", "| " + " | ".join(cols) + " |",
             "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(cell(r.get(c)) for c in cols) + " |")
    lines.append("")
    lines.append(f"max eps_hat over all sessions: {cell(overall) or 'n/a'}")
    for n in notes:
        lines.append(f"note: {n}")
    text = "\n".join(lines) + "\n"
    (root / "summary.md").write_text(text, encoding="utf-8")
    (root / "summary.csv").write_text(_csv_text(cols, rows), encoding="utf-8")
    return text
