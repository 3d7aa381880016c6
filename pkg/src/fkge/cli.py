"""Command-line entry point: ``fkge run``, ``fkge report`` and ``fkge synth``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import MODES, ConfigError, load_config


def _cmd_run(args) -> int:
    from .runner import run

    cfg = load_config(args.config, args.seed_override)
    out = args.out or cfg["output_dir"]
    results = run(cfg, args.mode, out)
    for res in results:
        eps = res.max_epsilon
        print(f"{res.mode} run written to {res.out}"
              + (f" (max eps_hat {eps:.4f})" if eps is not None else ""))
        for gid, by_split in res.reports.items():
            t = by_split["test"]
            print(f"  {gid}: test acc {t.accuracy:.4f}  hit@10 {t.hit10:.4f}  MR {t.mean_rank:.1f}")
    return 0


def _cmd_report(args) -> int:
    from .runner import ReportError, report

    try:
        print(report(args.dir, args.split), end="")
    except ReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _cmd_synth(args) -> int:
    from .kg import write_alignment, write_triples
    from .synth import SynthConfig, default_federation_config, generate_synthetic_federation

    spec = (json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec
            else default_federation_config(args.graphs, args.entities, args.overlap))
    graphs, aligns = generate_synthetic_federation(SynthConfig.from_dict(spec), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {g.graph_id: g for g in graphs}
    entries, align_files = [], []
    for g in graphs:
        write_triples(g, out / f"{g.graph_id}.tsv")
        entries.append({"id": g.graph_id, "path": f"{g.graph_id}.tsv"})
    for a in aligns:
        name = f"align_{a.pair[0]}_{a.pair[1]}.tsv"
        write_alignment(a, by_id, out / name)
        align_files.append(name)
    config = {"graphs": entries, "alignments": align_files, "seeds": {
        "data": args.seed, "train": args.seed, "scheduler": args.seed, "noise": args.seed}}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(graphs)} graphs and {len(aligns)} alignments to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fkge", description="Federated knowledge graph embedding simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--mode", choices=MODES, default="fkge")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed-override", action="append", default=[], metavar="K=V",
                   help="override a config field, e.g. seeds.train=3 (repeatable)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="summarise run directories")
    p.add_argument("dir")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("synth", help="write a synthetic federation as TSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON synthetic spec (default: all-pairs federation)")
    p.add_argument("--graphs", type=int, default=3)
    p.add_argument("--entities", type=int, default=2000)
    p.add_argument("--overlap", type=float, default=0.1)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
