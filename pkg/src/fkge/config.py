"""Run configuration: JSON in, validated dataclasses out.

Validation collects every problem before failing, each tagged with the
dotted path of the offending field.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .kge import MODELS

MODES = ("baseline", "fkge", "unified")
SAMPLE_RATIOS = (0.2, 0.4, 0.6, 0.8, 1.0)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


DEFAULTS: dict[str, Any] = {
    "graphs": [],
    "alignments": [],
    "synth": None,
    "models": "TransE",
    "dim": 100,
    "split_ratio": [90, 5, 5],
    "train": {
        "learning_rate": 0.5,
        "batch_size": 100,
        "margin": 1.0,
        "norm": 1,
        "pretrain_epochs": 1000,
        "epochs_per_round": 20,
    },
    "federation": {
        "max_ticks": 30,
        "patience": 3,
        "idle": "train",
        "wake_ticks": 2,
        "scheduler": "deterministic",
        "script": [],
        "threads": 1,
        "use_contexts": True,
    },
    "ppat": {
        "batch_size": 32,
        "teachers": 4,
        "learning_rate": 0.02,
        "momentum": 0.9,
        "hidden": 64,
        "max_epochs": 50,
        "patience": 5,
        "window": 3,
        "w_init": "orthogonal",
        "orthogonalize": 0.01,
        "refine": "aligned",
        "refine_steps": 1,
        "csls_k": 10,
    },
    "privacy": {"lambda": 0.05, "delta": 1e-5, "max_moment": 32},
    "ablation": {
        "fkge_simple": False,
        "sample_aligned_ratio": 1.0,
        "entities_only": False,
        "relations_only": False,
    },
    "seeds": {"data": 0, "train": 0, "scheduler": 0, "noise": 0},
    "eval": {"filter_train": False, "type_constraint": False, "seed": 0},
    "output_dir": "runs/out",
}


def _merge(base: dict, over: dict, path: str, problems: list[str]) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        p = f"{path}.{k}" if path else k
        if k not in base:
            problems.append(f"{p}: unknown field")
            continue
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = _merge(base[k], v, p, problems)
        else:
            out[k] = v
    return out


def _set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError([f"{dotted}: cannot override inside a non-object field"])
    cur[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    """``K=V`` with a dotted key; ``V`` is read as JSON when it parses, else as a string."""
    if "=" not in item:
        raise ConfigError([f"override {item!r}: expected KEY=VALUE"])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    key = key.strip()
    if key in ("data", "train", "scheduler", "noise"):
        key = f"seeds.{key}"
    return key, value


@dataclass
class RunConfig:
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.raw[key]

    @property
    def dims(self) -> list[int]:
        d = self.raw["dim"]
        return list(d) if isinstance(d, list) else [d]

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _check(cfg: dict) -> list[str]:
    p: list[str] = []

    def positive_int(path, v, allow_zero=False):
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if allow_zero else 1):
            p.append(f"{path}: expected a {'non-negative' if allow_zero else 'positive'} integer, got {v!r}")

    if not cfg["graphs"] and not cfg["synth"]:
        p.append("graphs: give dataset paths or a synth spec")
    for i, g in enumerate(cfg["graphs"]):
        if not isinstance(g, dict) or "path" not in g:
            p.append(f"graphs[{i}]: expected an object with a 'path'")
        elif g.get("format", "tsv") not in ("tsv", "cache"):
            p.append(f"graphs[{i}].format: must be 'tsv' or 'cache'")
    if cfg["synth"] is not None and not isinstance(cfg["synth"], dict):
        p.append("synth: expected an object (a full synthetic spec or generator keyword arguments)")
    if cfg["graphs"] and cfg["synth"]:
        p.append("synth: cannot be combined with graphs")
    if not isinstance(cfg["alignments"], list):
        p.append("alignments: expected a list of paths")

    models = cfg["models"]
    if isinstance(models, str):
        if models != "random" and models not in MODELS:
            p.append(f"models: {models!r} is not one of {MODELS} or 'random'")
    elif isinstance(models, dict):
        for k, v in models.items():
            if v != "random" and v not in MODELS:
                p.append(f"models.{k}: {v!r} is not one of {MODELS} or 'random'")
    else:
        p.append("models: expected a model name, 'random' or a per-graph mapping")

    dims = cfg["dim"] if isinstance(cfg["dim"], list) else [cfg["dim"]]
    if not dims:
        p.append("dim: empty sweep")
    for i, d in enumerate(dims):
        positive_int(f"dim[{i}]" if isinstance(cfg["dim"], list) else "dim", d)

    sr = cfg["split_ratio"]
    if not (isinstance(sr, list) and len(sr) == 3 and all(isinstance(x, (int, float)) and x >= 0 for x in sr)
            and sum(sr) > 0):
        p.append("split_ratio: expected three non-negative numbers")

    t = cfg["train"]
    if not isinstance(t["learning_rate"], (int, float)) or t["learning_rate"] <= 0:
        p.append("train.learning_rate: must be positive")
    positive_int("train.batch_size", t["batch_size"])
    if not isinstance(t["margin"], (int, float)) or t["margin"] < 0:
        p.append("train.margin: must be non-negative")
    if t["norm"] not in (1, 2):
        p.append("train.norm: must be 1 or 2")
    positive_int("train.pretrain_epochs", t["pretrain_epochs"], allow_zero=True)
    positive_int("train.epochs_per_round", t["epochs_per_round"], allow_zero=True)

    f = cfg["federation"]
    positive_int("federation.max_ticks", f["max_ticks"], allow_zero=True)
    positive_int("federation.patience", f["patience"])
    positive_int("federation.wake_ticks", f["wake_ticks"])
    positive_int("federation.threads", f["threads"])
    if f["idle"] not in ("train", "sleep"):
        p.append("federation.idle: must be 'train' or 'sleep'")
    if f["scheduler"] not in ("deterministic", "seeded", "scripted"):
        p.append("federation.scheduler: must be 'deterministic', 'seeded' or 'scripted'")
    if not isinstance(f["script"], list):
        p.append("federation.script: expected a list of waves")

    pp = cfg["ppat"]
    for k in ("batch_size", "teachers", "hidden", "patience", "window", "refine_steps", "csls_k"):
        positive_int(f"ppat.{k}", pp[k])
    positive_int("ppat.max_epochs", pp["max_epochs"], allow_zero=True)
    if not isinstance(pp["learning_rate"], (int, float)) or pp["learning_rate"] <= 0:
        p.append("ppat.learning_rate: must be positive")
    if not isinstance(pp["momentum"], (int, float)) or not 0 <= pp["momentum"] < 1:
        p.append("ppat.momentum: must lie in [0, 1)")
    if pp["w_init"] not in ("orthogonal", "identity"):
        p.append("ppat.w_init: must be 'orthogonal' or 'identity'")
    if pp["refine"] not in ("none", "aligned", "csls"):
        p.append("ppat.refine: must be 'none', 'aligned' or 'csls'")

    pr = cfg["privacy"]
    if not isinstance(pr["lambda"], (int, float)) or pr["lambda"] <= 0:
        p.append("privacy.lambda: must be positive")
    if not isinstance(pr["delta"], (int, float)) or not 0 < pr["delta"] < 1:
        p.append("privacy.delta: must lie in (0, 1)")
    positive_int("privacy.max_moment", pr["max_moment"])

    ab = cfg["ablation"]
    r = ab["sample_aligned_ratio"]
    if not isinstance(r, (int, float)) or not 0 < r <= 1:
        p.append("ablation.sample_aligned_ratio: must lie in (0, 1]")
    if ab["entities_only"] and ab["relations_only"]:
        p.append("ablation: entities_only and relations_only are mutually exclusive")

    for k, v in cfg["seeds"].items():
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            p.append(f"seeds.{k}: expected an explicit non-negative integer, got {v!r}")
    for k in ("data", "train", "scheduler", "noise"):
        if k not in cfg["seeds"]:
            p.append(f"seeds.{k}: missing")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        p.append("output_dir: expected a path")
    return p


def load_config(source: str | Path | dict, overrides: list[str] | None = None,
                base_dir: str | Path | None = None) -> RunConfig:
    """Merge ``source`` over the defaults, apply ``K=V`` overrides and validate.

    Relative dataset and alignment paths are resolved against ``base_dir``
    (the config file's directory when loading from a file).
    """
    if isinstance(source, dict):
        user = copy.deepcopy(source)
    else:
        path = Path(source)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<file>: not valid JSON ({exc})"]) from None
        base_dir = base_dir or path.parent
    if not isinstance(user, dict):
        raise ConfigError(["<root>: expected a JSON object"])
    for item in overrides or []:
        key, value = parse_override(item)
        _set_path(user, key, value)
    problems: list[str] = []
    cfg = _merge(DEFAULTS, user, "", problems)
    if not problems:
        problems = _check(cfg)
    if problems:
        raise ConfigError(problems)
    if base_dir is not None:
        base = Path(base_dir)
        for g in cfg["graphs"]:
            if not Path(g["path"]).is_absolute():
                g["path"] = str(base / g["path"])
        cfg["alignments"] = [a if Path(a).is_absolute() else str(base / a) for a in cfg["alignments"]]
    return RunConfig(cfg)
