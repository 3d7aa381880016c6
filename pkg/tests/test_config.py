import json

import pytest

from fkge.config import DEFAULTS, ConfigError, load_config, parse_override

SYNTH = {"synth": {"n_graphs": 2, "entities": 50}}


def test_defaults_fill_in():
    cfg = load_config(SYNTH)
    assert cfg["ppat"]["teachers"] == DEFAULTS["ppat"]["teachers"]
    assert cfg["privacy"] == {"lambda": 0.05, "delta": 1e-5, "max_moment": 32}
    assert cfg.dims == [100]
    assert json.loads(cfg.to_json())["models"] == "TransE"


def test_every_problem_reported_with_its_path():
    bad = {**SYNTH, "dim": 0, "train": {"norm": 3, "lr": 1},
           "ppat": {"refine": "icp"}, "privacy": {"delta": 2}, "seeds": {"data": -1}}
    with pytest.raises(ConfigError) as exc:
        load_config(bad)
    # the unknown field blocks value checks, so fix it and look again
    assert exc.value.problems == ["train.lr: unknown field"]
    del bad["train"]["lr"]
    with pytest.raises(ConfigError) as exc:
        load_config(bad)
    paths = {p.split(":")[0] for p in exc.value.problems}
    assert paths == {"dim", "train.norm", "ppat.refine", "privacy.delta", "seeds.data"}


@pytest.mark.parametrize("patch, path", [
    ({"synth": None}, "graphs"),
    ({"graphs": [{"path": "x.tsv"}]}, "synth"),
    ({"models": "RotatE"}, "models"),
    ({"models": {"g1": "Nope"}}, "models.g1"),
    ({"dim": [8, -1]}, "dim[1]"),
    ({"split_ratio": [1, 2]}, "split_ratio"),
    ({"ablation": {"sample_aligned_ratio": 0}}, "ablation.sample_aligned_ratio"),
    ({"ablation": {"entities_only": True, "relations_only": True}}, "ablation"),
    ({"federation": {"scheduler": "random"}}, "federation.scheduler"),
    ({"seeds": {"train": True}}, "seeds.train"),
    ({"ppat": {"momentum": 1}}, "ppat.momentum"),
])
def test_single_field_errors(patch, path):
    with pytest.raises(ConfigError) as exc:
        load_config({**SYNTH, **patch})
    assert any(p.startswith(path + ":") for p in exc.value.problems), exc.value.problems


def test_overrides():
    cfg = load_config(SYNTH, ["seeds.train=3", "noise=4", "ppat.refine=csls", "dim=[8,16]"])
    assert cfg["seeds"]["train"] == 3 and cfg["seeds"]["noise"] == 4
    assert cfg["ppat"]["refine"] == "csls"
    assert cfg.dims == [8, 16]
    assert parse_override("output_dir=runs/x") == ("output_dir", "runs/x")
    with pytest.raises(ConfigError):
        parse_override("nonsense")


def test_paths_resolve_against_config_file(tmp_path):
    p = tmp_path / "sub" / "c.json"
    p.parent.mkdir()
    p.write_text(json.dumps({"graphs": [{"path": "a.tsv"}], "alignments": ["al.tsv"]}))
    cfg = load_config(p)
    assert cfg["graphs"][0]["path"] == str(p.parent / "a.tsv")
    assert cfg["alignments"] == [str(p.parent / "al.tsv")]


def test_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)
    p.write_text("[1]")
    with pytest.raises(ConfigError, match="object"):
        load_config(p)
