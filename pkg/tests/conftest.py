import numpy as np
import pytest

from fkge.kg import KnowledgeGraph, read_triples, split_triples
from fkge.synth import default_federation_config, generate_synthetic_federation

TOY_TSV = """\
# toy graph
alice\tknows\tbob
bob\tknows\tcarol
carol\tlikes\talice
alice\tlikes\tdave
dave\tknows\terin
erin\tlikes\tbob
bob\tworks_with\tdave
carol\tworks_with\terin
"""


@pytest.fixture
def toy_graph() -> KnowledgeGraph:
    return read_triples(TOY_TSV.splitlines(keepends=True), "toy")


def random_graph(n_ent: int, n_rel: int, n_triples: int, seed: int, graph_id: str = "r") -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < n_triples:
        seen.add((int(rng.integers(n_ent)), int(rng.integers(n_rel)), int(rng.integers(n_ent))))
    t = np.array(sorted(seen), dtype=np.int64)
    return KnowledgeGraph(graph_id, [f"e{i}" for i in range(n_ent)], [f"r{i}" for i in range(n_rel)], t)


@pytest.fixture(scope="session")
def small_federation():
    """Three split 200-entity graphs with pairwise aligned blocks."""
    spec = default_federation_config(3, 200, 0.2, relations=6, relation_overlap=3)
    graphs, aligns = generate_synthetic_federation(spec, seed=1)
    return [split_triples(g, seed=1) for g in graphs], aligns


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
