"""Federated knowledge graph embedding with private adversarial translation."""
from .kernels import BACKEND
from .kg import AlignmentSet, KnowledgeGraph, load_alignment, load_graph, split_triples
from .kge import EmbeddingTable, TrainConfig, init_embeddings, train_epochs
from .evaluation import EvalReport, evaluate
from .privacy import PrivacyLedger, epsilon_hat
from .ppat import PpatConfig, new_session, run_session
from .federation import Federation, FederationConfig, OwnerActor
from .synth import SynthConfig, generate_synthetic_federation

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AlignmentSet",
    "KnowledgeGraph",
    "load_alignment",
    "load_graph",
    "split_triples",
    "EmbeddingTable",
    "TrainConfig",
    "init_embeddings",
    "train_epochs",
    "EvalReport",
    "evaluate",
    "PrivacyLedger",
    "epsilon_hat",
    "PpatConfig",
    "new_session",
    "run_session",
    "Federation",
    "FederationConfig",
    "OwnerActor",
    "SynthConfig",
    "generate_synthetic_federation",
]
