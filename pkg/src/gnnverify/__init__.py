"""Query-based integrity verification of served GCN node classifiers."""
from .estimators import GCNClassifier, InductiveFingerprinter, TransductiveFingerprinter, check_graph
from .gcn import Model, TrainConfig, train
from .graph import Graph, GraphDelta, load_graph, make_sbm_graph, save_graph
from .verifier import VerificationReport, detection_rate, verify

__all__ = [
    "GCNClassifier",
    "Graph",
    "GraphDelta",
    "InductiveFingerprinter",
    "Model",
    "TrainConfig",
    "TransductiveFingerprinter",
    "VerificationReport",
    "check_graph",
    "detection_rate",
    "load_graph",
    "make_sbm_graph",
    "save_graph",
    "train",
    "verify",
]

__version__ = "0.1.0"
