from .inductive import (
    InductiveFingerprintSet,
    construct_inductive_f,
    construct_inductive_l,
    construct_inductive_randomized,
    ordinary_inference_fingerprints,
)
from .transductive import Fingerprint, baseline_manc, baseline_random, generate_randomized

__all__ = [
    "Fingerprint",
    "InductiveFingerprintSet",
    "baseline_manc",
    "baseline_random",
    "construct_inductive_f",
    "construct_inductive_l",
    "construct_inductive_randomized",
    "generate_randomized",
    "ordinary_inference_fingerprints",
]
