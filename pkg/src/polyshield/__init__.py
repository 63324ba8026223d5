"""Polynomial embedding protection with verification, inversion and linkability evaluation."""

__version__ = "0.1.0"

from .embeddings import Dataset, Embedding, SyntheticSpec, generate_synthetic, load_embeddings, save_embeddings, split
from .params import ParamPolicy, assign_params, generate_naive, generate_strict
from .transform import PolyParams, ProtectedTemplate, protect, protected_dim

__all__ = [
    "Dataset", "Embedding", "SyntheticSpec", "generate_synthetic", "load_embeddings", "save_embeddings", "split",
    "ParamPolicy", "assign_params", "generate_naive", "generate_strict",
    "PolyParams", "ProtectedTemplate", "protect", "protected_dim",
]
