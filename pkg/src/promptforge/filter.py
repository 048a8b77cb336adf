"""Cosine-similarity class probabilities and top-a text-feature selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Node


@dataclass
class ClassProbabilities:
    probs: Node
    logits: Node

    @property
    def values(self) -> np.ndarray:
        return self.probs.value


@dataclass
class FilteredFeatures:
    rows: Node
    indices: np.ndarray


def cosine_logits(x: Node, Z: Node, tau: float) -> Node:
    """cos(x, z_k) / tau for every row of Z."""
    if x.ndim != 1 or Z.ndim != 2 or Z.shape[1] != x.shape[0]:
        raise T.ShapeError(f"need x (d,) and Z (K, d), got {x.shape} and {Z.shape}")
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return T.scale(T.l2_normalize(Z, axis=-1) @ T.l2_normalize(x), 1.0 / tau)


def class_probabilities(x: Node, Z: Node, tau: float) -> ClassProbabilities:
    logits = cosine_logits(x, Z, tau)
    return ClassProbabilities(T.softmax(logits, axis=-1), logits)


def top_a_indices(p: np.ndarray, a: int) -> np.ndarray:
    """Indices of the a largest entries, descending; ties go to the lower index."""
    p = np.asarray(p)
    if not 1 <= a <= p.shape[0]:
        raise ValueError(f"need 1 <= a <= K, got a={a}, K={p.shape[0]}")
    return np.argsort(-p, kind="stable")[:a]


def select_top_a(p: ClassProbabilities | np.ndarray, Z: Node, a: int) -> FilteredFeatures:
    """Gather the rows of Z with the a highest probabilities.

    The choice of rows is a constant index set; gradient reaches only the
    gathered values.
    """
    values = p.values if isinstance(p, ClassProbabilities) else np.asarray(p)
    if values.shape != (Z.shape[0],):
        raise T.ShapeError(f"{values.shape[0]} probabilities for {Z.shape[0]} features")
    idx = top_a_indices(values, a)
    return FilteredFeatures(T.embedding(Z, idx), idx)
