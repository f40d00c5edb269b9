"""Similarity graphs from last-exit logits and the compactness/separability penalty."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)

DIST_EPS = 1e-12


@dataclass
class SimilarityGraphs:
    intra: np.ndarray
    inter: np.ndarray
    n_intra: int
    n_inter: int
    labels: np.ndarray


def build_graphs(logits, labels) -> SimilarityGraphs:
    """Cosine similarity of logit rows, split into same-class and cross-class pairs.

    Self-pairs are excluded. Pair counts are the sizes of the two pair sets.
    """
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=T.DTYPE)
    labels = np.asarray(labels)
    norms = np.linalg.norm(z, axis=1)
    bad = norms == 0.0
    if bad.any():
        log.warning("%d zero-norm logit rows; their similarities are set to 0", int(bad.sum()))
    safe = np.where(bad, 1.0, norms)
    unit = z / safe[:, None]
    unit[bad] = 0.0
    sim = unit @ unit.T

    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra_mask = same & off_diag
    inter_mask = ~same
    return SimilarityGraphs(
        intra=np.where(intra_mask, sim, 0.0),
        inter=np.where(inter_mask, sim, 0.0),
        n_intra=int(intra_mask.sum()),
        n_inter=int(inter_mask.sum()),
        labels=labels.copy(),
    )


def pairwise_distances(reps: Tensor) -> Tensor:
    """N x N Euclidean distances with an additive guard inside the square root."""
    reps = T.as_tensor(reps)
    n, d = reps.shape
    diff = T.reshape(reps, (n, 1, d)) - T.reshape(reps, (1, n, d))
    return T.sqrt(T.tsum(diff * diff, axis=-1) + DIST_EPS)


def _weighted(reps, weights: np.ndarray) -> Tensor:
    reps = T.as_tensor(reps)
    if reps.shape[0] != weights.shape[0]:
        raise ValueError(f"{reps.shape[0]} representations for a {weights.shape[0]}-node graph")
    return T.tsum(pairwise_distances(reps) * weights)


def compactness(reps, graphs: SimilarityGraphs) -> Tensor:
    return _weighted(reps, graphs.intra)


def separability(reps, graphs: SimilarityGraphs) -> Tensor:
    return _weighted(reps, graphs.inter)


def exit_term(reps, graphs: SimilarityGraphs) -> Tensor:
    """compactness / N_intra - separability / N_inter, zero-count terms dropped."""
    out = T.Tensor(0.0)
    if graphs.n_intra:
        out = out + compactness(reps, graphs) * (1.0 / graphs.n_intra)
    if graphs.n_inter:
        out = out - separability(reps, graphs) * (1.0 / graphs.n_inter)
    return out


def graph_penalty(early_reps, graphs: SimilarityGraphs, alpha: float) -> Tensor:
    """alpha times the summed exit terms over the early exits."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    total = T.Tensor(0.0)
    if alpha == 0 or not early_reps:
        return total
    for reps in early_reps:
        total = total + exit_term(reps, graphs)
    return total * alpha
