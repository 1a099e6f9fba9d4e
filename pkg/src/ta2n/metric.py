"""Prototype construction, frame-wise cosine metric and the episode loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Var

NORM_EPS = 1e-12


@dataclass
class Prototype:
    """Per-class representative feature a query is compared against."""

    class_index: int
    feature: Array


def frame_cosine_distance(f: Var, p: Var) -> Var:
    """Sum over frames of (1 - cosine similarity) between d,T columns.

    Range [0, 2T]; scale-invariant per frame up to the tiny epsilon that
    keeps zero-norm columns defined.
    """
    if f.shape != p.shape or len(f.shape) != 2:
        raise ValueError(f"expected matching d,T arrays, got {f.shape} vs {p.shape}")
    dots = ad.reduce_sum(ad.mul(f, p), axis=0)  # (T,)
    nf = ad.affine(ad.sqrt(ad.reduce_sum(ad.mul(f, f), axis=0)), 1.0, NORM_EPS)
    np_ = ad.affine(ad.sqrt(ad.reduce_sum(ad.mul(p, p), axis=0)), 1.0, NORM_EPS)
    cos = ad.div(dots, ad.mul(nf, np_))
    return ad.reduce_sum(ad.affine(cos, -1.0, 1.0))


def frame_cosine_distance_arrays(f: Array, p: Array) -> float:
    """Forward-only twin of :func:`frame_cosine_distance` on plain arrays."""
    dots = (f * p).sum(axis=0)
    nf = np.sqrt((f * f).sum(axis=0)) + NORM_EPS
    np_ = np.sqrt((p * p).sum(axis=0)) + NORM_EPS
    return float((1.0 - dots / (nf * np_)).sum())


def build_prototype(
    features: Sequence[Array],
    class_index: int,
    rng: np.random.Generator,
    align: Callable[[Array, Array], Array] | None = None,
) -> Prototype:
    """Fuse K same-class support features into one representative.

    With a single shot the feature is the prototype. With several, one
    feature is drawn as the reference and every shot is aligned to it with
    the supplied alignment function (temporal coordination in the full
    pipeline; plain averaging when ``align`` is None), then the aligned
    features are averaged.
    """
    if len(features) == 0:
        raise ValueError("prototype needs at least one support feature")
    if len(features) == 1:
        return Prototype(class_index, np.array(features[0]))
    ref = int(rng.integers(len(features)))
    if align is None:
        stacked = np.stack(features)
    else:
        stacked = np.stack([align(features[ref], f) for f in features])
    return Prototype(class_index, stacked.mean(axis=0))


def classify(query: Var, prototypes: Sequence[Var]) -> tuple[Var, Var]:
    """Probabilities over classes from negative frame-wise cosine distances.

    Returns (probabilities, logits); logits are the negated distances, so
    the loss can be computed through a numerically settled path.
    """
    if len(prototypes) < 2:
        raise ValueError("classification needs at least two prototypes")
    distances = [frame_cosine_distance(query, p) for p in prototypes]
    logits = ad.neg(ad.stack_vec(distances))
    return ad.softmax(logits, axis=0), logits


def nll_from_probs(probs: Var, label: int) -> Var:
    """Negative log-probability of the true class for one query."""
    return ad.neg(ad.log(ad.take(probs, label)))


def cross_entropy_loss(per_query_probs: Sequence[Var], labels: Sequence[int]) -> Var:
    """Summed negative log-likelihood over an episode's query set."""
    if len(per_query_probs) != len(labels):
        raise ValueError("one label per query expected")
    total = None
    for probs, label in zip(per_query_probs, labels):
        if not 0 <= label < probs.value.shape[0]:
            raise ValueError(f"label {label} out of range")
        term = nll_from_probs(probs, label)
        total = term if total is None else ad.add(total, term)
    return total
