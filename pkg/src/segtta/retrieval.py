"""Nearest-neighbor retrieval from the support store and class relevance weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyStore, ValidationError
from .numerics import DenseFeatureMap, softmax
from .support import SupportEntry, SupportStore, TextBank


@dataclass(frozen=True)
class RetrievedSet:
    """Union of per-patch neighbor sets, deduplicated by entry id."""

    entries: tuple          # SupportEntry, ascending entry_id
    classes: tuple          # distinct class ids, ascending

    def __len__(self) -> int:
        return len(self.entries)


def knn(query: np.ndarray, store: SupportStore, k: int) -> list[SupportEntry]:
    """k most cosine-similar entries to one unit query vector.

    Ties break toward the smaller entry_id; returns min(k, size) entries.
    """
    if store.size == 0:
        raise EmptyStore("support store has no entries")
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (store.dim,):
        raise DimensionMismatch(f"query shape {q.shape}, store d={store.dim}")
    sims = store.entry_matrix() @ q
    ids = np.array([e.entry_id for e in store.entries], dtype=np.int64)
    order = np.lexsort((ids, -sims))
    return [store.entries[i] for i in order[: min(k, store.size)]]


def retrieve_for_image(x: DenseFeatureMap, store: SupportStore, k: int) -> RetrievedSet:
    """Union of the k nearest support entries of every patch of x."""
    if store.size == 0:
        raise EmptyStore("support store has no entries")
    if k <= 0:
        raise ValidationError(f"k must be positive, got {k}")
    x = x.normalized()
    if x.dim != store.dim:
        raise DimensionMismatch(f"features d={x.dim}, store d={store.dim}")

    if k >= store.size:
        picked = set(range(store.size))
    else:
        sims = x.data @ store.entry_matrix().T  # (n, M)
        ids = np.array([e.entry_id for e in store.entries], dtype=np.int64)
        picked = set()
        for row in sims:
            order = np.lexsort((ids, -row))
            picked.update(order[:k].tolist())

    entries = sorted((store.entries[i] for i in picked), key=lambda e: e.entry_id)
    classes = tuple(sorted({e.class_id for e in entries}))
    return RetrievedSet(tuple(entries), classes)


def global_average_feature(x: DenseFeatureMap) -> np.ndarray:
    """Plain mean of the (unit) patch features; deliberately not re-normalized."""
    return np.asarray(x.normalized().data, dtype=np.float64).mean(axis=0)


def class_relevance_weights(x: DenseFeatureMap, bank: TextBank, tau: float) -> np.ndarray:
    """Softmax over text-vs-image-mean similarities; uniform 1.0 weights when
    the bank has no real rows."""
    if bank.fallback:
        return np.ones(bank.num_classes, dtype=np.float64)
    if not bank.usable:
        raise ValidationError("text bank has unmaterialized absent rows")
    if bank.dim != x.dim:
        raise DimensionMismatch(f"features d={x.dim}, text d={bank.dim}")
    g = global_average_feature(x)
    scores = np.asarray(bank.features, dtype=np.float64) @ g
    return softmax(scores, tau)
