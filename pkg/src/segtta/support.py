"""Support memory: pooled class vectors from annotated images plus text features.

Persistent vector state (entries, per-class accumulators, text rows, fused
vectors) is kept in float32 to match the on-disk formats exactly; all
arithmetic runs in float64 and rounds once on storage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DimensionMismatch,
    NoVisualSupport,
    ShapeMismatch,
    ValidationError,
)
from .numerics import DenseFeatureMap, LabelMask, PatchLabelMatrix, downsample_labels, unit

# interpolation mixes between text (lam=1) and pooled visual (lam=0) features
DEFAULT_LAMBDAS: tuple[float, ...] = (0.9, 0.8, 0.6, 0.4, 0.2, 0.0)

UNIT_TOL = 1e-4


@dataclass(frozen=True)
class TextBank:
    """Per-class text embeddings; absent classes have no usable row.

    materialized means absent rows were filled in (substitute_missing_text),
    so every row can be consumed downstream.
    """

    features: np.ndarray  # (C, d) float32
    present: np.ndarray   # (C,) bool
    class_names: tuple = ()
    materialized: bool = False

    def __post_init__(self):
        if self.features.ndim != 2 or self.present.shape != (self.features.shape[0],):
            raise ShapeMismatch("text bank features (C, d) with (C,) presence flags")
        if self.present.any():
            norms = np.linalg.norm(
                np.asarray(self.features, dtype=np.float64)[self.present], axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise ValidationError("present text rows must be unit-norm")

    @property
    def num_classes(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def fallback(self) -> bool:
        """True when no class has a real text feature."""
        return not bool(self.present.any())

    @property
    def usable(self) -> bool:
        return self.materialized or bool(self.present.all())


def substitute_missing_text(bank: TextBank) -> TextBank:
    """Fill absent text rows with the normalized mean of the present rows.

    All rows present: returned unchanged (just marked materialized). No rows
    present: marked materialized with the fallback flag left standing; callers
    then skip every text-dependent path.
    """
    if bank.present.all() or bank.fallback:
        return replace(bank, materialized=True)
    feats = np.asarray(bank.features, dtype=np.float64)
    mean = unit(feats[bank.present].mean(axis=0))
    out = np.array(bank.features, dtype=np.float32, copy=True)
    out[~bank.present] = mean.astype(np.float32)
    return TextBank(out, bank.present.copy(), bank.class_names, materialized=True)


@dataclass(frozen=True)
class SupportEntry:
    """One pooled per-image class vector."""

    vector: np.ndarray  # (d,) float32, unit norm
    class_id: int
    image_id: int       # 64-bit content hash of the source image id
    entry_id: int


def image_id_hash(image_id) -> int:
    """Map an image identifier (int or str) to an unsigned 64-bit int."""
    if isinstance(image_id, (int, np.integer)):
        return int(image_id) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(image_id).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class SupportStore:
    """Accumulated support vectors plus derived per-class state.

    class_accumulators[c] is the float32 running sum of entry vectors for c;
    fused maps class_id -> (len(lambdas), d) float32 interpolated vectors and
    is kept consistent with the accumulators and the attached text bank.
    """

    num_classes: int
    dim: int
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    entries: list = field(default_factory=list)
    class_accumulators: np.ndarray = None
    class_counts: np.ndarray = None
    text: TextBank | None = None
    fused: dict = field(default_factory=dict)
    next_entry_id: int = 0

    def __post_init__(self):
        if self.class_accumulators is None:
            self.class_accumulators = np.zeros((self.num_classes, self.dim), np.float32)
        if self.class_counts is None:
            self.class_counts = np.zeros(self.num_classes, np.int64)

    @classmethod
    def empty(cls, num_classes: int, dim: int,
              lambdas: tuple[float, ...] = DEFAULT_LAMBDAS,
              text: TextBank | None = None) -> "SupportStore":
        store = cls(num_classes=num_classes, dim=dim, lambdas=tuple(lambdas))
        if text is not None:
            attach_text(store, text)
        return store

    @property
    def size(self) -> int:
        return len(self.entries)

    def entry_matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries]).astype(np.float64)

    def visually_supported(self) -> list[int]:
        return [c for c in range(self.num_classes) if self.class_counts[c] > 0]


def effective_lambdas(store: SupportStore) -> tuple[float, ...]:
    """Interpolation grid in effect; collapses to pure-visual (0.0,) when the
    attached text bank has no real rows."""
    if store.text is not None and store.text.fallback:
        return (0.0,)
    return store.lambdas


def pool_image_class_features(x: DenseFeatureMap,
                              p: PatchLabelMatrix) -> list[tuple[int, np.ndarray]]:
    """Assignment-weighted pooling of patch features into per-class vectors.

    Returns (class_id, unit float64 vector) for every class with positive
    mass in p, ordered by class id.
    """
    x = x.normalized()
    if p.data.shape[0] != x.n:
        raise ShapeMismatch("assignment rows != patch count")
    pooled = np.asarray(p.data, dtype=np.float64).T @ x.data  # (C, d)
    mass = p.data.sum(axis=0)
    return [(int(c), unit(pooled[c])) for c in np.nonzero(mass > 0)[0]]


def add_support_image(store: SupportStore, x: DenseFeatureMap, mask: LabelMask,
                      image_id) -> SupportStore:
    """Pool one annotated image into the store; updates accumulators, counts,
    and the fused vectors of the touched classes."""
    if x.dim != store.dim:
        raise DimensionMismatch(f"features d={x.dim}, store d={store.dim}")
    if mask.num_classes != store.num_classes:
        raise ValidationError("mask class space != store class space")
    if mask.shape != (x.image_h, x.image_w):
        raise ShapeMismatch("mask resolution != feature map image resolution")

    p = downsample_labels(mask, x.grid_h, x.grid_w)
    iid = image_id_hash(image_id)
    touched = []
    for class_id, vec in pool_image_class_features(x, p):
        v32 = vec.astype(np.float32)
        store.entries.append(SupportEntry(v32, class_id, iid, store.next_entry_id))
        store.next_entry_id += 1
        acc = store.class_accumulators[class_id].astype(np.float64)
        store.class_accumulators[class_id] = (acc + v32.astype(np.float64)).astype(np.float32)
        store.class_counts[class_id] += 1
        touched.append(class_id)
    _refresh_fused(store, touched)
    return store


def aggregate_class_feature(store: SupportStore, class_id: int) -> np.ndarray:
    """Normalized sum of all pooled vectors of one class (float64 unit)."""
    if not 0 <= class_id < store.num_classes:
        raise ValidationError(f"class {class_id} outside [0, {store.num_classes})")
    if store.class_counts[class_id] == 0:
        raise NoVisualSupport(f"class {class_id} has no support entries")
    return unit(store.class_accumulators[class_id].astype(np.float64))


def fuse(t: np.ndarray, v: np.ndarray, lam: float) -> np.ndarray:
    """Normalized interpolation lam*t + (1-lam)*v of two unit vectors.

    Endpoints short-circuit, so the unused operand is never validated; that
    lets a fallback (all-absent) text bank run the lam=0 grid.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda {lam} outside [0, 1]")
    if lam == 1.0:
        return _checked_unit_copy(t)
    if lam == 0.0:
        return _checked_unit_copy(v)
    t = _checked_unit_copy(t)
    v = _checked_unit_copy(v)
    return unit(lam * t + (1.0 - lam) * v)


def _checked_unit_copy(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValidationError(f"expected unit vector, norm {n}")
    return v.copy()


def _refresh_fused(store: SupportStore, class_ids) -> None:
    if store.text is None:
        return
    lams = effective_lambdas(store)
    for c in class_ids:
        if store.class_counts[c] == 0:
            continue
        v = aggregate_class_feature(store, c)
        t = store.text.features[c].astype(np.float64)
        rows = [fuse(t, v, lam).astype(np.float32) for lam in lams]
        store.fused[c] = np.stack(rows)


def attach_text(store: SupportStore, bank: TextBank) -> SupportStore:
    """Bind a text bank to the store and (re)build all fused vectors."""
    if bank.num_classes != store.num_classes or bank.dim != store.dim:
        raise DimensionMismatch("text bank shape != store shape")
    if not bank.usable:
        raise ValidationError("text bank has unmaterialized absent rows")
    store.text = bank
    store.fused = {}
    _refresh_fused(store, store.visually_supported())
    return store


def build_fused_set(store: SupportStore) -> list[tuple[int, float, np.ndarray]]:
    """Ordered (class_id, lambda, float32 unit vector) triples: class ids
    ascending, lambdas in grid order. Exactly len(grid) per supported class."""
    if store.text is None:
        raise ValidationError("no text bank attached")
    lams = effective_lambdas(store)
    out = []
    for c in store.visually_supported():
        rows = store.fused[c]
        for i, lam in enumerate(lams):
            out.append((c, lam, rows[i]))
    return out
