"""Grid and matrix primitives shared by the whole pipeline.

Conventions: patch grids are row-major (n = grid_h * grid_w rows), class
probability matrices are (n, C) and row-stochastic, label masks are (H, W)
integer arrays with 65535 reserved as the ignore value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, NearZeroRow, ShapeMismatch, ValidationError

IGNORE_INDEX = 65535

NORM_EPS = 1e-12


@dataclass(frozen=True)
class DenseFeatureMap:
    """Patch features for one image: (n, d) rows over an h x w grid.

    image_h / image_w record the pixel resolution the grid was extracted
    from; they drive mask downsampling and probability upsampling.
    """

    data: np.ndarray
    grid_h: int
    grid_w: int
    image_h: int
    image_w: int
    row_normalized: bool = False

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatch(f"feature data must be 2-d, got {self.data.ndim}-d")
        if self.data.shape[0] != self.grid_h * self.grid_w:
            raise ShapeMismatch(
                f"{self.data.shape[0]} rows != grid {self.grid_h}x{self.grid_w}"
            )
        if self.grid_h > self.image_h or self.grid_w > self.image_w:
            raise ShapeMismatch("patch grid larger than image")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def normalized(self) -> "DenseFeatureMap":
        if self.row_normalized:
            return self
        return DenseFeatureMap(
            l2_normalize_rows(np.asarray(self.data, dtype=np.float64)),
            self.grid_h, self.grid_w, self.image_h, self.image_w,
            row_normalized=True,
        )


@dataclass(frozen=True)
class LabelMask:
    """(H, W) integer class map; ignore_index marks unlabeled pixels."""

    data: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-d, got {self.data.ndim}-d")
        vals = self.data[self.data != self.ignore_index]
        if vals.size and (int(vals.min()) < 0 or int(vals.max()) >= self.num_classes):
            raise ValidationError(
                f"mask labels outside [0, {self.num_classes}) and not ignore"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PatchLabelMatrix:
    """(n, C) soft assignment of patches to classes; columns sum to 1 or 0."""

    data: np.ndarray
    grid_h: int
    grid_w: int


@dataclass(frozen=True)
class ProbMap:
    """(n, C) row-stochastic class probabilities on a patch grid."""

    data: np.ndarray
    grid_h: int
    grid_w: int

    @property
    def num_classes(self) -> int:
        return self.data.shape[1]


def l2_normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale each row to unit L2 norm. Raises NearZeroRow below eps."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch("l2_normalize_rows expects a matrix")
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < eps):
        raise NearZeroRow(f"row norm below {eps}")
    return m / norms[:, None]


def unit(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Unit-normalize one vector."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < eps:
        raise NearZeroRow(f"vector norm {n} below {eps}")
    return v / n


def softmax(scores: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stabilized by max subtraction."""
    if tau <= 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    z = np.asarray(scores, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _cell_index(n_pixels: int, n_cells: int) -> np.ndarray:
    # pixel y falls in cell floor(y * h / H); exact in integer arithmetic
    return (np.arange(n_pixels, dtype=np.int64) * n_cells) // n_pixels


def downsample_labels(mask: LabelMask, grid_h: int, grid_w: int) -> PatchLabelMatrix:
    """Area-fraction downsampling of a pixel mask onto a patch grid.

    Each cell gets the fraction of its pixels carrying each class (ignore
    pixels contribute no mass), then every class column is L1-normalized so
    a class distributes one unit of weight across the grid.
    """
    H, W = mask.shape
    if grid_h > H or grid_w > W or grid_h <= 0 or grid_w <= 0:
        raise ShapeMismatch(f"grid {grid_h}x{grid_w} invalid for mask {H}x{W}")
    valid = mask.data != mask.ignore_index
    if not valid.any():
        raise EmptyMask("mask is entirely ignore")

    C = mask.num_classes
    n = grid_h * grid_w
    cell = _cell_index(H, grid_h)[:, None] * grid_w + _cell_index(W, grid_w)[None, :]
    flat_cell = cell[valid]
    flat_lbl = mask.data[valid].astype(np.int64)
    counts = np.bincount(flat_cell * C + flat_lbl, minlength=n * C).astype(np.float64)
    counts = counts.reshape(n, C)
    cell_sizes = np.bincount(cell.ravel(), minlength=n).astype(np.float64)
    frac = counts / cell_sizes[:, None]

    colsum = frac.sum(axis=0)
    nz = colsum > 0
    frac[:, nz] /= colsum[nz]
    return PatchLabelMatrix(frac, grid_h, grid_w)


def _linear_resample_weights(n_src: int, n_dst: int):
    """Source index pairs and blend weights for 1-d bilinear resampling.

    Destination samples sit at pixel centers; source coordinates outside the
    grid clamp to the border (both neighbor indices collapse there, so any
    convex weight reproduces the edge value).
    """
    s = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    i0 = np.floor(s).astype(np.int64)
    w1 = s - i0
    lo = np.clip(i0, 0, n_src - 1)
    hi = np.clip(i0 + 1, 0, n_src - 1)
    return lo, hi, w1


def upsample_probs(p: ProbMap, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear upsampling of patch probabilities to (out_h, out_w, C).

    Separable, pixel-center aligned. Convex per-pixel blending keeps every
    output row a probability distribution.
    """
    if out_h <= 0 or out_w <= 0:
        raise ShapeMismatch("output size must be positive")
    grid = np.asarray(p.data, dtype=np.float64).reshape(p.grid_h, p.grid_w, -1)

    lo, hi, w = _linear_resample_weights(p.grid_h, out_h)
    grid = grid[lo] * (1.0 - w)[:, None, None] + grid[hi] * w[:, None, None]
    lo, hi, w = _linear_resample_weights(p.grid_w, out_w)
    grid = grid[:, lo] * (1.0 - w)[None, :, None] + grid[:, hi] * w[None, :, None]
    return grid


def argmax_map(grid: np.ndarray, num_classes: int | None = None) -> LabelMask:
    """Per-pixel argmax of an (H, W, C) probability volume; ties -> lowest id."""
    if grid.ndim != 3:
        raise ShapeMismatch("expected (H, W, C) volume")
    labels = np.argmax(grid, axis=-1).astype(np.int64)
    return LabelMask(labels, num_classes=num_classes or grid.shape[-1])
