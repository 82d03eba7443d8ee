"""Samplers for the experimental distributions and acceptance metrics.

Four families: an isotropic Gaussian in any dimension and three 2-D toy
sets (concentric circles, checkerboard, moons). Metrics: unbiased
moments with an optional paired joint covariance, the energy distance
two-sample statistic, and a label-crossing rate for radially separated
modes. Everything is deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError

_KINDS = ("gaussian", "two_circles", "checkerboard", "moons")

# O(N^2) statistics subsample down to this many points, seeded.
PAIRWISE_CAP = 5000


@dataclass(frozen=True)
class SampleBatch:
    """Points (N, d) with optional integer mode labels per point."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        points = np.ascontiguousarray(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 1:
            raise InvalidArgumentError("points must be a nonempty (N, d) array")
        if not np.all(np.isfinite(points)):
            raise InvalidArgumentError("points must be finite")
        points.flags.writeable = False
        object.__setattr__(self, "points", points)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if labels.shape != (points.shape[0],):
                raise InvalidArgumentError("labels must have one entry per point")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])


@dataclass(frozen=True)
class DatasetSpec:
    """Which distribution to draw, how many points, and with which seed."""

    kind: str
    count: int
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidArgumentError(
                f"unknown dataset kind {self.kind!r}; expected one of {_KINDS}"
            )
        if self.count < 1:
            raise InvalidArgumentError("count must be >= 1")
        if self.kind == "two_circles":
            r_inner = self.params.get("r_inner", 1.0)
            r_outer = self.params.get("r_outer", 2.0)
            if not 0 < r_inner < r_outer:
                raise InvalidArgumentError("need 0 < r_inner < r_outer")
        if self.params.get("jitter", 0.0) < 0:
            raise InvalidArgumentError("jitter must be nonnegative")


def sample_dataset(spec: DatasetSpec) -> SampleBatch:
    """Draw one batch; labels are populated for the multi-mode kinds."""
    gen = np.random.default_rng(spec.seed)
    n = spec.count
    p = spec.params
    if spec.kind == "gaussian":
        dim = int(p.get("dim", 1))
        if dim < 1:
            raise InvalidArgumentError("gaussian dim must be >= 1")
        return SampleBatch(points=gen.standard_normal((n, dim)))
    if spec.kind == "two_circles":
        r_inner = float(p.get("r_inner", 1.0))
        r_outer = float(p.get("r_outer", 2.0))
        jitter = float(p.get("jitter", 0.0))
        labels = gen.integers(0, 2, size=n)
        radius = np.where(labels == 1, r_outer, r_inner)
        theta = gen.uniform(0.0, 2.0 * np.pi, size=n)
        points = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if jitter > 0:
            points = points + jitter * gen.standard_normal((n, 2))
        return SampleBatch(points=points, labels=labels)
    if spec.kind == "checkerboard":
        cells = int(p.get("cells", 4))
        extent = float(p.get("extent", 2.0))
        if cells < 1 or extent <= 0:
            raise InvalidArgumentError("need cells >= 1 and extent > 0")
        width = 2.0 * extent / cells
        on_cells = [(i, j) for i in range(cells) for j in range(cells) if (i + j) % 2 == 0]
        labels = gen.integers(0, len(on_cells), size=n)
        corners = np.array([on_cells[k] for k in labels], dtype=np.float64)
        points = -extent + (corners + gen.uniform(0.0, 1.0, size=(n, 2))) * width
        return SampleBatch(points=points, labels=labels)
    if spec.kind == "moons":
        jitter = float(p.get("jitter", 0.0))
        labels = gen.integers(0, 2, size=n)
        theta = gen.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        points = np.where(labels[:, None] == 1, lower, upper)
        if jitter > 0:
            points = points + jitter * gen.standard_normal((n, 2))
        return SampleBatch(points=points, labels=labels)
    raise InvalidArgumentError(f"unknown dataset kind {spec.kind!r}")


def empirical_moments(batch: SampleBatch, paired_batch: SampleBatch | None = None):
    """Unbiased mean/variance, plus the paired joint covariance if given.

    The joint covariance pairs row j of ``batch`` with row j of
    ``paired_batch`` and averages cov(X0_k, X1_k) over coordinates k.
    """
    x = batch.points
    n = x.shape[0]
    if n < 2:
        raise InvalidArgumentError("need at least two samples for moments")
    mean = x.mean(axis=0)
    variance = x.var(axis=0, ddof=1)
    if paired_batch is None:
        return mean, variance, None
    y = paired_batch.points
    if y.shape != x.shape:
        raise InvalidArgumentError("paired batch must match shape and alignment")
    cov_per_coord = ((x - mean) * (y - y.mean(axis=0))).sum(axis=0) / (n - 1)
    return mean, variance, float(cov_per_coord.mean())


def _subsample(points: np.ndarray, seed: int) -> np.ndarray:
    if points.shape[0] <= PAIRWISE_CAP:
        return points
    gen = np.random.default_rng(seed)
    idx = gen.choice(points.shape[0], size=PAIRWISE_CAP, replace=False)
    return points[np.sort(idx)]


def energy_distance(a: SampleBatch, b: SampleBatch, seed: int = 0) -> float:
    """2 E|A-B| - E|A-A'| - E|B-B'| over (subsampled) point pairs.

    V-statistic form, so identical batches give exactly zero. Batches
    larger than the pairwise cap are subsampled with the given seed.
    """
    if a.dim != b.dim:
        raise InvalidArgumentError(f"dimension mismatch: {a.dim} vs {b.dim}")
    xs = _subsample(a.points, seed)
    ys = _subsample(b.points, seed + 1)
    cross = cdist(xs, ys).mean()
    within_a = cdist(xs, xs).mean()
    within_b = cdist(ys, ys).mean()
    return float(2.0 * cross - within_a - within_b)


def mixing_rate(initial: SampleBatch, terminal: SampleBatch) -> float:
    """Fraction of points whose terminal mode differs from their initial one.

    Modes are radial: each label's reference radius is the mean norm of
    its initial points, and a terminal point is assigned the label with
    the nearest reference radius. Suited to the concentric-circles
    experiment; invariant under consistent relabeling.
    """
    if initial.labels is None:
        raise InvalidArgumentError("initial batch must carry mode labels")
    if terminal.points.shape != initial.points.shape:
        raise InvalidArgumentError("terminal batch must align with the initial batch")
    labels = np.unique(initial.labels)
    if labels.size < 2:
        return 0.0
    radii_init = np.linalg.norm(initial.points, axis=1)
    mode_radius = np.array([radii_init[initial.labels == ell].mean() for ell in labels])
    radii_term = np.linalg.norm(terminal.points, axis=1)
    nearest = labels[np.argmin(np.abs(radii_term[:, None] - mode_radius[None, :]), axis=1)]
    return float(np.mean(nearest != initial.labels))
