"""
Binary patch features over images of Hermitian matrices.

A feature picks one or two regions around the query pixel, reduces each
region to the pixel with maximal span, measures the log-Euclidean distance
between the two picks (or between one pick and a fixed reference matrix) and
thresholds it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError
from .polsar import FROBENIUS_WEIGHTS, PolSarImage, pack

ONE_POINT = "one"
TWO_POINT = "two"

THRESHOLD_SUBSAMPLE = 1000


@dataclass(frozen=True)
class RegionSpec:
    """Polar offset ``(r, alpha)`` from the patch centre plus region side ``s``."""

    r: float
    alpha: float  # degrees
    s: int

    def offset(self) -> tuple[int, int]:
        a = math.radians(self.alpha)
        return int(np.rint(self.r * math.cos(a))), int(np.rint(self.r * math.sin(a)))


@dataclass(frozen=True)
class FeatureConfig:
    r_max: float = 25.0
    s_max: int = 9
    one_point_prob: float = 0.5

    def __post_init__(self):
        if not self.r_max >= 0:
            raise DomainError("r_max must be non-negative")
        if self.s_max < 1:
            raise DomainError("s_max must be >= 1")
        if not 0.0 <= self.one_point_prob <= 1.0:
            raise DomainError("one_point_prob must lie in [0, 1]")


@dataclass(frozen=True)
class BinaryFeature:
    """One thresholded projection.

    ``ref_log`` is the packed (9 reals) matrix logarithm of the reference
    pixel for one-point features and ``None`` for two-point features, where
    ``region2`` is set instead.
    """

    kind: str
    region1: RegionSpec
    delta: float
    region2: RegionSpec | None = None
    ref_log: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind == ONE_POINT:
            if self.ref_log is None or self.region2 is not None:
                raise DomainError("one-point feature needs ref_log and no region2")
            if len(self.ref_log) != 9:
                raise DomainError("ref_log must hold 9 packed reals")
        elif self.kind == TWO_POINT:
            if self.region2 is None or self.ref_log is not None:
                raise DomainError("two-point feature needs region2 and no ref_log")
        else:
            raise DomainError(f"unknown feature kind {self.kind!r}")
        if math.isnan(self.delta):
            raise DomainError("delta must not be NaN")

    @property
    def projection_key(self) -> tuple:
        """Everything except the threshold; equal keys give equal projections."""
        return (self.kind, self.region1, self.region2, self.ref_log)

    def with_delta(self, delta: float) -> "BinaryFeature":
        return replace(self, delta=float(delta))


@dataclass(frozen=True)
class SampleSet:
    """Labelled pixel positions; ``labels`` are class indices in 1..L."""

    ys: np.ndarray
    xs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (len(self.ys) == len(self.xs) == len(self.labels)):
            raise DomainError("sample coordinate and label arrays differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SampleSet":
        return SampleSet(self.ys[idx], self.xs[idx], self.labels[idx])


def region_anchor(center, spec: RegionSpec, shape) -> tuple[int, int]:
    """``center + round(r cos a, r sin a)`` clamped to an ``(H, W)`` image.

    Coordinates are ``(x, y)`` with x the column.
    """
    x, y = center
    dx, dy = spec.offset()
    H, W = shape
    return min(max(x + dx, 0), W - 1), min(max(y + dy, 0), H - 1)


def region_representative(img: PolSarImage, anchor, s: int) -> int:
    """Flat index of the max-span pixel of the ``s x s`` window at ``anchor``."""
    x, y = anchor
    return int(img.representative_map(s)[y, x])


def _representatives(img: PolSarImage, spec: RegionSpec, ys, xs) -> np.ndarray:
    dx, dy = spec.offset()
    H, W = img.shape
    ay = np.clip(ys + dy, 0, H - 1)
    ax = np.clip(xs + dx, 0, W - 1)
    return img.representative_map(spec.s).ravel().take(ay * W + ax)


def project_many(feature: BinaryFeature, img: PolSarImage, ys, xs) -> np.ndarray:
    """Projection values for many centre pixels at once."""
    ys = np.asarray(ys, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    d = img.log_vec.take(_representatives(img, feature.region1, ys, xs), axis=0)
    if feature.kind == ONE_POINT:
        d -= np.asarray(feature.ref_log) * FROBENIUS_WEIGHTS
    else:
        d -= img.log_vec.take(_representatives(img, feature.region2, ys, xs), axis=0)
    d *= d
    # fixed summation order, so a pixel's value never depends on the batch size
    acc = d[:, 0] + d[:, 1]
    for j in range(2, 9):
        acc += d[:, j]
    return np.sqrt(acc)


def project(feature: BinaryFeature, img: PolSarImage, center) -> float:
    """Log-Euclidean distance between the feature's two region picks.

    ``center`` is ``(x, y)``. Shares the batched code path so single-pixel
    and whole-image evaluation agree bit for bit.
    """
    x, y = center
    return float(project_many(feature, img, np.array([y]), np.array([x]))[0])


def eval_feature(feature: BinaryFeature, img: PolSarImage, center) -> int:
    return int(project(feature, img, center) >= feature.delta)


def eval_many(feature: BinaryFeature, img: PolSarImage, ys, xs) -> np.ndarray:
    return (project_many(feature, img, ys, xs) >= feature.delta).astype(np.uint8)


def _sample_region(rng: np.random.Generator, cfg: FeatureConfig) -> RegionSpec:
    s = int(rng.integers(1, cfg.s_max + 1))
    alpha = float(rng.uniform(0.0, 360.0))
    r = float(rng.uniform(0.0, cfg.r_max))
    return RegionSpec(r=r, alpha=alpha, s=s)


def sample_threshold(rng: np.random.Generator, feature: BinaryFeature,
                     img: PolSarImage, samples: SampleSet) -> float:
    """Draw a threshold uniformly between the min and max projection value.

    The range is estimated on ``min(1000, len(samples))`` training samples
    drawn without replacement.
    """
    n = len(samples)
    if n == 0:
        raise DomainError("threshold estimation needs at least one sample")
    k = min(THRESHOLD_SUBSAMPLE, n)
    idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
    vals = project_many(feature, img, samples.ys[idx], samples.xs[idx])
    return float(rng.uniform(vals.min(), vals.max()))


def sample_feature(rng: np.random.Generator, cfg: FeatureConfig, img: PolSarImage,
                   samples: SampleSet) -> BinaryFeature:
    """Draw a random feature with a data-driven threshold."""
    if len(samples) == 0:
        raise DomainError("cannot sample a feature without training samples")
    one_point = rng.random() < cfg.one_point_prob
    region1 = _sample_region(rng, cfg)
    if one_point:
        i = int(rng.integers(len(samples)))
        ref = img.log_cov[samples.ys[i], samples.xs[i]]
        feature = BinaryFeature(ONE_POINT, region1, 0.0,
                                ref_log=tuple(float(v) for v in pack(ref)))
    else:
        feature = BinaryFeature(TWO_POINT, region1, 0.0, region2=_sample_region(rng, cfg))
    return feature.with_delta(sample_threshold(rng, feature, img, samples))


class ProjectionCache:
    """Projection values of features on a fixed sample set, memoized.

    Keys ignore the threshold, so resampling a threshold costs one comparison.
    """

    def __init__(self, img: PolSarImage, samples: SampleSet):
        self.img = img
        self.samples = samples
        self._values: dict[tuple, np.ndarray] = {}

    def values(self, feature: BinaryFeature) -> np.ndarray:
        key = feature.projection_key
        v = self._values.get(key)
        if v is None:
            v = project_many(feature, self.img, self.samples.ys, self.samples.xs)
            v.setflags(write=False)
            self._values[key] = v
        return v

    def bits(self, feature: BinaryFeature) -> np.ndarray:
        return (self.values(feature) >= feature.delta).astype(np.uint8)

    def forget(self, keep_keys) -> None:
        """Drop cached values whose projection key is not in ``keep_keys``."""
        keep = set(keep_keys)
        self._values = {k: v for k, v in self._values.items() if k in keep}
