"""
Random Ferns classifier.

Each fern is a small group of binary features; the joint outcome of its
features indexes a per-class histogram. Ferns are treated as independent,
so class log-likelihoods add across ferns.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .features import (BinaryFeature, FeatureConfig, ProjectionCache, SampleSet,
                       eval_many, sample_feature)
from .polsar import LabelMap, PolSarImage

log = logging.getLogger(__name__)

MAX_FERN_SIZE = 24


@dataclass(frozen=True)
class Fern:
    """Ordered features plus a ``(2**N, L)`` table of training hit counts."""

    features: tuple[BinaryFeature, ...]
    counts: np.ndarray

    def __post_init__(self):
        if len(self.features) < 1:
            raise DomainError("a fern needs at least one feature")
        if self.counts.shape[0] != 2 ** len(self.features):
            raise DomainError("count table must have 2**N rows")

    @property
    def size(self) -> int:
        return len(self.features)

    def log_likelihood_table(self, u: float) -> np.ndarray:
        """Laplace-smoothed ``log P(bin | class)``, shape ``(2**N, L)``."""
        smoothed = self.counts + u
        return np.log(smoothed) - np.log(smoothed.sum(axis=0, keepdims=True))


@dataclass(frozen=True)
class TrainConfig:
    num_ferns: int = 30
    fern_size: int = 8
    samples_per_class: int = 3000
    smoothing_u: float = 1.0
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    prior: str = "uniform"  # or "empirical"

    def __post_init__(self):
        if self.num_ferns < 1 or self.fern_size < 1:
            raise ConfigurationError("num_ferns and fern_size must be >= 1")
        if self.fern_size > MAX_FERN_SIZE:
            raise ConfigurationError(f"fern_size is capped at {MAX_FERN_SIZE}")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if not self.smoothing_u > 0:
            raise ConfigurationError("smoothing_u must be positive")
        if self.prior not in ("uniform", "empirical"):
            raise ConfigurationError(f"unknown prior {self.prior!r}")


@dataclass(frozen=True)
class RandomFernsModel:
    ferns: tuple[Fern, ...]
    num_classes: int
    smoothing_u: float
    class_log_prior: np.ndarray
    patch_radius: float = 25.0

    def __post_init__(self):
        if len(self.ferns) < 1:
            raise DomainError("a model needs at least one fern")
        if self.class_log_prior.shape != (self.num_classes,):
            raise DomainError("class_log_prior must have one entry per class")
        if abs(np.exp(self.class_log_prior).sum() - 1.0) > 1e-9:
            raise DomainError("class priors must sum to 1")
        for f in self.ferns:
            if f.counts.shape[1] != self.num_classes:
                raise DomainError("fern count table has the wrong class count")

    @property
    def num_features(self) -> int:
        return sum(f.size for f in self.ferns)

    def replace_ferns(self, ferns) -> "RandomFernsModel":
        return RandomFernsModel(tuple(ferns), self.num_classes, self.smoothing_u,
                                self.class_log_prior, self.patch_radius)


def uniform_log_prior(num_classes: int) -> np.ndarray:
    return np.full(num_classes, -np.log(num_classes))


def empirical_log_prior(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Class frequencies of the labelled pixels (unlabelled 0 ignored)."""
    counts = np.bincount(labels[labels > 0].ravel(), minlength=num_classes + 1)[1:]
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0]) + 1
        raise ConfigurationError(f"class {missing} has no labelled pixels")
    p = counts / counts.sum()
    return np.log(p)


def fold_bits(bits: np.ndarray) -> np.ndarray:
    """Bin indices ``sum_k 2**k * bits[:, k]`` for a ``(n, N)`` bit matrix."""
    bits = np.asarray(bits)
    weights = (1 << np.arange(bits.shape[1], dtype=np.int64))
    return bits.astype(np.int64) @ weights


def bin_index(fern: Fern, img: PolSarImage, pos) -> int:
    """Bin of pixel ``pos = (x, y)``: feature k contributes ``2**k``."""
    x, y = pos
    ys, xs = np.array([y]), np.array([x])
    bits = np.stack([eval_many(f, img, ys, xs) for f in fern.features], axis=1)
    return int(fold_bits(bits)[0])


def fern_counts(bins: np.ndarray, labels: np.ndarray, n_features: int,
                num_classes: int) -> np.ndarray:
    flat = bins * num_classes + (np.asarray(labels, dtype=np.int64) - 1)
    return np.bincount(flat, minlength=(2 ** n_features) * num_classes).reshape(
        2 ** n_features, num_classes)


def fit_fern(features, cache: ProjectionCache, num_classes: int) -> Fern:
    """Count table of ``features`` over the samples held by ``cache``."""
    features = tuple(features)
    if len(features) > MAX_FERN_SIZE:
        raise ConfigurationError(f"fern size {len(features)} exceeds {MAX_FERN_SIZE}")
    bits = np.stack([cache.bits(f) for f in features], axis=1)
    counts = fern_counts(fold_bits(bits), cache.samples.labels, len(features), num_classes)
    return Fern(features, counts)


def fern_log_likelihood(fern: Fern, bin: int, c: int, u: float) -> float:
    """Smoothed ``log P(bin | c)`` with classes counted from 1."""
    col = fern.counts[:, c - 1] + u
    return float(np.log(col[bin]) - np.log(col.sum()))


def draw_training_samples(labels: np.ndarray, samples_per_class: int, num_classes: int,
                          rng: np.random.Generator, mask: np.ndarray | None = None) -> SampleSet:
    """Per-class random pixels; with replacement only when a class is too small."""
    labels = np.asarray(labels)
    allowed = labels > 0 if mask is None else (labels > 0) & mask
    ys_all, xs_all = [], []
    out_labels = []
    for c in range(1, num_classes + 1):
        cand = np.flatnonzero((labels == c) & allowed)
        if cand.size == 0:
            raise ConfigurationError(f"class {c} has no labelled training pixels")
        replace = cand.size < samples_per_class
        pick = rng.choice(cand, size=samples_per_class, replace=replace)
        y, x = np.unravel_index(pick, labels.shape)
        ys_all.append(y)
        xs_all.append(x)
        out_labels.append(np.full(samples_per_class, c, dtype=np.int64))
    return SampleSet(np.concatenate(ys_all), np.concatenate(xs_all), np.concatenate(out_labels))


def sample_features(rng, cfg: FeatureConfig, img: PolSarImage, samples: SampleSet,
                    n: int) -> list[BinaryFeature]:
    return [sample_feature(rng, cfg, img, samples) for _ in range(n)]


def build_model(groups, cache: ProjectionCache, num_classes: int, smoothing_u: float,
                class_log_prior: np.ndarray, patch_radius: float) -> RandomFernsModel:
    """Train one fern per feature group on the cached samples."""
    ferns = tuple(fit_fern(g, cache, num_classes) for g in groups)
    return RandomFernsModel(ferns, num_classes, float(smoothing_u),
                            np.asarray(class_log_prior, dtype=np.float64), float(patch_radius))


def train_on_samples(img: PolSarImage, samples: SampleSet, cfg: TrainConfig, num_classes: int,
                     rng: np.random.Generator, class_log_prior=None,
                     cache: ProjectionCache | None = None) -> RandomFernsModel:
    """Random ferns with ``cfg.num_ferns * cfg.fern_size`` freshly sampled features."""
    cache = cache or ProjectionCache(img, samples)
    feats = sample_features(rng, cfg.features, img, samples, cfg.num_ferns * cfg.fern_size)
    groups = [feats[j * cfg.fern_size:(j + 1) * cfg.fern_size] for j in range(cfg.num_ferns)]
    prior = uniform_log_prior(num_classes) if class_log_prior is None else class_log_prior
    return build_model(groups, cache, num_classes, cfg.smoothing_u, prior, cfg.features.r_max)


def train(img: PolSarImage, labels: LabelMap, cfg: TrainConfig,
          mask: np.ndarray | None = None) -> RandomFernsModel:
    """Sample training pixels per class, sample features, fill fern histograms.

    ``mask`` (boolean, image-shaped) restricts where training pixels may come
    from, e.g. the training stripes of a cross-validation fold.
    """
    if labels.labels.shape != img.shape:
        raise DomainError("label map and image differ in size")
    rng = np.random.default_rng(cfg.seed)
    samples = draw_training_samples(labels.labels, cfg.samples_per_class, labels.num_classes,
                                    rng, mask)
    prior = None
    if cfg.prior == "empirical":
        lab = labels.labels if mask is None else np.where(mask, labels.labels, 0)
        prior = empirical_log_prior(lab, labels.num_classes)
    return train_on_samples(img, samples, cfg, labels.num_classes, rng, prior)


def log_scores(model: RandomFernsModel, img: PolSarImage, ys, xs) -> np.ndarray:
    """Unnormalized ``log P(c) + sum_j log P(F_j | c)``, shape ``(n, L)``."""
    ys = np.asarray(ys)
    xs = np.asarray(xs)
    scores = np.tile(model.class_log_prior, (len(ys), 1))
    for fern in model.ferns:
        bits = np.stack([eval_many(f, img, ys, xs) for f in fern.features], axis=1)
        scores += fern.log_likelihood_table(model.smoothing_u)[fold_bits(bits)]
    return scores


def normalize_log_scores(scores: np.ndarray) -> np.ndarray:
    """Softmax along the last axis, shifted by the row max for stability."""
    z = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def predict_proba(model: RandomFernsModel, img: PolSarImage, ys, xs) -> np.ndarray:
    return normalize_log_scores(log_scores(model, img, ys, xs))


def posterior(model: RandomFernsModel, img: PolSarImage, pos) -> np.ndarray:
    """Class posterior at ``pos = (x, y)``."""
    x, y = pos
    return predict_proba(model, img, [y], [x])[0]


def classify_image(model: RandomFernsModel, img: PolSarImage, mask: LabelMap | None = None,
                   threads: int = 1, chunk: int = 65536) -> tuple[LabelMap, np.ndarray]:
    """Label every pixel (or the nonzero pixels of ``mask``) by maximal posterior.

    Returns the label map and an ``(H, W, L)`` posterior raster; pixels
    outside the mask get label 0 and an all-zero posterior. ``np.argmax``
    resolves ties toward the smaller class index.
    """
    H, W = img.shape
    if mask is None:
        ys, xs = np.divmod(np.arange(H * W), W)
    else:
        if mask.labels.shape != img.shape:
            raise DomainError("mask and image differ in size")
        ys, xs = np.nonzero(mask.labels)
    post = np.zeros((H, W, model.num_classes))
    pred = np.zeros((H, W), dtype=np.uint8)
    if len(ys) == 0:
        return LabelMap(pred, model.num_classes), post
    parts = [(ys[i:i + chunk], xs[i:i + chunk]) for i in range(0, len(ys), chunk)]

    def run(part):
        return predict_proba(model, img, *part)

    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, parts))
    else:
        results = [run(p) for p in parts]
    p = np.concatenate(results)
    post[ys, xs] = p
    pred[ys, xs] = np.argmax(p, axis=1) + 1
    return LabelMap(pred, model.num_classes), post
