"""Training strategies and the stripe cross-validation protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .features import ProjectionCache, SampleSet
from .ferns import (RandomFernsModel, TrainConfig, build_model, classify_image,
                    draw_training_samples, empirical_log_prior, train_on_samples,
                    uniform_log_prior)
from .metrics import MetricsReport, confusion, metrics
from .optimize import (IterationRecord, IterConfig, PreselectConfig, iterative_optimize,
                       preselect_and_group)
from .polsar import LabelMap, PolSarImage

log = logging.getLogger(__name__)

STRATEGIES = ("none", "preselect", "iterative", "both")


@dataclass
class FitResult:
    model: RandomFernsModel
    trace: list[IterationRecord] = field(default_factory=list)
    train: SampleSet | None = None
    val: SampleSet | None = None


def stratified_split(samples: SampleSet, fraction: float, rng: np.random.Generator,
                     width: int | None = None) -> tuple[SampleSet, SampleSet]:
    """Hold out ``fraction`` of each class's distinct pixels as validation.

    Samples drawn with replacement can repeat a pixel; all copies of a pixel
    go to the same side so the two sets never share a pixel.
    Returns ``(train, val)``.
    """
    if not 0 < fraction < 1:
        raise ConfigurationError("validation fraction must lie in (0, 1)")
    width = width or int(samples.xs.max()) + 1
    pix = samples.ys.astype(np.int64) * width + samples.xs
    is_val = np.zeros(len(samples), dtype=bool)
    for c in np.unique(samples.labels):
        in_c = samples.labels == c
        uniq = np.unique(pix[in_c])
        if uniq.size < 2:
            raise ConfigurationError(f"class {c} has too few distinct pixels to split")
        n_val = min(max(int(round(fraction * uniq.size)), 1), uniq.size - 1)
        held = rng.choice(uniq, size=n_val, replace=False)
        is_val |= in_c & np.isin(pix, held)
    return samples.subset(np.flatnonzero(~is_val)), samples.subset(np.flatnonzero(is_val))


def fit_model(img: PolSarImage, labels: LabelMap, train_cfg: TrainConfig,
              strategy: str = "none", preselect_cfg: PreselectConfig | None = None,
              iter_cfg: IterConfig | None = None, val_fraction: float = 0.2,
              mask: np.ndarray | None = None) -> FitResult:
    """Train a model with one of the strategies ``none``, ``preselect``,
    ``iterative`` or ``both`` (preselection, then iterative refinement).

    Iterative strategies hold out a class-stratified ``val_fraction`` of the
    drawn training pixels as validation set.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if labels.labels.shape != img.shape:
        raise DomainError("label map and image differ in size")
    L = labels.num_classes
    rng = np.random.default_rng(train_cfg.seed)
    samples = draw_training_samples(labels.labels, train_cfg.samples_per_class, L, rng, mask)
    if train_cfg.prior == "empirical":
        lab = labels.labels if mask is None else np.where(mask, labels.labels, 0)
        prior = empirical_log_prior(lab, L)
    else:
        prior = uniform_log_prior(L)

    val = None
    train = samples
    if strategy in ("iterative", "both"):
        train, val = stratified_split(samples, val_fraction, rng, img.width)
    cache = ProjectionCache(img, train)

    if strategy in ("preselect", "both"):
        pcfg = preselect_cfg or PreselectConfig(num_ferns=train_cfg.num_ferns,
                                                fern_size=train_cfg.fern_size)
        groups = preselect_and_group(img, train, L, pcfg, rng, train_cfg.features, cache)
        model = build_model(groups, cache, L, train_cfg.smoothing_u, prior,
                            train_cfg.features.r_max)
    elif strategy == "iterative":
        icfg = iter_cfg or IterConfig()
        init = TrainConfig(num_ferns=icfg.initial_ferns, fern_size=icfg.initial_fern_size,
                           samples_per_class=train_cfg.samples_per_class,
                           smoothing_u=train_cfg.smoothing_u, seed=train_cfg.seed,
                           features=train_cfg.features, prior=train_cfg.prior)
        model = train_on_samples(img, train, init, L, rng, prior, cache)
    else:
        model = train_on_samples(img, train, train_cfg, L, rng, prior, cache)

    trace: list[IterationRecord] = []
    if strategy in ("iterative", "both"):
        model, trace = iterative_optimize(model, img, train, val, iter_cfg or IterConfig(), rng,
                                          train_cfg.features, cache)
    return FitResult(model, trace, train, val)


def stripe_masks(width: int, height: int, folds: int) -> list[np.ndarray]:
    """Boolean test masks for ``folds`` vertical stripes of (near) equal width."""
    if folds < 2:
        raise ConfigurationError("need at least 2 folds")
    if width < folds:
        raise ConfigurationError(f"image width {width} is narrower than {folds} folds")
    edges = [(k * width) // folds for k in range(folds + 1)]
    masks = []
    for k in range(folds):
        m = np.zeros((height, width), dtype=bool)
        m[:, edges[k]:edges[k + 1]] = True
        masks.append(m)
    return masks


def evaluate_on_mask(model: RandomFernsModel, img: PolSarImage, labels: LabelMap,
                     test_mask: np.ndarray, threads: int = 1):
    """Classify the labelled pixels inside ``test_mask`` and score them.

    Returns ``(report, confusion matrix, predicted LabelMap, posterior raster)``.
    """
    ref = np.where(test_mask, labels.labels, 0).astype(np.uint8)
    ref_map = LabelMap(ref, labels.num_classes)
    pred, post = classify_image(model, img, ref_map, threads=threads)
    cm = confusion(pred.labels, ref, labels.num_classes)
    return metrics(cm), cm, pred, post


def holdout_run(img: PolSarImage, labels: LabelMap, fold: int, folds: int,
                train_cfg: TrainConfig, strategy: str = "none",
                preselect_cfg: PreselectConfig | None = None,
                iter_cfg: IterConfig | None = None, val_fraction: float = 0.2,
                threads: int = 1) -> tuple[MetricsReport, FitResult, np.ndarray]:
    """Train outside stripe ``fold`` and evaluate inside it.

    Returns the report, the fit and the test posterior raster.
    """
    test = stripe_masks(img.width, img.height, folds)[fold]
    fit = fit_model(img, labels, train_cfg, strategy, preselect_cfg, iter_cfg, val_fraction,
                    mask=~test)
    report, _, _, post = evaluate_on_mask(fit.model, img, labels, test, threads)
    return report, fit, post
