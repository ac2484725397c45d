"""
Fern structure optimization.

Two strategies:

* preselection: score a large pool of random features by how well each one
  alone splits the training classes, drop weak and redundant ones, and group
  mutually correlated survivors into the same fern;
* iterative search: apply one random structural edit at a time and keep it
  only if the validation objective strictly improves.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError
from .features import (BinaryFeature, FeatureConfig, ProjectionCache, SampleSet,
                       sample_feature, sample_threshold)
from .ferns import (MAX_FERN_SIZE, Fern, RandomFernsModel, fit_fern, fold_bits)
from .polsar import PolSarImage

log = logging.getLogger(__name__)


def _entropy(labels: np.ndarray) -> float:
    if labels.size == 0:
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def info_gain_hat(bits, labels) -> float:
    """Size-weighted class entropy of the two halves of a binary split.

    Smaller is better; the impurity of the unsplit set is a constant offset.
    Natural logarithm, empty halves contribute nothing.
    """
    bits = np.asarray(bits)
    labels = np.asarray(labels)
    if bits.shape != labels.shape:
        raise DomainError("bits and labels differ in length")
    if bits.size == 0:
        raise DomainError("empty sample set")
    n = bits.size
    on = bits.astype(bool)
    return (on.sum() / n) * _entropy(labels[on]) + ((~on).sum() / n) * _entropy(labels[~on])


def feature_quality(bits, labels) -> float:
    """Information gain ``H(D) - info_gain_hat``; 0 for a useless feature."""
    return max(_entropy(np.asarray(labels)) - info_gain_hat(bits, labels), 0.0)


def _qualities(B: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Vectorized :func:`feature_quality` for the columns of a bit matrix."""
    n = len(labels)
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), labels - 1] = 1.0
    n1 = B.T.astype(np.float64) @ onehot  # (k, L) class counts where bit is 1
    n0 = onehot.sum(axis=0)[None, :] - n1

    def weighted_entropy(cnt):
        tot = cnt.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = np.where(tot > 0, cnt / tot, 0.0)
            h = -np.where(p > 0, p * np.log(p), 0.0).sum(axis=1)
        return tot[:, 0] / n * h

    h_all = _entropy(labels)
    return np.maximum(h_all - weighted_entropy(n0) - weighted_entropy(n1), 0.0)


def feature_correlation(bits_r, bits_s) -> float:
    """Pearson correlation of two binary sequences."""
    a = np.asarray(bits_r, dtype=np.float64)
    b = np.asarray(bits_s, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError("bit vectors differ in length")
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        raise DomainError("correlation undefined for a constant feature")
    cov = ((a - a.mean()) * (b - b.mean())).mean()
    return float(np.clip(cov / (sa * sb), -1.0, 1.0))


def correlation_matrix(B: np.ndarray) -> np.ndarray:
    """Pearson correlations between all columns of a non-constant bit matrix."""
    n = B.shape[0]
    Bf = B.astype(np.float32)
    # co-occurrence counts are integers below 2**24, exact in float32
    n11 = (Bf.T @ Bf).astype(np.float64)
    p = B.mean(axis=0, dtype=np.float64)
    cov = n11 / n - np.outer(p, p)
    sd = np.sqrt(p * (1 - p))
    return np.clip(cov / np.outer(sd, sd), -1.0, 1.0)


@dataclass(frozen=True)
class PreselectConfig:
    num_ferns: int = 30
    fern_size: int = 8
    pool_size: int = 2000
    ig_threshold: float = 0.01
    corr_threshold: float = 0.9

    def __post_init__(self):
        if not 0 < self.corr_threshold <= 1:
            raise ConfigurationError("corr_threshold must lie in (0, 1]")
        if self.num_ferns < 1 or self.fern_size < 1:
            raise ConfigurationError("num_ferns and fern_size must be >= 1")
        if self.fern_size > MAX_FERN_SIZE:
            raise ConfigurationError(f"fern_size is capped at {MAX_FERN_SIZE}")
        if self.pool_size < self.num_ferns * self.fern_size:
            raise ConfigurationError("pool_size must be at least num_ferns * fern_size")


def select_and_group(candidates, B: np.ndarray, labels: np.ndarray, num_classes: int,
                     cfg: PreselectConfig) -> list[list[BinaryFeature]]:
    """Filter candidates by quality and redundancy, then group them.

    ``B`` holds the bits of candidate ``i`` on the training samples in
    column ``i``.
    """
    B = np.asarray(B, dtype=np.uint8)
    mean = B.mean(axis=0)
    quality = _qualities(B, labels, num_classes)
    ok = (mean > 0) & (mean < 1) & (quality >= cfg.ig_threshold)
    idx = np.flatnonzero(ok)
    # strongest first; stable sort keeps generation order among ties
    idx = idx[np.argsort(-quality[idx], kind="stable")]
    need = cfg.num_ferns * cfg.fern_size
    if idx.size == 0:
        raise ConfigurationError(
            f"0 candidates survived preselection, {need} needed")
    C = np.abs(correlation_matrix(B[:, idx]))

    kept: list[int] = []
    for i in range(idx.size):
        if not kept or C[i, kept].max() <= cfg.corr_threshold:
            kept.append(i)
    log.debug("preselection: %d pass quality, %d pass redundancy", idx.size, len(kept))
    if len(kept) < need:
        raise ConfigurationError(
            f"{len(kept)} candidates survived preselection, {need} needed")

    kept_arr = np.array(kept)
    Ck = C[np.ix_(kept_arr, kept_arr)]
    free = np.ones(len(kept), dtype=bool)
    groups = []
    for _ in range(cfg.num_ferns):
        seed = int(np.flatnonzero(free)[0])
        members = [seed]
        free[seed] = False
        corr_sum = Ck[seed].copy()
        while len(members) < cfg.fern_size:
            score = np.where(free, corr_sum, -np.inf)
            nxt = int(np.argmax(score))
            members.append(nxt)
            free[nxt] = False
            corr_sum += Ck[nxt]
        groups.append([candidates[idx[kept_arr[m]]] for m in members])
    return groups


def preselect_and_group(img: PolSarImage, samples: SampleSet, num_classes: int,
                        cfg: PreselectConfig, rng: np.random.Generator,
                        feature_cfg: FeatureConfig = FeatureConfig(),
                        cache: ProjectionCache | None = None) -> list[list[BinaryFeature]]:
    """Generate a candidate pool and return ``num_ferns`` groups of ``fern_size``."""
    cache = cache or ProjectionCache(img, samples)
    candidates = [sample_feature(rng, feature_cfg, img, samples) for _ in range(cfg.pool_size)]
    B = np.empty((len(samples), len(candidates)), dtype=np.uint8)
    for i, f in enumerate(candidates):
        B[:, i] = cache.bits(f)
    groups = select_and_group(candidates, B, samples.labels, num_classes, cfg)
    cache.forget(f.projection_key for g in groups for f in g)
    return groups


class MutationKind(enum.Enum):
    ADD_FERN = "add_fern"
    ADD_FEATURE = "add_feature"
    DELETE_FEATURE = "delete_feature"
    SWITCH_FEATURES = "switch_features"
    RESAMPLE_THRESHOLD = "resample_threshold"


@dataclass(frozen=True)
class MutationOp:
    """One structural edit with its randomly chosen targets and payload."""

    kind: MutationKind
    fern: int = -1
    feature: int = -1
    other_fern: int = -1
    other_feature: int = -1
    new_features: tuple[BinaryFeature, ...] = ()
    new_delta: float | None = None

    @property
    def touched(self) -> tuple[int, ...]:
        if self.kind is MutationKind.SWITCH_FEATURES:
            return (self.fern, self.other_fern)
        return (self.fern,)


class FeatureSource:
    """Samples new features and thresholds from a fixed training set."""

    def __init__(self, img: PolSarImage, samples: SampleSet,
                 cfg: FeatureConfig = FeatureConfig()):
        self.img = img
        self.samples = samples
        self.cfg = cfg

    def feature(self, rng) -> BinaryFeature:
        return sample_feature(rng, self.cfg, self.img, self.samples)

    def threshold(self, rng, feature: BinaryFeature) -> float:
        return sample_threshold(rng, feature, self.img, self.samples)


def apply_mutation(model: RandomFernsModel, op: MutationOp,
                   cache: ProjectionCache) -> RandomFernsModel:
    """Model with ``op`` applied; only the touched ferns are retrained."""
    ferns = list(model.ferns)
    L = model.num_classes
    k = op.kind
    if k is MutationKind.ADD_FERN:
        ferns.append(fit_fern(op.new_features, cache, L))
    elif k is MutationKind.ADD_FEATURE:
        ferns[op.fern] = fit_fern(ferns[op.fern].features + op.new_features[:1], cache, L)
    elif k is MutationKind.DELETE_FEATURE:
        feats = list(ferns[op.fern].features)
        if len(feats) < 2:
            raise DomainError("cannot delete the last feature of a fern")
        del feats[op.feature]
        ferns[op.fern] = fit_fern(feats, cache, L)
    elif k is MutationKind.SWITCH_FEATURES:
        if op.fern == op.other_fern:
            raise DomainError("switch needs two different ferns")
        a = list(ferns[op.fern].features)
        b = list(ferns[op.other_fern].features)
        a[op.feature], b[op.other_feature] = b[op.other_feature], a[op.feature]
        ferns[op.fern] = fit_fern(a, cache, L)
        ferns[op.other_fern] = fit_fern(b, cache, L)
    elif k is MutationKind.RESAMPLE_THRESHOLD:
        feats = list(ferns[op.fern].features)
        feats[op.feature] = feats[op.feature].with_delta(op.new_delta)
        ferns[op.fern] = fit_fern(feats, cache, L)
    else:  # pragma: no cover
        raise DomainError(f"unknown mutation {k}")
    return model.replace_ferns(ferns)


def draw_mutation(model: RandomFernsModel, rng: np.random.Generator, source: FeatureSource,
                  new_fern_size: int = 6) -> MutationOp:
    """Pick a feasible edit uniformly among feasible kinds, then its targets."""
    sizes = np.array([f.size for f in model.ferns])
    eligible = {
        MutationKind.ADD_FERN: np.array([0]),
        MutationKind.ADD_FEATURE: np.flatnonzero(sizes < MAX_FERN_SIZE),
        MutationKind.DELETE_FEATURE: np.flatnonzero(sizes >= 2),
        MutationKind.SWITCH_FEATURES: np.arange(len(sizes)) if len(sizes) >= 2 else np.array([], int),
        MutationKind.RESAMPLE_THRESHOLD: np.arange(len(sizes)),
    }
    kinds = [k for k in MutationKind if eligible[k].size]
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind is MutationKind.ADD_FERN:
        feats = tuple(source.feature(rng) for _ in range(new_fern_size))
        return MutationOp(kind, fern=len(sizes), new_features=feats)
    j = int(eligible[kind][rng.integers(eligible[kind].size)])
    if kind is MutationKind.ADD_FEATURE:
        return MutationOp(kind, fern=j, new_features=(source.feature(rng),))
    if kind is MutationKind.DELETE_FEATURE:
        return MutationOp(kind, fern=j, feature=int(rng.integers(sizes[j])))
    if kind is MutationKind.SWITCH_FEATURES:
        others = np.delete(np.arange(len(sizes)), j)
        j2 = int(others[rng.integers(others.size)])
        return MutationOp(kind, fern=j, feature=int(rng.integers(sizes[j])),
                          other_fern=j2, other_feature=int(rng.integers(sizes[j2])))
    i = int(rng.integers(sizes[j]))
    return MutationOp(kind, fern=j, feature=i,
                      new_delta=source.threshold(rng, model.ferns[j].features[i]))


def mutate(model: RandomFernsModel, rng: np.random.Generator, source: FeatureSource,
           cache: ProjectionCache, new_fern_size: int = 6) -> tuple[MutationOp, RandomFernsModel]:
    op = draw_mutation(model, rng, source, new_fern_size)
    return op, apply_mutation(model, op, cache)


@dataclass(frozen=True)
class IterConfig:
    it_min: int = 30
    delta_patience: int = 15
    initial_ferns: int = 5
    initial_fern_size: int = 6
    objective: str = "aa"
    max_iterations: int | None = None

    def __post_init__(self):
        if self.it_min < 0 or self.delta_patience < 1:
            raise ConfigurationError("need it_min >= 0 and delta_patience >= 1")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")


def _aa(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    acc = []
    for c in range(1, num_classes + 1):
        sel = labels == c
        if sel.any():
            acc.append(np.mean(pred[sel] == c))
    return float(np.mean(acc))


def _oa(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    return float(np.mean(pred == labels))


OBJECTIVES = {"aa": _aa, "oa": _oa}


class SampleScorer:
    """Objective of a model on a fixed sample set, memoizing per-fern terms."""

    def __init__(self, cache: ProjectionCache, num_classes: int, objective: str = "aa"):
        self.cache = cache
        self.num_classes = num_classes
        self.objective = OBJECTIVES[objective]
        self._memo: dict[int, tuple[Fern, np.ndarray]] = {}

    def _term(self, fern: Fern, u: float) -> np.ndarray:
        hit = self._memo.get(id(fern))
        if hit is not None and hit[0] is fern:
            return hit[1]
        bits = np.stack([self.cache.bits(f) for f in fern.features], axis=1)
        term = fern.log_likelihood_table(u)[fold_bits(bits)]
        self._memo[id(fern)] = (fern, term)
        return term

    def log_scores(self, model: RandomFernsModel) -> np.ndarray:
        s = np.tile(model.class_log_prior, (len(self.cache.samples), 1))
        for fern in model.ferns:
            s += self._term(fern, model.smoothing_u)
        return s

    def score(self, model: RandomFernsModel) -> float:
        pred = np.argmax(self.log_scores(model), axis=1) + 1
        return self.objective(pred, self.cache.samples.labels, self.num_classes)

    def retain_only(self, model: RandomFernsModel) -> None:
        keep = {id(f) for f in model.ferns}
        self._memo = {k: v for k, v in self._memo.items() if k in keep}


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    op: str
    fern: int
    accepted: bool
    candidate_val: float
    train_objective: float
    val_objective: float
    num_features: int
    num_ferns: int


TRACE_FIELDS = ["iteration", "op", "fern", "accepted", "candidate_val",
                "train_objective", "val_objective", "num_features", "num_ferns"]


def iterative_optimize(model0: RandomFernsModel, img: PolSarImage, train: SampleSet,
                       val: SampleSet, cfg: IterConfig, rng: np.random.Generator,
                       feature_cfg: FeatureConfig = FeatureConfig(),
                       train_cache: ProjectionCache | None = None,
                       ) -> tuple[RandomFernsModel, list[IterationRecord]]:
    """Random-edit hill climbing on the validation objective.

    ``model0`` must have been trained on ``train``. An edit is kept only when
    the validation objective strictly increases. The loop runs at least
    ``it_min`` iterations; afterwards it stops once ``delta_patience``
    consecutive edits past ``max(it_min, last acceptance)`` were rejected.
    """
    if len(train) == 0 or len(val) == 0:
        raise DomainError("train and validation sets must be non-empty")
    L = model0.num_classes
    train_cache = train_cache or ProjectionCache(img, train)
    val_cache = ProjectionCache(img, val)
    source = FeatureSource(img, train, feature_cfg)
    train_scorer = SampleScorer(train_cache, L, cfg.objective)
    val_scorer = SampleScorer(val_cache, L, cfg.objective)

    model = model0
    best_val = val_scorer.score(model)
    train_obj = train_scorer.score(model)
    log.info("iterative start: M=%d N=%d val=%.4f", len(model.ferns), model.num_features,
             best_val)
    # row 0 records the starting point
    trace = [IterationRecord(0, "init", -1, False, best_val, train_obj, best_val,
                             model.num_features, len(model.ferns))]
    t = 0
    last_accept = 0
    while t < max(last_accept, cfg.it_min) + cfg.delta_patience:
        if cfg.max_iterations is not None and t >= cfg.max_iterations:
            break
        t += 1
        op, cand = mutate(model, rng, source, train_cache, cfg.initial_fern_size)
        cand_val = val_scorer.score(cand)
        accepted = cand_val > best_val
        if accepted:
            model, best_val, last_accept = cand, cand_val, t
            train_obj = train_scorer.score(model)
        trace.append(IterationRecord(t, op.kind.value, op.fern, accepted, cand_val,
                                     train_obj, best_val, model.num_features, len(model.ferns)))
        keys = [f.projection_key for fern in model.ferns for f in fern.features]
        train_cache.forget(keys)
        val_cache.forget(keys)
        train_scorer.retain_only(model)
        val_scorer.retain_only(model)
    log.info("iterative stop after %d iterations: M=%d N=%d val=%.4f", t, len(model.ferns),
             model.num_features, best_val)
    return model, trace


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.iteration, r.op, r.fern, int(r.accepted), repr(r.candidate_val),
                        repr(r.train_objective), repr(r.val_objective), r.num_features,
                        r.num_ferns])
