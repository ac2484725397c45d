"""
Synthetic PolSAR scenes.

Every pixel gets a class from a spatial layout and an independent multi-look
sample covariance drawn around that class's population covariance
(complex-Wishart construction).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import DomainError
from .polsar import LabelMap, PolSarImage, precompute_image, span, unpack

LAYOUTS = ("stripes", "blocks", "voronoi")


@dataclass(frozen=True)
class ClassSignature:
    sigma: np.ndarray  # complex (3, 3), strictly positive definite
    name: str = ""

    def __post_init__(self):
        lam = np.linalg.eigvalsh(self.sigma)
        if lam.min() < 1e-6 * span(self.sigma):
            raise DomainError(f"signature {self.name!r} is not positive definite enough")


@dataclass(frozen=True)
class SceneConfig:
    width: int
    height: int
    signatures: tuple[ClassSignature, ...]
    looks: int = 9
    layout: str = "voronoi"
    seed: int = 0
    seeds: int = 40  # voronoi cells
    block: int = 32  # block side for the "blocks" layout
    ribbons: int = 0  # thin 1-3 px lines painted on top of the layout
    ribbon_class: int | None = None  # defaults to the last class
    ribbon_only: bool = False  # keep the ribbon class out of the base layout

    def __post_init__(self):
        if self.looks < 3:
            raise DomainError("looks must be >= 3 for full-rank sample covariances")
        if len(self.signatures) < 2:
            raise DomainError("a scene needs at least two classes")
        if self.layout not in LAYOUTS:
            raise DomainError(f"unknown layout {self.layout!r}")
        if self.width < 1 or self.height < 1:
            raise DomainError("scene dimensions must be positive")


def _cholesky(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.complex128)
    try:
        return np.linalg.cholesky(0.5 * (sigma + sigma.conj().T))
    except np.linalg.LinAlgError as exc:
        raise DomainError("sigma is not positive definite") from exc


def sample_covariances(sigma, looks: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent ``looks``-look sample covariances, ``(size, 3, 3)``."""
    if looks < 1:
        raise DomainError("looks must be >= 1")
    A = _cholesky(sigma)
    w = (rng.standard_normal((size, looks, 3)) + 1j * rng.standard_normal((size, looks, 3)))
    z = (w / np.sqrt(2.0)) @ A.T
    C = np.einsum("nli,nlj->nij", z, z.conj()) / looks
    return 0.5 * (C + np.swapaxes(C, -1, -2).conj())


def sample_covariance(sigma, looks: int, rng: np.random.Generator) -> np.ndarray:
    """One sample covariance ``(1/n) sum z z^H`` with ``z ~ CN(0, sigma)``."""
    return sample_covariances(sigma, looks, rng, 1)[0]


def make_layout(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Class raster (values 1..L) for the configured layout."""
    H, W, L = cfg.height, cfg.width, len(cfg.signatures)
    rc = cfg.ribbon_class or L
    base = np.arange(1, L + 1)
    if cfg.ribbons and cfg.ribbon_only:
        base = base[base != rc]
    nb = len(base)
    yy, xx = np.mgrid[0:H, 0:W]
    if cfg.layout == "stripes":
        # horizontal bands so that vertical cross-validation stripes see every class
        labels = base[(yy * nb) // H]
    elif cfg.layout == "blocks":
        nby = -(-H // cfg.block)
        nbx = -(-W // cfg.block)
        cls = base[rng.permutation(nby * nbx) % nb]
        labels = cls.reshape(nby, nbx)[yy // cfg.block, xx // cfg.block]
    else:
        n = max(cfg.seeds, nb)
        py = rng.uniform(0, H, n)
        px = rng.uniform(0, W, n)
        cls = base[rng.permutation(n) % nb]
        d2 = (yy[..., None] - py) ** 2 + (xx[..., None] - px) ** 2
        labels = cls[np.argmin(d2, axis=-1)]
    labels = labels.astype(np.uint8)
    if cfg.ribbons:
        for _ in range(cfg.ribbons):
            # a straight ribbon through a random point at a random angle
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            theta = rng.uniform(0, np.pi)
            half = rng.integers(1, 4) / 2.0
            dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
            labels[dist < half] = rc
    return labels


def generate_scene(cfg: SceneConfig) -> tuple[PolSarImage, LabelMap]:
    """Layout, per-pixel covariance draws and precomputed logarithms."""
    rng = np.random.default_rng(cfg.seed)
    labels = make_layout(cfg, rng)
    cov = np.empty(labels.shape + (3, 3), dtype=np.complex128)
    for c, sig in enumerate(cfg.signatures, start=1):
        sel = labels == c
        n = int(sel.sum())
        if n:
            cov[sel] = sample_covariances(sig.sigma, cfg.looks, rng, n)
    return precompute_image(cov), LabelMap(labels, len(cfg.signatures))


@dataclass(frozen=True)
class Preset:
    name: str
    signatures: tuple[ClassSignature, ...]
    layout: str = "voronoi"
    seeds: int = 40
    ribbons: int = 0
    ribbon_class: int | None = None
    ribbon_only: bool = False
    looks: int = 9
    description: str = field(default="", compare=False)

    @property
    def class_names(self) -> list[str]:
        return [s.name for s in self.signatures]

    def scene_config(self, width: int = 256, height: int = 256, seed: int = 0,
                     **overrides) -> SceneConfig:
        kw = dict(width=width, height=height, signatures=self.signatures, looks=self.looks,
                  layout=self.layout, seed=seed, seeds=self.seeds, ribbons=self.ribbons,
                  ribbon_class=self.ribbon_class, ribbon_only=self.ribbon_only)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SceneConfig(**kw)


PRESETS = {"five-class": "five_class.json"}


def load_preset(name: str = "five-class") -> Preset:
    try:
        fname = PRESETS[name]
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    doc = json.loads(resources.files("polferns.data").joinpath(fname).read_text("utf-8"))
    sigs = tuple(ClassSignature(unpack(c["sigma"]), c["name"]) for c in doc["classes"])
    return Preset(name=doc["name"], signatures=sigs, layout=doc.get("layout", "voronoi"),
                  seeds=doc.get("seeds", 40), ribbons=doc.get("ribbons", 0),
                  ribbon_class=doc.get("ribbon_class"),
                  ribbon_only=doc.get("ribbon_only", False), looks=doc.get("looks", 9),
                  description=doc.get("description", ""))
