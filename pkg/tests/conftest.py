import numpy as np
import pytest

from polferns.synth import ClassSignature, SceneConfig, generate_scene, load_preset


def random_unitary(rng, n=3):
    z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def random_psd(rng, size=None, rank=3):
    shape = () if size is None else (size,)
    a = rng.standard_normal(shape + (3, rank)) + 1j * rng.standard_normal(shape + (3, rank))
    return a @ np.swapaxes(a, -1, -2).conj() + 1e-3 * np.eye(3)


def separable_signatures(L=5):
    """Classes with clearly different power and polarimetric balance."""
    sigs = []
    for c in range(L):
        d = np.array([1.0, 0.2, 0.8]) * 10.0 ** c
        d = np.roll(d, c)
        sigs.append(ClassSignature(np.diag(d).astype(complex), f"c{c + 1}"))
    return tuple(sigs)


@pytest.fixture(scope="session")
def small_scene():
    """48x48 preset scene, every class present."""
    cfg = load_preset().scene_config(48, 48, seed=3)
    return generate_scene(cfg)


@pytest.fixture(scope="session")
def separable_scene():
    cfg = SceneConfig(96, 96, separable_signatures(), looks=9, layout="blocks", block=32, seed=5)
    return generate_scene(cfg)
