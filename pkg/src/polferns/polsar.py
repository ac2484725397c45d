"""
Polarimetric data model and Hermitian matrix math.

A covariance matrix is held as a complex ``(..., 3, 3)`` numpy array. On disk
and inside features it is packed into 9 reals in the order

    C11, C22, C33, Re C12, Im C12, Re C13, Im C13, Re C23, Im C23

which stores the upper triangle only, so Hermitian symmetry holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# eigenvalue floor relative to the trace, and the absolute trace floor
REG_RELATIVE = 1e-6
REG_ABSOLUTE = 1e-12

_UPPER = ((0, 1), (0, 2), (1, 2))

# packed entries are scaled by these weights so the plain Euclidean norm of a
# packed difference equals the Frobenius norm of the matrix difference
FROBENIUS_WEIGHTS = np.array([1.0, 1.0, 1.0] + [np.sqrt(2.0)] * 6)


def scattering_vector(s_hh, s_hv, s_vv) -> np.ndarray:
    """Lexicographic scattering vector ``(S_HH, sqrt(2) S_HV, S_VV)``.

    Works elementwise on arrays; the vector axis is appended last.
    """
    k = np.stack(np.broadcast_arrays(s_hh, np.sqrt(2.0) * np.asarray(s_hv), s_vv), axis=-1)
    k = k.astype(np.complex128)
    if not np.all(np.isfinite(k)):
        raise DomainError("scattering vector has non-finite components")
    return k


def covariance_from_scattering(window) -> np.ndarray:
    """Average of ``k k^H`` over every scattering vector in ``window``.

    ``window`` is any array whose last axis has length 3; all leading axes
    are averaged over.
    """
    k = np.asarray(window, dtype=np.complex128)
    if k.shape[-1] != 3:
        raise DomainError(f"scattering vectors must have 3 components, got {k.shape[-1]}")
    k = k.reshape(-1, 3)
    if k.shape[0] == 0:
        raise DomainError("cannot estimate a covariance from an empty window")
    C = np.einsum("ni,nj->ij", k, k.conj()) / k.shape[0]
    return 0.5 * (C + C.conj().T)


def boxcar_covariance(k_raster, window: int = 5) -> np.ndarray:
    """Covariance raster from a ``(H, W, 3)`` scattering-vector raster.

    Each pixel averages ``k k^H`` over a ``window x window`` box centred on it.
    Boxes are clipped at the image border, so edge pixels average fewer
    vectors.
    """
    k = np.asarray(k_raster, dtype=np.complex128)
    if k.ndim != 3 or k.shape[-1] != 3:
        raise DomainError("expected a (H, W, 3) scattering-vector raster")
    if window < 1:
        raise DomainError("window must be >= 1")
    H, W = k.shape[:2]
    outer = k[..., :, None] * k[..., None, :].conj()
    lo = window // 2
    hi = window - lo
    # integral image over both axes
    integ = np.zeros((H + 1, W + 1, 3, 3), dtype=np.complex128)
    integ[1:, 1:] = outer.cumsum(0).cumsum(1)
    y0 = np.clip(np.arange(H) - lo, 0, H)
    y1 = np.clip(np.arange(H) + hi, 0, H)
    x0 = np.clip(np.arange(W) - lo, 0, W)
    x1 = np.clip(np.arange(W) + hi, 0, W)
    total = (integ[y1][:, x1] - integ[y0][:, x1] - integ[y1][:, x0] + integ[y0][:, x0])
    n = ((y1 - y0)[:, None] * (x1 - x0)[None, :]).astype(float)
    C = total / n[..., None, None]
    return 0.5 * (C + np.swapaxes(C, -1, -2).conj())


def span(C) -> np.ndarray | float:
    """Total power, the (real) trace of each covariance matrix."""
    C = np.asarray(C)
    s = np.real(np.trace(C, axis1=-2, axis2=-1))
    return float(s) if np.ndim(s) == 0 else s


def pack(C) -> np.ndarray:
    """Complex ``(..., 3, 3)`` Hermitian matrices to ``(..., 9)`` reals."""
    C = np.asarray(C)
    parts = [C[..., 0, 0].real, C[..., 1, 1].real, C[..., 2, 2].real]
    for i, j in _UPPER:
        parts += [C[..., i, j].real, C[..., i, j].imag]
    return np.stack(parts, axis=-1).astype(np.float64)


def unpack(v) -> np.ndarray:
    """Inverse of :func:`pack`."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 9:
        raise DomainError(f"packed Hermitian matrices need 9 reals, got {v.shape[-1]}")
    C = np.zeros(v.shape[:-1] + (3, 3), dtype=np.complex128)
    for d in range(3):
        C[..., d, d] = v[..., d]
    for n, (i, j) in enumerate(_UPPER):
        z = v[..., 3 + 2 * n] + 1j * v[..., 4 + 2 * n]
        C[..., i, j] = z
        C[..., j, i] = np.conj(z)
    return C


def is_hermitian_psd(C, atol: float = 1e-12) -> bool:
    """True if every matrix is Hermitian with eigenvalues >= -1e-9 * trace."""
    C = np.asarray(C)
    if not np.all(np.isfinite(C)):
        return False
    herm = np.allclose(C, np.swapaxes(C, -1, -2).conj(), atol=atol, rtol=0)
    if not herm:
        return False
    diag = np.real(np.diagonal(C, axis1=-2, axis2=-1))
    if np.any(diag < -atol):
        return False
    lam = np.linalg.eigvalsh(C)
    tol = 1e-9 * np.abs(span(C))
    return bool(np.all(lam.min(axis=-1) >= -np.asarray(tol) - atol))


def _hermitize(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2).conj())


def _regularized_eigh(C):
    C = _hermitize(C)
    lam, U = np.linalg.eigh(C)
    floor = REG_RELATIVE * np.maximum(span(C), REG_ABSOLUTE)
    return np.maximum(lam, np.asarray(floor)[..., None]), U


def _from_eig(lam, U):
    return _hermitize((U * lam[..., None, :]) @ np.swapaxes(U, -1, -2).conj())


def matrix_log(C) -> np.ndarray:
    """Matrix logarithm of (regularized) Hermitian matrices.

    Eigenvalues are floored at ``1e-6 * max(trace, 1e-12)`` before taking the
    logarithm so singular covariances, e.g. from low-rank windows, still have
    a finite logarithm. Accepts a single matrix or any batch ``(..., 3, 3)``.
    """
    C = np.asarray(C, dtype=np.complex128)
    if not np.all(np.isfinite(C)):
        raise DomainError("matrix_log of non-finite input")
    lam, U = _regularized_eigh(C)
    return _from_eig(np.log(lam), U)


def regularize(C) -> np.ndarray:
    """The matrix that :func:`matrix_log` actually takes the logarithm of."""
    return _from_eig(*_regularized_eigh(np.asarray(C, dtype=np.complex128)))


def matrix_exp(L) -> np.ndarray:
    """Matrix exponential of Hermitian matrices via eigendecomposition."""
    lam, U = np.linalg.eigh(_hermitize(np.asarray(L, dtype=np.complex128)))
    return _from_eig(np.exp(lam), U)


def log_euclidean_distance(LA, LB) -> np.ndarray | float:
    """Frobenius norm of ``LA - LB``, with both arguments already logarithms."""
    D = np.asarray(LA) - np.asarray(LB)
    d = np.sqrt(np.sum(np.abs(D) ** 2, axis=(-2, -1)))
    return float(d) if np.ndim(d) == 0 else d


class PolSarImage:
    """Covariance raster with precomputed matrix logarithms and spans.

    ``cov`` and ``log_cov`` are complex ``(H, W, 3, 3)`` arrays and ``span``
    is ``(H, W)``. Construct through :func:`precompute_image`. Arrays are
    marked read-only; treat instances as immutable.
    """

    def __init__(self, cov: np.ndarray, log_cov: np.ndarray, span: np.ndarray):
        if cov.shape != log_cov.shape or cov.shape[:2] != span.shape:
            raise DomainError("cov, log_cov and span rasters must share dimensions")
        self.cov = cov
        self.log_cov = log_cov
        self.span = span
        # weighted packing of log_cov, one row per pixel in row-major order;
        # Euclidean distances between rows are log-Euclidean distances
        self.log_vec = np.ascontiguousarray(pack(log_cov).reshape(-1, 9) * FROBENIUS_WEIGHTS)
        for a in (self.cov, self.log_cov, self.span, self.log_vec):
            a.setflags(write=False)
        self._rep_maps: dict[int, np.ndarray] = {}

    @property
    def height(self) -> int:
        return self.span.shape[0]

    @property
    def width(self) -> int:
        return self.span.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.span.shape

    def representative_map(self, s: int) -> np.ndarray:
        """Flat index of the max-span pixel in the ``s x s`` window at every pixel.

        Windows cover offsets ``-(s // 2) .. s - 1 - s // 2`` on both axes and
        are clipped to the image. Ties go to the first pixel in row-major
        order.
        """
        if s < 1:
            raise DomainError("region size must be >= 1")
        cached = self._rep_maps.get(s)
        if cached is not None:
            return cached
        H, W = self.shape
        lo = -(s // 2)
        pad = s
        padded = np.full((H + 2 * pad, W + 2 * pad), -np.inf)
        padded[pad:pad + H, pad:pad + W] = self.span
        flat = np.arange(H * W).reshape(H, W)
        best = np.full((H, W), -np.inf)
        idx = flat.copy()
        yy, xx = np.mgrid[0:H, 0:W]
        for dy in range(lo, lo + s):
            for dx in range(lo, lo + s):
                vals = padded[pad + dy:pad + dy + H, pad + dx:pad + dx + W]
                better = vals > best
                best[better] = vals[better]
                idx[better] = ((yy + dy) * W + (xx + dx))[better]
        idx.setflags(write=False)
        self._rep_maps[s] = idx
        return idx


def precompute_image(cov_raster) -> PolSarImage:
    """Build a :class:`PolSarImage` from a ``(H, W, 3, 3)`` covariance raster."""
    cov = np.array(cov_raster, dtype=np.complex128)
    if cov.ndim != 4 or cov.shape[-2:] != (3, 3):
        raise DomainError(f"expected a (H, W, 3, 3) raster, got shape {cov.shape}")
    if cov.shape[0] == 0 or cov.shape[1] == 0:
        raise DomainError("covariance raster is empty")
    bad = ~np.all(np.isfinite(cov), axis=(-2, -1))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise DomainError(f"matrix_log of non-finite input at pixel (x={x}, y={y})")
    cov = _hermitize(cov)
    return PolSarImage(cov, matrix_log(cov), np.asarray(span(cov), dtype=np.float64))


@dataclass(frozen=True)
class LabelMap:
    """Class raster: 0 is unlabelled, 1..num_classes are classes."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DomainError("label map must be 2-D")
        if self.labels.size and int(self.labels.max()) > self.num_classes:
            raise DomainError(
                f"label {int(self.labels.max())} exceeds class count {self.num_classes}")
        if self.labels.size and int(self.labels.min()) < 0:
            raise DomainError("labels must be non-negative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]
