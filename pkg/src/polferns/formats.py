"""
On-disk formats.

* covariance rasters: ``PSC1`` header (magic, u32 width, u32 height, u32
  precision in bits), then 9 little-endian floats per pixel in row-major
  order, packed as C11 C22 C33 ReC12 ImC12 ReC13 ImC13 ReC23 ImC23
* label maps: binary PGM (P5), maxval 255
* models: line-oriented text, floats written with ``repr`` so they parse back
  bit-exactly
* posterior rasters: ``.npy``
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError
from .features import ONE_POINT, TWO_POINT, BinaryFeature, RegionSpec
from .ferns import MAX_FERN_SIZE, Fern, RandomFernsModel
from .polsar import LabelMap, pack, unpack

MAGIC = b"PSC1"
HEADER = struct.Struct("<4sIII")
PRECISIONS = {32: np.dtype("<f4"), 64: np.dtype("<f8")}

MODEL_MAGIC = "polferns-model"
MODEL_VERSION = 1


# covariance rasters

def write_covariance_raster(cov, path, precision: int = 64) -> None:
    """Write a ``(H, W, 3, 3)`` Hermitian raster. Only the upper triangle is stored."""
    if precision not in PRECISIONS:
        raise FormatError(f"precision must be 32 or 64, got {precision}")
    cov = np.asarray(cov)
    if cov.ndim != 4 or cov.shape[-2:] != (3, 3):
        raise FormatError(f"expected a (H, W, 3, 3) raster, got shape {cov.shape}")
    H, W = cov.shape[:2]
    body = np.ascontiguousarray(pack(cov), dtype=PRECISIONS[precision])
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, W, H, precision))
        fh.write(body.tobytes())


def read_covariance_raster(path) -> np.ndarray:
    """Read a raster written by :func:`write_covariance_raster` as complex128."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise FormatError(f"{path}: header truncated at byte offset {len(head)}: "
                              f"expected {HEADER.size} bytes, got {len(head)}")
        magic, W, H, precision = HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
        if precision not in PRECISIONS:
            raise FormatError(f"{path}: bad precision flag {precision} at byte offset 12")
        dtype = PRECISIONS[precision]
        # python ints do not overflow; compare against the real size before allocating
        expected = W * H * 9 * dtype.itemsize
        actual = size - HEADER.size
        if actual != expected:
            what = "truncated" if actual < expected else "has trailing bytes"
            raise FormatError(
                f"{path}: body {what} at byte offset {HEADER.size + min(actual, expected)}: "
                f"expected {expected} body bytes for {W}x{H}, got {actual}")
        body = np.frombuffer(fh.read(expected), dtype=dtype)
    return unpack(body.astype(np.float64).reshape(H, W, 9))


# label maps

def write_label_map(labels, path) -> None:
    """Binary PGM, one byte per pixel."""
    lab = labels.labels if isinstance(labels, LabelMap) else np.asarray(labels)
    if lab.ndim != 2:
        raise FormatError("label map must be 2-D")
    if lab.size and (lab.min() < 0 or lab.max() > 255):
        raise FormatError("label values must fit in 0..255")
    H, W = lab.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())


def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """First ``count`` whitespace-separated header integers after the magic."""
    pos = 2
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"malformed PGM header at byte offset {start}")
        out.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"malformed PGM header at byte offset {pos}")
    return out, pos + 1


def read_label_map(path, num_classes: int | None = None) -> LabelMap:
    """Read a P5 label map. Without ``num_classes`` the largest value is used."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {data[:2]!r} at byte offset 0)")
    (W, H, maxval), offset = _pgm_tokens(data, 3)
    if maxval != 255:
        raise FormatError(f"{path}: PGM maxval must be 255, got {maxval}")
    expected = W * H
    actual = len(data) - offset
    if actual != expected:
        raise FormatError(f"{path}: pixel data at byte offset {offset}: "
                          f"expected {expected} bytes for {W}x{H}, got {actual}")
    lab = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset).reshape(H, W).copy()
    top = int(lab.max()) if lab.size else 0
    if num_classes is None:
        num_classes = max(top, 1)
    if top > num_classes:
        raise FormatError(f"{path}: label {top} exceeds class count {num_classes}")
    return LabelMap(lab, num_classes)


# posteriors

def write_posteriors(post, path) -> None:
    np.save(path, np.asarray(post, dtype=np.float64), allow_pickle=False)


def read_posteriors(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# models

def _region(spec: RegionSpec) -> str:
    return f"{spec.r!r} {spec.alpha!r} {spec.s}"


def _feature_line(f: BinaryFeature) -> str:
    if f.kind == ONE_POINT:
        ref = " ".join(repr(float(v)) for v in f.ref_log)
        return f"feature one {_region(f.region1)} {f.delta!r} {ref}"
    return f"feature two {_region(f.region1)} {_region(f.region2)} {f.delta!r}"


def dumps_model(model: RandomFernsModel) -> str:
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"classes {model.num_classes}",
        f"ferns {len(model.ferns)}",
        f"smoothing {float(model.smoothing_u)!r}",
        f"patch_radius {float(model.patch_radius)!r}",
        "prior " + " ".join(repr(float(v)) for v in model.class_log_prior),
    ]
    for fern in model.ferns:
        lines.append(f"fern {fern.size}")
        lines.extend(_feature_line(f) for f in fern.features)
        lines.extend(" ".join(str(int(c)) for c in row) for row in fern.counts)
    lines.append("end")
    return "\n".join(lines) + "\n"


def save_model(model: RandomFernsModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))


class _Lines:
    def __init__(self, text: str, source: str):
        self.lines = text.splitlines()
        self.pos = 0
        self.source = source

    def error(self, msg: str, lineno: int | None = None) -> FormatError:
        return FormatError(f"{self.source}:{lineno or self.pos}: {msg}")

    def next(self) -> list[str]:
        if self.pos >= len(self.lines):
            raise self.error("unexpected end of file", len(self.lines) + 1)
        self.pos += 1
        return self.lines[self.pos - 1].split()

    def keyed(self, key: str, n: int | None = 1) -> list[str]:
        tok = self.next()
        if not tok or tok[0] != key:
            raise self.error(f"expected {key!r}")
        if n is not None and len(tok) - 1 != n:
            raise self.error(f"{key!r} needs {n} value(s), got {len(tok) - 1}")
        return tok[1:]


def _num(lines: _Lines, text: str, cast):
    try:
        return cast(text)
    except ValueError:
        raise lines.error(f"malformed number {text!r}") from None


def _parse_feature(lines: _Lines) -> BinaryFeature:
    tok = lines.next()
    if len(tok) < 2 or tok[0] != "feature":
        raise lines.error("expected 'feature'")
    kind = tok[1]
    vals = tok[2:]

    def region(a, b, c):
        return RegionSpec(_num(lines, a, float), _num(lines, b, float), _num(lines, c, int))

    try:
        if kind == ONE_POINT and len(vals) == 13:
            return BinaryFeature(ONE_POINT, region(*vals[:3]), _num(lines, vals[3], float),
                                 ref_log=tuple(_num(lines, v, float) for v in vals[4:]))
        if kind == TWO_POINT and len(vals) == 7:
            return BinaryFeature(TWO_POINT, region(*vals[:3]), _num(lines, vals[6], float),
                                 region2=region(*vals[3:6]))
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise lines.error(str(exc)) from None
    raise lines.error(f"malformed {kind!r} feature with {len(vals)} values")


def loads_model(text: str, source: str = "<model>") -> RandomFernsModel:
    lines = _Lines(text, source)
    head = lines.next()
    if len(head) != 2 or head[0] != MODEL_MAGIC:
        raise lines.error("not a model file")
    if head[1] != str(MODEL_VERSION):
        raise lines.error(f"unsupported model version {head[1]!r}, expected {MODEL_VERSION}")
    L = _num(lines, lines.keyed("classes")[0], int)
    M = _num(lines, lines.keyed("ferns")[0], int)
    if L < 1 or M < 1:
        raise lines.error("class and fern counts must be positive")
    u = _num(lines, lines.keyed("smoothing")[0], float)
    radius = _num(lines, lines.keyed("patch_radius")[0], float)
    prior = np.array([_num(lines, v, float) for v in lines.keyed("prior", L)])
    ferns = []
    for _ in range(M):
        n = _num(lines, lines.keyed("fern")[0], int)
        if not 1 <= n <= MAX_FERN_SIZE:
            raise lines.error(f"fern size {n} out of range")
        feats = tuple(_parse_feature(lines) for _ in range(n))
        counts = np.empty((2 ** n, L), dtype=np.int64)
        for b in range(2 ** n):
            row = lines.next()
            if len(row) != L:
                raise lines.error(f"count row needs {L} values, got {len(row)}")
            counts[b] = [_num(lines, v, int) for v in row]
        if counts.min() < 0:
            raise lines.error("negative count")
        ferns.append(Fern(feats, counts))
    lines.keyed("end", 0)
    try:
        return RandomFernsModel(tuple(ferns), L, u, prior, radius)
    except ValueError as exc:
        raise lines.error(str(exc)) from None


def load_model(path) -> RandomFernsModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read(), str(path))
