"""Dense float64 substrate shared by every other module.

Feature maps are rank-5 arrays laid out as (streams, views, height, width,
channels). Token matrices are the row-major flattening of a feature map,
stream-major, then view, then row, then column, with channels as columns.

All products go through :func:`matmul`, which accumulates left to right over
the inner dimension so results are bit-reproducible regardless of the BLAS
build or thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"SFA1"
_MATMUL_CHUNK = 1 << 20
_LOOP_MIN = 2048


class ShapeError(ValueError):
    """Raised when array extents are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class DomainError(ValueError):
    """Raised when a scalar argument is outside its admissible range."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Rank-5 feature array (S, N, H, W, C) of finite float64 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 5:
            raise ShapeError(f"FeatureMap needs 5 extents (S,N,H,W,C), got shape {arr.shape}")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"FeatureMap extents must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("FeatureMap contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def streams(self) -> int:
        return self.shape[0]

    @property
    def views(self) -> int:
        return self.shape[1]

    @property
    def channels(self) -> int:
        return self.shape[4]

    def stream(self, index: int) -> "FeatureMap":
        return FeatureMap(self.data[index : index + 1])

    def view(self, index: int) -> "FeatureMap":
        return FeatureMap(self.data[:, index : index + 1])

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class TokenMatrix:
    """T x C token view of a feature map; ``source_shape`` records the 5-D origin."""

    data: np.ndarray
    source_shape: tuple[int, int, int, int, int] | None = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"TokenMatrix must be 2-D, got shape {arr.shape}")
        if self.source_shape is not None:
            s, n, h, w, c = self.source_shape
            if arr.shape != (s * n * h * w, c):
                raise ShapeError(
                    f"TokenMatrix shape {arr.shape} does not match source {self.source_shape}"
                )
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def as_array(x) -> np.ndarray:
    """Unwrap a FeatureMap / TokenMatrix, or pass an array through as float64."""
    if isinstance(x, (FeatureMap, TokenMatrix)):
        return x.data
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Dense product with a fixed left-to-right accumulation over the inner axis.

    Accepts 2-D operands or stacks with identical leading extents
    (``(..., T, K) @ (..., K, M)``); nothing is broadcast.
    """
    a = as_array(a)
    b = as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul operands must be matrices or equal-rank stacks: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    k = a.shape[-1]
    out_shape = a.shape[:-1] + b.shape[-1:]
    if k == 0:
        return np.zeros(out_shape)
    per_k = max(1, int(np.prod(out_shape)))
    if per_k >= _LOOP_MIN:
        out = a[..., :, 0:1] * b[..., 0:1, :]
        for i in range(1, k):
            out += a[..., :, i : i + 1] * b[..., i : i + 1, :]
        return out
    # Small outputs: add.accumulate is strictly sequential, so chunking over K
    # keeps the order ((p0 + p1) + p2) + ... exactly while amortizing overhead.
    step = max(1, _MATMUL_CHUNK // per_k)
    out = None
    for k0 in range(0, k, step):
        k1 = min(k, k0 + step)
        terms = a[..., :, k0:k1, None] * b[..., None, k0:k1, :]
        if out is not None:
            terms[..., 0, :] = out + terms[..., 0, :]
        out = np.add.accumulate(terms, axis=-2)[..., -1, :]
    return np.ascontiguousarray(out)


def softmax_rows(m, bias=None) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    ``bias`` is added to the logits first; it is broadcast against ``m``'s rows.
    """
    m = as_array(m)
    if bias is not None:
        m = m + bias
    if np.isnan(m).any():
        raise NumericError("softmax_rows received NaN logits")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def flatten_tokens(f: FeatureMap) -> TokenMatrix:
    s, n, h, w, c = f.shape
    return TokenMatrix(f.data.reshape(s * n * h * w, c), source_shape=f.shape)


def unflatten_tokens(t: TokenMatrix, shape=None) -> FeatureMap:
    shape = tuple(shape) if shape is not None else t.source_shape
    if shape is None:
        raise ShapeError("unflatten_tokens needs a source shape")
    s, n, h, w, c = shape
    if t.data.shape != (s * n * h * w, c):
        raise ShapeError(f"cannot unflatten {t.data.shape} into {shape}")
    return FeatureMap(t.data.reshape(shape))


class SeededRng:
    """Deterministic generator: PCG64 words -> 53-bit uniforms -> Box-Muller normals.

    Uniforms are ``(word >> 11) * 2**-53`` in [0, 1). Normals are produced in
    pairs from uniforms (u1, u2) as ``r*cos(2*pi*u2), r*sin(2*pi*u2)`` with
    ``r = sqrt(-2*log(1 - u1))``; an odd request drops the last sine.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.PCG64(self.seed)

    def uniform(self, size: int) -> np.ndarray:
        words = self._bits.random_raw(size)
        return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, size: int) -> np.ndarray:
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:size]

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers in [0, high) by flooring uniforms; fine for the small ranges used here."""
        return np.floor(self.uniform(size) * high).astype(np.int64)


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for ``(seed, *keys)`` via numpy's SeedSequence hash."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def seeded_normal(shape, seed: int) -> FeatureMap:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 5 or any(d <= 0 for d in shape):
        raise ShapeError(f"seeded_normal needs 5 positive extents, got {shape}")
    size = int(np.prod(shape))
    return FeatureMap(SeededRng(seed).normal(size).reshape(shape))


def normal_array(shape, seed: int) -> np.ndarray:
    """Plain-array variant of :func:`seeded_normal` for any rank."""
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return SeededRng(seed).normal(int(np.prod(shape))).reshape(shape)


def feature_map_bytes(f: FeatureMap) -> bytes:
    header = FEATURE_MAGIC + struct.pack("<5I", *f.shape)
    return header + f.data.astype("<f8").tobytes()


def feature_map_from_bytes(buf: bytes) -> FeatureMap:
    if len(buf) < 24 or buf[:4] != FEATURE_MAGIC:
        raise ValueError("not a FeatureMap file (bad magic)")
    shape = struct.unpack("<5I", buf[4:24])
    count = int(np.prod(shape))
    body = buf[24:]
    if len(body) != 8 * count:
        raise ShapeError(f"FeatureMap payload has {len(body)} bytes, expected {8 * count}")
    return FeatureMap(np.frombuffer(body, dtype="<f8").reshape(shape))


def write_feature_map(path, f: FeatureMap) -> None:
    Path(path).write_bytes(feature_map_bytes(f))


def read_feature_map(path) -> FeatureMap:
    return feature_map_from_bytes(Path(path).read_bytes())
