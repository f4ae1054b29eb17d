"""Dense array plumbing shared by every other module.

Tensors are plain numpy arrays. This module adds the validation the rest of
the package relies on (finite values, fixed dtypes) plus the handful of
feature-volume operations: channel L2 normalization, token flattening and
the Gram product used for self-similarity.

Token index convention: a volume of shape [F, H, W, C] flattens to [N, C]
with ``i = f * (H * W) + h * W + w``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float64
DEGENERATE_NORM = 1e-12

# Extra finiteness checks after every op; enable with TSALIGN_DEBUG=1.
DEBUG = os.environ.get("TSALIGN_DEBUG", "") not in ("", "0")


class NonFiniteError(ValueError):
    """Raised when a tensor contains NaN or Inf."""


def resolve_dtype(precision) -> np.dtype:
    if precision is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_tensor(values, dtype=None, *, name: str = "tensor") -> np.ndarray:
    """Validate ``values`` and return a read-only float array.

    Rejects empty extents and non-finite entries. ``dtype`` may be a numpy
    dtype or one of ``"f32"``/``"f64"``; floating inputs keep their dtype
    when it is not given.
    """
    arr = np.asarray(values)
    if dtype is None:
        dt = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(DEFAULT_DTYPE)
    else:
        dt = resolve_dtype(dtype)
    arr = np.array(arr, dtype=dt, copy=True)
    if arr.ndim == 0:
        raise ValueError(f"{name}: rank-0 tensors are not supported")
    if any(s < 1 for s in arr.shape):
        raise ValueError(f"{name}: every extent must be positive, got {arr.shape}")
    check_finite(arr, name)
    arr.setflags(write=False)
    return arr


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{name}: {bad} non-finite value(s)")
    return arr


def _debug_check(arr: np.ndarray, name: str) -> np.ndarray:
    if DEBUG:
        check_finite(arr, name)
    return arr


@dataclass(frozen=True)
class FeatureVolume:
    """Features laid out as [frames, height, width, channels].

    ``degenerate`` counts channel fibers that were (numerically) zero when
    the volume was normalized; ``normalized`` records whether
    :func:`l2_normalize_channels` produced it.
    """

    data: np.ndarray
    normalized: bool = False
    degenerate: int = 0

    def __post_init__(self):
        data = self.data
        if (
            not isinstance(data, np.ndarray)
            or data.dtype not in (np.float32, np.float64)
            or data.flags.writeable
        ):
            data = as_tensor(data, name="FeatureVolume")
        else:
            check_finite(data, "FeatureVolume")
        if data.ndim != 4:
            raise ValueError(f"FeatureVolume needs rank 4 [F,H,W,C], got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def n_tokens(self) -> int:
        return self.frames * self.height * self.width

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


def l2_normalize_channels(v: FeatureVolume) -> FeatureVolume:
    """Scale every (f, h, w) channel fiber to unit Euclidean norm.

    Fibers with norm below 1e-12 are set to zero and counted in the
    returned volume's ``degenerate`` field.
    """
    x = v.data
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    zero = norms < DEGENERATE_NORM
    safe = np.where(zero, 1.0, norms)
    out = np.where(zero, 0.0, x / safe).astype(x.dtype, copy=False)
    _debug_check(out, "l2_normalize_channels")
    out.setflags(write=False)
    return FeatureVolume(out, normalized=True, degenerate=int(np.count_nonzero(zero)))


def flatten_tokens(v: FeatureVolume) -> np.ndarray:
    """Return the [N, C] token matrix, N = F*H*W, frame-major."""
    return v.data.reshape(v.n_tokens, v.channels)


def unflatten_tokens(tokens: np.ndarray, frames: int, height: int, width: int) -> FeatureVolume:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != frames * height * width:
        raise ValueError(
            f"cannot unflatten {tokens.shape} into grid ({frames}, {height}, {width})"
        )
    return FeatureVolume(tokens.reshape(frames, height, width, tokens.shape[1]))


def token_index(f: int, h: int, w: int, height: int, width: int) -> int:
    return f * height * width + h * width + w


def pairwise_dots(a: np.ndarray, b: np.ndarray, chunk_elems: int = 1 << 22) -> np.ndarray:
    """``out[i, j] = dot(a[i], b[j])`` with one fixed reduction per pair.

    Every entry is summed the same way regardless of where the rows sit, so
    results are exactly symmetric and exactly permutation-equivariant (a
    BLAS product is not). Rows are processed in chunks of about
    ``chunk_elems`` intermediate values.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"cannot take row dot products of {a.shape} and {b.shape}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.result_type(a, b))
    step = max(1, chunk_elems // max(1, b.size))
    for s in range(0, a.shape[0], step):
        out[s:s + step] = np.sum(a[s:s + step, None, :] * b[None, :, :], axis=-1)
    return out


def matmul_transpose(a: np.ndarray) -> np.ndarray:
    """Gram matrix ``a @ a.T`` of a rank-2 array."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"matmul_transpose expects a rank-2 array, got rank {a.ndim}")
    return _debug_check(pairwise_dots(a, a), "matmul_transpose")
