"""Spatio-temporal self-similarity (STSS) of a feature volume."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    FeatureVolume,
    flatten_tokens,
    l2_normalize_channels,
    matmul_transpose,
    pairwise_dots,
)

log = logging.getLogger(__name__)

# Number of times compute_stss had to normalize its input itself.
auto_normalized = 0


@dataclass(frozen=True)
class SimilarityTensor:
    """Cosine similarities between query tokens and all N tokens.

    ``matrix`` is [Q, N]. For the full tensor Q == N and ``rows`` is None;
    a row block keeps the token ids of its queries in ``rows``.
    ``exclude_self`` asks :func:`tsalign.correspondence.temper` to drop
    each query's match with itself.
    """

    matrix: np.ndarray
    frames: int
    height: int
    width: int
    rows: np.ndarray | None = None
    exclude_self: bool = False

    def __post_init__(self):
        n = self.frames * self.height * self.width
        if self.matrix.ndim != 2 or self.matrix.shape[1] != n:
            raise ValueError(f"similarity matrix {self.matrix.shape} does not match N={n}")
        q = n if self.rows is None else len(self.rows)
        if self.matrix.shape[0] != q:
            raise ValueError(f"similarity matrix has {self.matrix.shape[0]} rows, expected {q}")

    @property
    def n_tokens(self) -> int:
        return self.matrix.shape[1]

    @property
    def hw(self) -> int:
        return self.height * self.width

    @property
    def query_ids(self) -> np.ndarray:
        return np.arange(self.n_tokens) if self.rows is None else np.asarray(self.rows)

    @property
    def per_frame(self) -> np.ndarray:
        """View as [Q, F, HW]."""
        return self.matrix.reshape(self.matrix.shape[0], self.frames, self.hw)


def _unit_tokens(v: FeatureVolume) -> np.ndarray:
    global auto_normalized
    if not v.normalized:
        auto_normalized += 1
        log.warning("compute_stss received an unnormalized volume; normalizing")
        v = l2_normalize_channels(v)
    return flatten_tokens(v)


def compute_stss(v: FeatureVolume, *, exclude_self: bool = False) -> SimilarityTensor:
    """Dense N x N cosine-similarity tensor of ``v``'s tokens."""
    e = _unit_tokens(v)
    return SimilarityTensor(matmul_transpose(e), v.frames, v.height, v.width,
                            exclude_self=exclude_self)


def compute_stss_rows(v: FeatureVolume, rows, *, exclude_self: bool = False) -> SimilarityTensor:
    """Similarity rows for the query tokens ``rows`` only ([len(rows), N]).

    Memory scales with ``len(rows) * N`` instead of ``N**2``.
    """
    e = _unit_tokens(v)
    rows = np.asarray(rows, dtype=np.intp)
    if rows.ndim != 1 or len(rows) == 0:
        raise ValueError("rows must be a non-empty 1-D index array")
    if rows.min() < 0 or rows.max() >= e.shape[0]:
        raise IndexError("row index out of range")
    return SimilarityTensor(pairwise_dots(e[rows], e), v.frames, v.height, v.width, rows=rows,
                            exclude_self=exclude_self)


def frame_slice(r: SimilarityTensor, i: int, f: int) -> np.ndarray:
    """Similarities of query token ``i`` against the HW tokens of frame ``f``."""
    if not 0 <= i < r.n_tokens:
        raise IndexError(f"query {i} out of range [0, {r.n_tokens})")
    if not 0 <= f < r.frames:
        raise IndexError(f"frame {f} out of range [0, {r.frames})")
    if r.rows is None:
        pos = i
    else:
        hit = np.flatnonzero(np.asarray(r.rows) == i)
        if len(hit) == 0:
            raise IndexError(f"query {i} is not part of this row block")
        pos = int(hit[0])
    return r.per_frame[pos, f]
