"""Comparison alignment losses: patchwise feature cosine (REPA) and raw-STSS L1."""

from __future__ import annotations

import enum

import numpy as np

from .correspondence import LossReport
from .stss import SimilarityTensor
from .tensor_core import FeatureVolume


class AlignmentLossKind(enum.Enum):
    REPA = "repa"
    STSS_L1 = "stss-l1"
    TSA = "tsa"
    M_TSA = "m-tsa"

    @classmethod
    def parse(cls, name: str) -> "AlignmentLossKind":
        key = name.strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown alignment kind {name!r}; expected one of "
                         + ", ".join(k.value for k in cls))


def repa_loss(teacher: FeatureVolume, student: FeatureVolume) -> LossReport:
    """Negative mean cosine similarity between co-located tokens.

    Averages over frames and space. ``feature_grad`` is the gradient w.r.t.
    the raw student features, shaped [F, H, W, C].
    """
    a = np.asarray(teacher.data, dtype=np.float64)
    b = np.asarray(student.data, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    ua = np.where(ok, a / np.where(ok, na, 1.0), 0.0)
    ub = np.where(ok, b / np.where(ok, nb, 1.0), 0.0)
    cos = np.sum(ua * ub, axis=-1)
    n = cos.size
    # d(-cos)/db = -(ua - ub * cos) / |b| / n
    grad = np.where(ok, -(ua - ub * cos[..., None]) / np.where(ok, nb, 1.0), 0.0) / n
    return LossReport(value=-float(np.mean(cos)), terms=-cos, n_terms=n, feature_grad=grad)


def stss_l1_loss(teacher: SimilarityTensor, student: SimilarityTensor) -> LossReport:
    """Mean absolute difference of raw similarity entries.

    ``grad`` is sign(student - teacher) / N**2 over the [Q, N] matrix,
    i.e. zero wherever the entries agree.
    """
    a, b = teacher.matrix, student.matrix
    if a.shape != b.shape:
        raise ValueError(f"similarity shapes differ: {a.shape} vs {b.shape}")
    if teacher.rows is not None or student.rows is not None:
        if not np.array_equal(teacher.query_ids, student.query_ids):
            raise ValueError("similarity tensors cover different queries")
    diff = b - a
    absdiff = np.abs(diff)
    grad = np.sign(diff) / diff.size
    return LossReport(
        value=float(np.mean(absdiff)),
        terms=absdiff,
        grad=grad,
        rows=student.rows,
        n_terms=diff.size,
    )
