"""Tempered correspondence distributions and the TSA alignment loss.

A similarity row of query ``i`` restricted to frame ``f`` becomes a
distribution over that frame's HW positions via ``softmax(R / tau)``. The
loss is the mean KL divergence from teacher to student distributions; the
teacher side is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stss import SimilarityTensor

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class CorrespondenceField:
    """Per-query, per-frame log-probabilities, shape [Q, F, HW].

    Log-space storage keeps KL terms finite at very small temperatures.
    Positions removed with ``exclude_self`` carry ``-inf`` (probability 0).
    """

    log_probs: np.ndarray
    tau: float
    height: int
    width: int
    rows: np.ndarray | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.log_probs.ndim != 3 or self.log_probs.shape[2] != self.height * self.width:
            raise ValueError(f"log_probs shape {self.log_probs.shape} does not match HW")

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def frames(self) -> int:
        return self.log_probs.shape[1]

    @property
    def hw(self) -> int:
        return self.log_probs.shape[2]

    @property
    def n_tokens(self) -> int:
        return self.frames * self.hw

    @property
    def query_ids(self) -> np.ndarray:
        return np.arange(self.n_tokens) if self.rows is None else np.asarray(self.rows)


@dataclass
class LossReport:
    """Scalar loss with its per-term breakdown and gradients.

    ``grad`` is the gradient w.r.t. the student similarity rows listed in
    ``rows`` (all N tokens when ``rows`` is None), shaped like the student
    field. ``feature_grad`` is filled in when a caller backpropagates to
    features. ``n_terms`` counts the KL (or elementwise) terms evaluated.
    """

    value: float
    terms: np.ndarray
    grad: np.ndarray | None = None
    rows: np.ndarray | None = None
    n_terms: int = 0
    feature_grad: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    z = logits - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def temper(r: SimilarityTensor, tau: float = 0.1) -> CorrespondenceField:
    """Softmax of each per-frame similarity slice at temperature ``tau``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = r.per_frame / tau
    if r.exclude_self:
        if r.hw < 2:
            raise ValueError("exclude_self needs at least two positions per frame")
        logits = logits.copy()
        ids = r.query_ids
        logits[np.arange(len(ids)), ids // r.hw, ids % r.hw] = -np.inf
    return CorrespondenceField(_log_softmax(logits), float(tau), r.height, r.width, r.rows)


def _check_distribution(p: np.ndarray, name: str) -> None:
    s = float(np.sum(p))
    if abs(s - 1.0) > NORMALIZATION_TOL or np.any(p < 0):
        raise ValueError(f"{name} is not a probability distribution (sum {s})")


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats, with the convention 0 * log(0 / q) = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    with np.errstate(divide="ignore"):
        logp = np.log(np.where(support, p, 1.0))
        logq = np.log(np.where(support, q, 1.0))
    return float(np.sum(np.where(support, p * (logp - logq), 0.0)))


def _kl_terms(teacher_logp: np.ndarray, student_logp: np.ndarray) -> np.ndarray:
    p = np.exp(teacher_logp)
    with np.errstate(invalid="ignore"):
        diff = teacher_logp - student_logp
    return np.sum(np.where(p > 0, p * diff, 0.0), axis=-1)


def _check_pair(teacher: CorrespondenceField, student: CorrespondenceField) -> None:
    if teacher.log_probs.shape != student.log_probs.shape:
        raise ValueError(
            f"field shapes differ: {teacher.log_probs.shape} vs {student.log_probs.shape}"
        )
    if (teacher.height, teacher.width) != (student.height, student.width):
        raise ValueError("fields live on different spatial grids")
    if teacher.tau != student.tau:
        raise ValueError(f"temperature mismatch: {teacher.tau} vs {student.tau}")
    if not np.array_equal(teacher.query_ids, student.query_ids):
        raise ValueError("fields cover different query tokens")


def _positions(fld: CorrespondenceField, token_ids) -> np.ndarray:
    ids = fld.query_ids
    if fld.rows is None:
        return np.asarray(token_ids, dtype=np.intp)
    lookup = {int(t): k for k, t in enumerate(ids)}
    try:
        return np.array([lookup[int(t)] for t in token_ids], dtype=np.intp)
    except KeyError as exc:
        raise IndexError(f"token {exc.args[0]} is not a query of this field") from None


def aligned_kl(
    teacher: CorrespondenceField,
    student: CorrespondenceField,
    token_ids=None,
    *,
    with_grad: bool = True,
) -> LossReport:
    """Mean teacher-to-student KL over the queries ``token_ids``.

    ``token_ids=None`` uses every query in the fields. Only the selected
    queries' KL terms are evaluated. The returned gradient covers the
    student similarity rows of the selected queries and already includes
    the ``1 / (Q * F)`` averaging factor.
    """
    _check_pair(teacher, student)
    if token_ids is None:
        pos = np.arange(teacher.log_probs.shape[0])
        ids = teacher.query_ids
    else:
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.ndim != 1 or len(ids) == 0:
            raise ValueError("query selection is empty")
        if ids.min() < 0 or ids.max() >= teacher.n_tokens:
            raise IndexError("query index out of range")
        pos = _positions(teacher, ids)
    t = teacher.log_probs[pos]
    s = student.log_probs[pos]
    terms = _kl_terms(t, s)
    value = float(np.mean(terms))
    grad = None
    if with_grad:
        scale = student.tau * terms.shape[0] * terms.shape[1]
        grad = (np.exp(s) - np.exp(t)) / scale
    return LossReport(value=value, terms=terms, grad=grad, rows=ids, n_terms=terms.size)


def tsa_loss(teacher: CorrespondenceField, student: CorrespondenceField) -> LossReport:
    """Mean KL(teacher || student) over every query and frame."""
    report = aligned_kl(teacher, student)
    if teacher.rows is None:
        report.rows = None
    return report


def tsa_grad_wrt_similarity(teacher: CorrespondenceField, student: CorrespondenceField) -> np.ndarray:
    """Gradient of :func:`tsa_loss` w.r.t. the student similarities, [Q, F, HW].

    Equals ``(P_student - P_teacher) / (tau * Q * F)``.
    """
    _check_pair(teacher, student)
    q, f, _ = student.log_probs.shape
    return (student.probs - teacher.probs) / (student.tau * q * f)


def backprop_to_features(
    grad_similarity,
    student_features,
    raw_features,
    *,
    rows=None,
) -> np.ndarray:
    """Chain a similarity gradient back to raw (unnormalized) student features.

    With ``R = E E^T`` over unit rows ``E``, the gradient w.r.t. ``E`` is
    ``(G + G^T) E``; the normalization Jacobian ``(I - e e^T) / |e|`` then
    maps it onto the raw features. ``grad_similarity`` is [N, N] (or
    [N, F, HW]); pass ``rows`` when it only covers those query rows.
    Degenerate (zero) raw fibers receive zero gradient.
    """
    unit = np.asarray(student_features)
    raw = np.asarray(raw_features)
    if unit.ndim != 2 or unit.shape != raw.shape:
        raise ValueError(f"feature shapes differ: {unit.shape} vs {raw.shape}")
    n = unit.shape[0]
    g = np.asarray(grad_similarity)
    g = g.reshape(g.shape[0], -1)
    if g.shape[1] != n:
        raise ValueError(f"gradient has {g.shape[1]} columns, expected {n}")
    if rows is None:
        if g.shape[0] != n:
            raise ValueError(f"gradient has {g.shape[0]} rows, expected {n}")
        d_unit = (g + g.T) @ unit
    else:
        rows = np.asarray(rows, dtype=np.intp)
        if g.shape[0] != len(rows):
            raise ValueError("gradient rows do not match the row index")
        d_unit = g.T @ unit[rows]
        np.add.at(d_unit, rows, g @ unit)
    norms = np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
    ok = norms >= 1e-12
    radial = np.sum(unit * d_unit, axis=1, keepdims=True)
    return np.where(ok, (d_unit - unit * radial) / np.where(ok, norms, 1.0), 0.0)


def entropy(fld: CorrespondenceField) -> np.ndarray:
    """Shannon entropy (nats) of every per-frame distribution, [Q, F]."""
    p = fld.probs
    with np.errstate(invalid="ignore"):
        return -np.sum(np.where(p > 0, p * fld.log_probs, 0.0), axis=-1)
