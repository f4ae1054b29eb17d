"""Finite-difference checks of the analytic TSA gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import backprop_to_features, temper, tsa_grad_wrt_similarity, tsa_loss
from .motion_mask import MotionMask, masked_tsa_loss
from .stss import SimilarityTensor, compute_stss
from .tensor_core import FeatureVolume, flatten_tokens, l2_normalize_channels


def central_difference(fn, x: np.ndarray, step: float = 1e-5, indices=None,
                       order: int = 2) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``; ``indices`` limits the flat entries.

    ``order=4`` uses the five-point stencil, whose O(step**4) truncation error
    allows larger steps and hence less round-off on nearly flat losses.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices

    def at(i, value):
        flat[i] = value
        return fn(x)

    for i in idx:
        orig = flat[i]
        if order == 2:
            gflat[i] = (at(i, orig + step) - at(i, orig - step)) / (2 * step)
        else:
            gflat[i] = (8 * (at(i, orig + step) - at(i, orig - step))
                        - (at(i, orig + 2 * step) - at(i, orig - 2 * step))) / (12 * step)
        flat[i] = orig
    return grad


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def random_volume(rng, frames, height, width, channels) -> FeatureVolume:
    return FeatureVolume(rng.standard_normal((frames, height, width, channels)))


def roundoff_floor(n_entries: int, tau: float, step: float, order: int = 2) -> float:
    """Rough norm of the float64 round-off in a finite-difference gradient.

    Log-probabilities reach about 2 / tau in magnitude, so each loss value
    carries an absolute error near eps * 2 / tau; the difference quotient
    divides that by the step.
    """
    per_entry = np.finfo(np.float64).eps * (1.0 + 2.0 / tau) / step
    if order == 4:
        per_entry *= 1.5
    return float(np.sqrt(n_entries) * per_entry)


@dataclass
class CheckResult:
    name: str
    rel_error: float
    size: tuple
    grad_norm: float = float("nan")
    noise: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol

    def resolvable(self, tol: float) -> bool:
        """False when round-off alone could exceed ``tol`` relative to the gradient."""
        return self.noise < tol * self.grad_norm


def check_similarity_gradient(rng, frames, height, width, tau, step=1e-5, channels=4,
                              max_entries=None) -> CheckResult:
    """Analytic d(TSA)/d(student similarity) against central differences."""
    teacher = compute_stss(l2_normalize_channels(random_volume(rng, frames, height, width,
                                                               channels)))
    student = compute_stss(l2_normalize_channels(random_volume(rng, frames, height, width,
                                                               channels)))
    pt = temper(teacher, tau)
    analytic = tsa_grad_wrt_similarity(pt, temper(student, tau))

    def loss(r):
        return tsa_loss(pt, temper(SimilarityTensor(r, frames, height, width), tau)).value

    indices = None
    size = student.matrix.size
    if max_entries is not None and size > max_entries:
        indices = np.sort(rng.choice(size, max_entries, replace=False))
    numeric = central_difference(loss, student.matrix, step, indices)
    a = analytic.reshape(-1)
    n = numeric.reshape(-1)
    if indices is not None:
        a, n = a[indices], n[indices]
    return CheckResult("similarity", relative_error(a, n), (frames, height, width),
                       float(np.linalg.norm(a)), roundoff_floor(a.size, tau, step))


def check_feature_gradient(rng, frames, height, width, channels, tau, step=1e-5,
                           mask: MotionMask | None = None, order: int = 2) -> CheckResult:
    """Analytic d(TSA)/d(raw student features) against central differences."""
    teacher = compute_stss(l2_normalize_channels(random_volume(rng, frames, height, width,
                                                               channels)))
    pt = temper(teacher, tau)
    raw = rng.standard_normal((frames * height * width, channels))

    def report(x):
        vol = l2_normalize_channels(FeatureVolume(x.reshape(frames, height, width, channels)))
        ps = temper(compute_stss(vol), tau)
        rep = tsa_loss(pt, ps) if mask is None else masked_tsa_loss(pt, ps, mask)
        return rep, vol

    rep, vol = report(raw)
    analytic = backprop_to_features(rep.grad, flatten_tokens(vol), raw)
    numeric = central_difference(lambda x: report(x)[0].value, raw, step, order=order)
    return CheckResult("features", relative_error(analytic, numeric),
                       (frames, height, width, channels), float(np.linalg.norm(analytic)),
                       roundoff_floor(raw.size, tau, step, order))
