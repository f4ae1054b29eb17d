"""Motion-saliency masking: tubelet tokens, temporal differences, top-k% masks.

The masked loss restricts TSA to the query tokens whose tubelets change the
most between consecutive frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .correspondence import CorrespondenceField, LossReport, aligned_kl


@dataclass(frozen=True)
class TubeletGrid:
    """Video split into non-overlapping (pt, ph, pw) tubelets.

    ``tokens`` is [F, H, W, D] with D = pt * ph * pw * channels. Inside a
    token, pixels are ordered (dt, dh, dw, channel), row-major.
    """

    tokens: np.ndarray
    patch: tuple[int, int, int]

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.tokens.shape[:3]


def patchify(video, pt: int = 1, ph: int = 1, pw: int = 1) -> TubeletGrid:
    v = np.asarray(video)
    if v.ndim != 4:
        raise ValueError(f"video must be [F', H', W', channels], got shape {v.shape}")
    fp, hp, wp, c = v.shape
    if min(pt, ph, pw) < 1:
        raise ValueError("patch sizes must be positive")
    if fp % pt or hp % ph or wp % pw:
        raise ValueError(
            f"video {v.shape[:3]} is not divisible by tubelet size {(pt, ph, pw)}"
        )
    f, h, w = fp // pt, hp // ph, wp // pw
    t = v.reshape(f, pt, h, ph, w, pw, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return TubeletGrid(t.reshape(f, h, w, pt * ph * pw * c), (pt, ph, pw))


def unpatchify(grid: TubeletGrid, channels: int = 3) -> np.ndarray:
    pt, ph, pw = grid.patch
    f, h, w, d = grid.tokens.shape
    if d != pt * ph * pw * channels:
        raise ValueError("token dimension does not match patch size and channel count")
    t = grid.tokens.reshape(f, h, w, pt, ph, pw, channels).transpose(0, 3, 1, 4, 2, 5, 6)
    return t.reshape(f * pt, h * ph, w * pw, channels)


def temporal_saliency(grid: TubeletGrid) -> np.ndarray:
    """L1 norm of each token's change from the previous frame, [F, H, W].

    The first frame has no predecessor and copies the second frame's value.
    """
    y = np.asarray(grid.tokens, dtype=np.float64)
    if y.shape[0] < 2:
        raise ValueError("temporal saliency needs at least two token frames")
    delta = np.empty(y.shape[:3])
    delta[1:] = np.sum(np.abs(y[1:] - y[:-1]), axis=-1)
    delta[0] = delta[1]
    return delta


def retained_count(k, hw: int) -> int:
    """ceil(k / 100 * hw), evaluated exactly."""
    return math.ceil(Fraction(str(k)) * hw / 100)


@dataclass(frozen=True)
class MotionMask:
    """Per-frame retained tokens of a top-k% saliency selection.

    ``retained[f]`` holds the spatial indices (h * W + w) kept in frame f,
    in descending saliency order. ``thresholds[f]`` is the smallest
    retained saliency of that frame.
    """

    retained: tuple[np.ndarray, ...]
    saliency: np.ndarray
    thresholds: np.ndarray
    k: float

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.saliency.shape

    @property
    def indices(self) -> np.ndarray:
        """Sorted flat token ids f * HW + h * W + w of every retained token."""
        f, h, w = self.saliency.shape
        ids = [fi * h * w + np.asarray(r) for fi, r in enumerate(self.retained)]
        return np.sort(np.concatenate(ids))

    def __len__(self) -> int:
        return sum(len(r) for r in self.retained)

    def as_volume(self) -> np.ndarray:
        """0/1 volume of shape [F, H, W]."""
        vol = np.zeros(self.saliency.size)
        vol[self.indices] = 1.0
        return vol.reshape(self.saliency.shape)


def build_mask(delta, k: float = 20) -> MotionMask:
    """Keep the ceil(k% * HW) most salient tokens of every frame.

    Ties go to the lower spatial index, so masks are nested in ``k``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 3:
        raise ValueError(f"saliency must be [F, H, W], got shape {delta.shape}")
    if not 0 < k <= 100:
        raise ValueError(f"k must lie in (0, 100], got {k}")
    f = delta.shape[0]
    hw = delta.shape[1] * delta.shape[2]
    keep = retained_count(k, hw)
    flat = delta.reshape(f, hw)
    retained = []
    thresholds = np.empty(f)
    for fi in range(f):
        order = np.argsort(-flat[fi], kind="stable")[:keep]
        retained.append(order)
        thresholds[fi] = flat[fi, order[-1]]
    return MotionMask(tuple(retained), delta, thresholds, float(k))


def resample_mask(mask: MotionMask, frames: int, height: int, width: int) -> MotionMask:
    """Map a mask onto another token grid by nearest-neighbour lookup.

    A target token is retained when the source token it maps to is.
    """
    sf, sh, sw = mask.grid
    if (sf, sh, sw) == (frames, height, width):
        return mask
    fi = (np.arange(frames) * sf) // frames
    hi = (np.arange(height) * sh) // height
    wi = (np.arange(width) * sw) // width
    src = mask.as_volume()[np.ix_(fi, hi, wi)]
    sal = mask.saliency[np.ix_(fi, hi, wi)]
    retained, thresholds = [], np.empty(frames)
    for f in range(frames):
        flat_keep = src[f].reshape(-1) > 0
        flat_sal = sal[f].reshape(-1)
        order = np.argsort(-flat_sal, kind="stable")
        kept = order[flat_keep[order]]
        retained.append(kept)
        thresholds[f] = flat_sal[kept[-1]] if len(kept) else np.inf
    return MotionMask(tuple(retained), sal, thresholds, mask.k)


def masked_tsa_loss(
    teacher: CorrespondenceField,
    student: CorrespondenceField,
    mask: MotionMask,
    *,
    with_grad: bool = True,
) -> LossReport:
    """TSA restricted to masked queries: mean KL over |M| * F terms.

    For full fields the gradient is returned densely with exact zeros on
    unmasked query rows; for row-block fields it covers the masked rows.
    """
    ids = mask.indices
    if len(ids) == 0:
        raise ValueError("motion mask is empty")
    if mask.saliency.size != teacher.n_tokens:
        raise ValueError(
            f"mask covers {mask.saliency.size} tokens, fields have {teacher.n_tokens}"
        )
    report = aligned_kl(teacher, student, ids, with_grad=with_grad)
    if with_grad and teacher.rows is None:
        dense = np.zeros_like(student.log_probs)
        dense[ids] = report.grad
        report.grad = dense
        report.rows = None
        report.extras["masked_rows"] = ids
    return report
