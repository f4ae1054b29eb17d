"""Hand-written forward/backward passes for the toy networks.

Activations are channels-last volumes [F, H, W, C]. Every ``*_backward``
takes the upstream gradient plus what its forward returned and gives back
the input gradient and parameter gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _triple(x) -> tuple[int, int, int]:
    if isinstance(x, int):
        return (x, x, x)
    return tuple(int(v) for v in x)


def conv3d_forward(x, w, b, stride=1, pad=1, pad_mode="constant"):
    """3-D convolution (cross-correlation) of [F, H, W, Cin] with w [kt, kh, kw, Cin, Cout].

    Returns ``(y, windows)``; ``windows`` is what :func:`conv3d_backward` needs.
    """
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(pad)
    kt, kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    xp = np.pad(x, ((pt, pt), (ph, ph), (pw, pw), (0, 0)), mode=pad_mode)
    win = sliding_window_view(xp, (kt, kh, kw), axis=(0, 1, 2))[::st, ::sh, ::sw]
    # win: [Fo, Ho, Wo, Cin, kt, kh, kw]
    y = np.tensordot(win, w, axes=([4, 5, 6, 3], [0, 1, 2, 3]))
    if b is not None:
        y = y + b
    return y, win


def conv3d_backward(dy, win, x_shape, w, stride=1, pad=1):
    """Gradients of :func:`conv3d_forward` (zero padding only)."""
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(pad)
    kt, kh, kw, cin, cout = w.shape
    fo, ho, wo, _ = dy.shape
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2]))  # [Cin, kt, kh, kw, Cout]
    dw = dw.transpose(1, 2, 3, 0, 4)
    db = dy.sum(axis=(0, 1, 2))
    f, h, wd, _ = x_shape
    dxp = np.zeros((f + 2 * pt, h + 2 * ph, wd + 2 * pw, cin), dtype=dy.dtype)
    for a in range(kt):
        for c in range(kh):
            for e in range(kw):
                dxp[a:a + st * fo:st, c:c + sh * ho:sh, e:e + sw * wo:sw] += dy @ w[a, c, e].T
    dx = dxp[pt:pt + f, ph:ph + h, pw:pw + wd]
    return dx, dw, db


def linear_forward(x, w, b):
    y = x @ w
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, w):
    c = x.shape[-1]
    dx = dy @ w.T
    dw = x.reshape(-1, c).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dw, db


def activation(name: str, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "linear":
        return a
    raise ValueError(f"unknown activation {name!r}")


def activation_backward(name: str, dy, out):
    """Backward through an activation given its output ``out``."""
    if name == "tanh":
        return dy * (1.0 - out * out)
    if name == "linear":
        return dy
    raise ValueError(f"unknown activation {name!r}")


def avg_pool(x, patch):
    """Mean over non-overlapping (pt, ph, pw) blocks of [F, H, W, C]."""
    pt, ph, pw = _triple(patch)
    f, h, w, c = x.shape
    return x.reshape(f // pt, pt, h // ph, ph, w // pw, pw, c).mean(axis=(1, 3, 5))


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal embedding of an integer timestep, length ``dim``."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    ang = float(t) * freqs
    emb = np.concatenate([np.cos(ang), np.sin(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb
