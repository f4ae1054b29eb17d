"""Toy networks: frozen surrogate encoder, tapped denoiser and projector.

Parameters live in plain ``dict[str, np.ndarray]`` so optimizers and
checkpoints can treat every model the same way.
"""

from __future__ import annotations

import numpy as np

from . import layers as L


def _init(rng, shape, fan_in, gain=1.0, dtype=np.float64):
    return (gain / np.sqrt(fan_in) * rng.standard_normal(shape)).astype(dtype)


class SurrogateEncoder:
    """Frozen stand-in for a video foundation model.

    Stage 1 is a strided tubelet convolution (kernel = stride = ``patch``),
    stage 2 a 3x3x3 convolution with edge padding. Pixel values in [0, 1]
    are mapped to [-1, 1] first. Parameters come from a fixed seed and are
    never updated.
    """

    def __init__(self, channels=16, hidden=32, patch=(2, 2, 2), seed=1234, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.patch = tuple(patch)
        pt, ph, pw = self.patch
        fan1 = pt * ph * pw * 3
        self.params = {
            "w1": _init(rng, (pt, ph, pw, 3, hidden), fan1, 2.0, dtype),
            "b1": (0.1 * rng.standard_normal(hidden)).astype(dtype),
            "w2": _init(rng, (3, 3, 3, hidden, channels), 27 * hidden, 1.5, dtype),
            "b2": (0.1 * rng.standard_normal(channels)).astype(dtype),
        }
        for p in self.params.values():
            p.setflags(write=False)

    def __call__(self, video) -> np.ndarray:
        x = 2.0 * np.asarray(video, dtype=self.params["w1"].dtype) - 1.0
        p = self.params
        h, _ = L.conv3d_forward(x, p["w1"], p["b1"], stride=self.patch, pad=0)
        h = np.tanh(h)
        e, _ = L.conv3d_forward(h, p["w2"], p["b2"], stride=1, pad=1, pad_mode="edge")
        return np.tanh(e)


class ToyDenoiser:
    """Stack of 3-D convolutions predicting the noise of a latent volume.

    Layer 1 maps the latent to ``hidden`` channels and adds the
    timestep-plus-class embedding; layers 2..L-1 are residual
    ``h + act(conv(h))`` blocks; layer L is a linear convolution back to
    the latent channels. The tap returns the output of layer ``tap_layer``.
    """

    def __init__(self, latent_channels=3, hidden=32, layers=4, tap_layer=2, kernel=3,
                 activation="tanh", emb_dim=16, n_classes=4, seed=11, dtype=np.float64):
        if layers < 2:
            raise ValueError("the denoiser needs at least two layers")
        if not 1 <= tap_layer <= layers:
            raise ValueError(f"tap layer {tap_layer} outside [1, {layers}]")
        rng = np.random.default_rng(seed)
        self.layers = layers
        self.tap_layer = tap_layer
        self.kernel = kernel
        self.pad = kernel // 2
        self.act = activation
        self.emb_dim = emb_dim
        k3 = kernel ** 3
        p = {
            "emb.class": (0.1 * rng.standard_normal((n_classes, emb_dim))).astype(dtype),
            "emb.w": _init(rng, (emb_dim, hidden), emb_dim, 1.0, dtype),
        }
        for j in range(1, layers + 1):
            cin = latent_channels if j == 1 else hidden
            cout = latent_channels if j == layers else hidden
            gain = 0.5 if 1 < j < layers else 1.0
            p[f"conv{j}.w"] = _init(rng, (kernel,) * 3 + (cin, cout), k3 * cin, gain, dtype)
            p[f"conv{j}.b"] = np.zeros(cout, dtype=dtype)
        self.params = p

    @property
    def tap_channels(self) -> int:
        return self.params[f"conv{self.tap_layer}.w"].shape[-1]

    def embedding(self, t, cond) -> np.ndarray:
        p = self.params
        dtype = p["emb.w"].dtype
        return L.timestep_embedding(t, self.emb_dim).astype(dtype) + p["emb.class"][cond]

    def forward(self, z, t, cond):
        """Return ``(eps_prediction, tap, cache)``."""
        p = self.params
        emb = self.embedding(t, cond)
        cache = {"emb": emb, "cond": cond, "inputs": [], "wins": [], "outs": []}
        h = z
        tap = None
        for j in range(1, self.layers + 1):
            a, win = L.conv3d_forward(h, p[f"conv{j}.w"], p[f"conv{j}.b"], 1, self.pad)
            cache["inputs"].append(h)
            cache["wins"].append(win)
            if j == 1:
                a = a + emb @ p["emb.w"]
                out = L.activation(self.act, a)
            elif j < self.layers:
                out = L.activation(self.act, a)
            else:
                out = a
            cache["outs"].append(out)
            h = h + out if 1 < j < self.layers else out
            if j == self.tap_layer:
                tap = h
        return h, tap, cache

    def pre_activations(self, z, t, cond) -> list:
        """Pre-nonlinearity activations of every layer (for diagnostics/tests)."""
        p = self.params
        emb = self.embedding(t, cond)
        pre, h = [], z
        for j in range(1, self.layers + 1):
            a, _ = L.conv3d_forward(h, p[f"conv{j}.w"], p[f"conv{j}.b"], 1, self.pad)
            if j == 1:
                a = a + emb @ p["emb.w"]
            pre.append(a)
            out = L.activation(self.act, a) if j < self.layers else a
            h = h + out if 1 < j < self.layers else out
        return pre

    def backward(self, cache, d_out, d_tap=None) -> dict:
        """Parameter gradients given d(loss)/d(prediction) and optionally d(loss)/d(tap)."""
        p = self.params
        grads = {}
        dh = d_out
        for j in range(self.layers, 0, -1):
            if j == self.tap_layer and d_tap is not None:
                dh = dh + d_tap
            out = cache["outs"][j - 1]
            if j == self.layers:
                da = dh
            else:
                da = L.activation_backward(self.act, dh, out)
            dx, dw, db = L.conv3d_backward(da, cache["wins"][j - 1], cache["inputs"][j - 1].shape,
                                           p[f"conv{j}.w"], 1, self.pad)
            grads[f"conv{j}.w"] = dw
            grads[f"conv{j}.b"] = db
            if j == 1:
                d_emb_out = da.sum(axis=(0, 1, 2))
                grads["emb.w"] = np.outer(cache["emb"], d_emb_out)
                g_cls = np.zeros_like(p["emb.class"])
                g_cls[cache["cond"]] = p["emb.w"] @ d_emb_out
                grads["emb.class"] = g_cls
            dh = dx + dh if 1 < j < self.layers else dx
        return grads


class Projector:
    """Three token-wise fully connected stages (tanh) and one 3-D convolution.

    The convolution stride is ``in_grid / out_grid`` per axis, so the output
    lands on the teacher's token grid: stride-1 axes use a 3-wide kernel with
    zero padding, strided axes a kernel equal to the stride.
    """

    def __init__(self, in_channels, out_channels, hidden=64, in_grid=(4, 8, 8),
                 out_grid=(4, 8, 8), seed=12, dtype=np.float64):
        strides = []
        for a, b in zip(in_grid, out_grid):
            if a % b:
                raise ValueError(f"projector cannot map grid {in_grid} onto {out_grid}")
            strides.append(a // b)
        self.stride = tuple(strides)
        self.kernel = tuple(3 if s == 1 else s for s in self.stride)
        self.pad = tuple(1 if s == 1 else 0 for s in self.stride)
        rng = np.random.default_rng(seed)
        k = int(np.prod(self.kernel))
        self.params = {
            "fc1.w": _init(rng, (in_channels, hidden), in_channels, 1.0, dtype),
            "fc1.b": np.zeros(hidden, dtype=dtype),
            "fc2.w": _init(rng, (hidden, hidden), hidden, 1.0, dtype),
            "fc2.b": np.zeros(hidden, dtype=dtype),
            "fc3.w": _init(rng, (hidden, hidden), hidden, 1.0, dtype),
            "fc3.b": np.zeros(hidden, dtype=dtype),
            "conv.w": _init(rng, self.kernel + (hidden, out_channels), k * hidden, 1.0, dtype),
            "conv.b": np.zeros(out_channels, dtype=dtype),
        }

    def forward(self, x):
        """Return ``(features, cache)``."""
        p = self.params
        cache = {"x": [], "out": []}
        h = x
        for name in ("fc1", "fc2", "fc3"):
            cache["x"].append(h)
            h = np.tanh(L.linear_forward(h, p[f"{name}.w"], p[f"{name}.b"]))
            cache["out"].append(h)
        y, win = L.conv3d_forward(h, p["conv.w"], p["conv.b"], self.stride, self.pad)
        cache["win"] = win
        cache["conv_in"] = h.shape
        return y, cache

    def backward(self, cache, dy):
        """Return ``(d_input, grads)``."""
        p = self.params
        grads = {}
        dh, grads["conv.w"], grads["conv.b"] = L.conv3d_backward(
            dy, cache["win"], cache["conv_in"], p["conv.w"], self.stride, self.pad)
        for k, name in reversed(list(enumerate(("fc1", "fc2", "fc3")))):
            da = L.activation_backward("tanh", dh, cache["out"][k])
            dh, grads[f"{name}.w"], grads[f"{name}.b"] = L.linear_backward(
                da, cache["x"][k], p[f"{name}.w"])
        return dh, grads
