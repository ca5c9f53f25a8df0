"""Learnable sparsity regularizer ``P(x) = sum_i ||g_i(x)||`` and its smoothing.

``g`` is a small all-convolutional network (no bias) with smoothed-ReLU
activations between layers and a linear last layer.  ``g_i`` is the feature
vector at pixel ``i`` (one entry per output channel).  The smoothed penalty
replaces ``||g_i||`` by ``||g_i||^2 / (2 eps)`` wherever ``||g_i|| <= eps``
and by ``||g_i|| - eps/2`` elsewhere.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from dulda import gradcore as gc

DEFAULT_CHANNELS = (1, 8, 8, 8)


@dataclass
class RegularizerParams:
    """Feature-extractor kernels plus per-phase step sizes (log domain).

    Fields may hold plain arrays or :class:`~dulda.gradcore.Var` nodes; see
    :meth:`on_tape`.
    """

    conv_layers: list
    delta: float = 0.002
    log_alpha: object = field(default_factory=lambda: np.full(4, np.log(0.01)))
    log_beta: object = field(default_factory=lambda: np.full(4, np.log(0.02)))

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if np.shape(gc.value(self.log_alpha)) != np.shape(gc.value(self.log_beta)):
            raise ValueError("log_alpha and log_beta must have one entry per phase")
        prev = None
        for w in self.conv_layers:
            shp = np.shape(gc.value(w))
            if len(shp) != 4 or shp[2] % 2 == 0 or shp[3] % 2 == 0:
                raise ValueError(f"kernel shape {shp} is not (Cout, Cin, odd, odd)")
            if prev is not None and shp[1] != prev:
                raise ValueError("kernel channel counts do not chain")
            prev = shp[0]
        if self.conv_layers and np.shape(gc.value(self.conv_layers[0]))[1] != 1:
            raise ValueError("first layer must take a single input channel")

    @property
    def n_phases(self):
        return int(np.size(gc.value(self.log_alpha)))

    def alpha(self, k):
        return gc.exp(gc.take(self.log_alpha, k))

    def beta(self, k):
        return gc.exp(gc.take(self.log_beta, k))

    def arrays(self):
        """Trainable arrays in a fixed order: kernels..., log_alpha, log_beta."""
        return [*self.conv_layers, self.log_alpha, self.log_beta]

    def with_arrays(self, arrays):
        n = len(self.conv_layers)
        arrays = list(arrays)
        return replace(self, conv_layers=arrays[:n], log_alpha=arrays[n],
                       log_beta=arrays[n + 1])

    def on_tape(self, tape):
        """Copy whose trainable arrays are leaves of ``tape``."""
        leaves = [tape.variable(gc.value(a)) for a in self.arrays()]
        return self.with_arrays(leaves), leaves

    def detached(self):
        return self.with_arrays([gc.value(a).copy() for a in self.arrays()])

    def with_phases(self, n_phases):
        """Same kernels, step sizes resized to ``n_phases`` (repeating the last)."""
        la, lb = gc.value(self.log_alpha), gc.value(self.log_beta)
        idx = np.minimum(np.arange(n_phases), la.size - 1)
        return replace(self, log_alpha=la[idx].copy(), log_beta=lb[idx].copy())


def init_params(n_phases=4, channels=DEFAULT_CHANNELS, kernel_size=3, delta=0.002,
                alpha0=0.01, beta0=0.02, seed=0, kernel_scale=1.0):
    """Deterministic initialization: zero-mean uniform kernels scaled by fan-in."""
    rng = np.random.default_rng(seed)
    layers = []
    for cin, cout in zip(channels[:-1], channels[1:]):
        bound = kernel_scale / np.sqrt(cin * kernel_size * kernel_size)
        layers.append(rng.uniform(-bound, bound, size=(cout, cin, kernel_size, kernel_size)))
    return RegularizerParams(
        conv_layers=layers,
        delta=delta,
        log_alpha=np.full(n_phases, np.log(alpha0)),
        log_beta=np.full(n_phases, np.log(beta0)),
    )


def zero_params(n_phases=4, channels=DEFAULT_CHANNELS, kernel_size=3, **kw):
    """Parameters with all-zero kernels, i.e. ``P == 0``."""
    return init_params(n_phases, channels, kernel_size, kernel_scale=0.0, **kw)


def smoothed_relu(x, delta):
    return gc.smoothed_relu(x, delta)


def extract_features(params, x):
    """Feature field of shape (m, H, W) for a (H, W) image."""
    h = gc.reshape(x, (1,) + tuple(np.shape(gc.value(x))))
    last = len(params.conv_layers) - 1
    for i, w in enumerate(params.conv_layers):
        h = gc.conv2d(h, w)
        if i < last:
            h = gc.smoothed_relu(h, params.delta)
    return h


def p_smoothed(params, x, eps):
    return gc.huber_l21(extract_features(params, x), eps)


def l21_norm(params, x):
    """Unsmoothed ``sum_i ||g_i(x)||`` (numpy only)."""
    g = gc.value(extract_features(params, gc.value(x)))
    return float(np.sum(gc.channel_norm_value(g)))


def grad_p_smoothed(params, x, eps):
    """Gradient of :func:`p_smoothed` with respect to the image.

    The reverse pass through the network is spelled out with primitives so
    that it is itself differentiable when ``params`` or ``x`` are taped.
    """
    shape = tuple(np.shape(gc.value(x)))
    h = gc.reshape(x, (1,) + shape)
    pre = []
    last = len(params.conv_layers) - 1
    for i, w in enumerate(params.conv_layers):
        z = gc.conv2d(h, w)
        if i < last:
            pre.append(z)
            h = gc.smoothed_relu(z, params.delta)
        else:
            h = z
    adj = gc.huber_scale(h, eps)
    for i in range(last, -1, -1):
        adj = gc.conv2d_transpose(adj, params.conv_layers[i])
        if i > 0:
            adj = gc.mul(adj, gc.smoothed_relu_grad(pre[i - 1], params.delta))
    return gc.reshape(adj, shape)


def save_params(params, path):
    """Write ``<path>.json`` manifest and ``<path>.bin`` raw f64 payload."""
    path = Path(path)
    arrays = [np.ascontiguousarray(gc.value(a), dtype="<f8") for a in params.arrays()]
    manifest = {
        "format": "dulda-regularizer-v1",
        "delta": float(params.delta),
        "n_phases": params.n_phases,
        "kernel_shapes": [list(a.shape) for a in arrays[:-2]],
        "log_alpha": [float(v) for v in arrays[-2]],
        "log_beta": [float(v) for v in arrays[-1]],
    }
    path.with_suffix(".bin").write_bytes(b"".join(a.tobytes() for a in arrays[:-2]))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".json")


def load_params(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    payload = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    layers, offset = [], 0
    for shp in manifest["kernel_shapes"]:
        n = int(np.prod(shp))
        layers.append(payload[offset:offset + n].reshape(shp).astype(np.float64))
        offset += n
    if offset != payload.size:
        raise ValueError(f"{path}: kernel payload size mismatch")
    return RegularizerParams(
        conv_layers=layers,
        delta=manifest["delta"],
        log_alpha=np.array(manifest["log_alpha"], dtype=np.float64),
        log_beta=np.array(manifest["log_beta"], dtype=np.float64),
    )
