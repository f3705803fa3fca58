"""Shallow 3D conv descriptor network with handwritten forward and backward passes.

Architecture for a 7^3 input (default sizes)::

    conv 3^3, 32 filters, ReLU   -> 5^3 x 32
    conv 3^3, 64 filters, ReLU   -> 3^3 x 64
    flatten                      -> 1728
    linear 686, ReLU
    linear 343
    L2 normalize

Activations are kept channels-last, ``(batch, x, y, z, channels)``; the
flatten order is therefore (x, y, z, channel) with channel fastest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
WEIGHTS_MAGIC = b"VDSC"
WEIGHTS_VERSION = 1
NORM_FLOOR = 1e-12


class WeightsFormatError(ValueError):
    pass


@dataclass
class DescriptorNet:
    params: dict[str, np.ndarray]
    input_edge: int = 7

    @classmethod
    def create(cls, seed: int = 0, conv1: int = 32, conv2: int = 64, hidden: int = 686, out: int = 343,
               input_edge: int = 7, dtype=np.float32) -> "DescriptorNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        flat = conv2 * (input_edge - 4) ** 3

        def glorot(shape, fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=shape).astype(dtype)

        params = {
            "conv1_w": glorot((conv1, 1, 3, 3, 3), 27, conv1 * 27),
            "conv1_b": np.zeros(conv1, dtype),
            "conv2_w": glorot((conv2, conv1, 3, 3, 3), conv1 * 27, conv2 * 27),
            "conv2_b": np.zeros(conv2, dtype),
            "fc1_w": glorot((hidden, flat), flat, hidden),
            "fc1_b": np.zeros(hidden, dtype),
            "fc2_w": glorot((out, hidden), hidden, out),
            "fc2_b": np.zeros(out, dtype),
        }
        return cls(params, input_edge)

    @property
    def dtype(self):
        return self.params["fc2_w"].dtype

    @property
    def output_size(self) -> int:
        return self.params["fc2_w"].shape[0]

    def copy(self, dtype=None) -> "DescriptorNet":
        return DescriptorNet({k: np.array(v, dtype=dtype or v.dtype) for k, v in self.params.items()}, self.input_edge)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Descriptors for a batch of neighborhoods ``x`` of shape (B, e, e, e).

        With ``keep=True`` also returns the activation cache for :meth:`backward`.
        """
        x = np.asarray(x)
        e = self.input_edge
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (e, e, e):
            raise ValueError(f"expected neighborhoods of shape {(e, e, e)}, got {x.shape[1:]}")
        p = self.params
        x = x.astype(self.dtype, copy=False)[..., None]
        cols1, z1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
        a1 = np.maximum(z1, 0)
        cols2, z2 = _conv_forward(a1, p["conv2_w"], p["conv2_b"])
        a2 = np.maximum(z2, 0)
        flat = a2.reshape(len(x), -1)
        z3 = flat @ p["fc1_w"].T + p["fc1_b"]
        a3 = np.maximum(z3, 0)
        v = a3 @ p["fc2_w"].T + p["fc2_b"]
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        degenerate = norm[:, 0] < NORM_FLOOR
        y = v / np.where(degenerate[:, None], 1.0, norm)
        if degenerate.any():
            y[degenerate] = 0
            y[degenerate, 0] = 1
        if not keep:
            return y
        cache = dict(cols1=cols1, z1=z1, a1_shape=a1.shape, cols2=cols2, z2=z2, flat=flat, z3=z3, a3=a3,
                     y=y, norm=norm, degenerate=degenerate)
        return y, cache

    def __call__(self, x):
        return self.forward(x)

    def backward(self, dy: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter, given dloss/d(descriptor)."""
        p = self.params
        y, norm = cache["y"], cache["norm"]
        dv = (dy - y * np.sum(y * dy, axis=1, keepdims=True)) / np.where(norm > 0, norm, 1.0)
        dv[cache["degenerate"]] = 0
        grads = {"fc2_w": dv.T @ cache["a3"], "fc2_b": dv.sum(axis=0)}
        dz3 = (dv @ p["fc2_w"]) * (cache["z3"] > 0)
        grads["fc1_w"] = dz3.T @ cache["flat"]
        grads["fc1_b"] = dz3.sum(axis=0)
        dz2 = (dz3 @ p["fc1_w"]).reshape(cache["z2"].shape) * (cache["z2"] > 0)
        grads["conv2_w"], grads["conv2_b"], da1 = _conv_backward(dz2, cache["cols2"], p["conv2_w"], cache["a1_shape"])
        dz1 = da1 * (cache["z1"] > 0)
        grads["conv1_w"], grads["conv1_b"], _ = _conv_backward(dz1, cache["cols1"], p["conv1_w"], None)
        return {k: grads[k].astype(p[k].dtype, copy=False) for k in PARAM_NAMES}

    def activation_pattern(self, x: np.ndarray) -> np.ndarray:
        """Boolean ReLU on/off pattern for ``x``; used to spot kinks in gradient checks."""
        _, c = self.forward(x, keep=True)
        return np.concatenate([(c["z1"] > 0).ravel(), (c["z2"] > 0).ravel(), (c["z3"] > 0).ravel()])


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Valid stride-1 3D convolution (cross-correlation), channels-last."""
    bsz, n = x.shape[0], x.shape[1]
    m = n - w.shape[2] + 1
    cout = w.shape[0]
    cols = sliding_window_view(x, w.shape[2:], axis=(1, 2, 3)).reshape(bsz * m**3, -1)
    z = cols @ w.reshape(cout, -1).T + b
    return cols, z.reshape(bsz, m, m, m, cout)


def _conv_backward(dz: np.ndarray, cols: np.ndarray, w: np.ndarray, x_shape):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    dz_flat = dz.reshape(-1, cout)
    dw = (dz_flat.T @ cols).reshape(w.shape)
    db = dz_flat.sum(axis=0)
    if x_shape is None:
        return dw, db, None
    bsz, m = dz.shape[0], dz.shape[1]
    dcols = (dz_flat @ w.reshape(cout, -1)).reshape(bsz, m, m, m, cin, k, k, k)
    dx = np.zeros(x_shape, dtype=dz.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dx[:, i : i + m, j : j + m, l : l + m, :] += dcols[..., i, j, l]
    return dw, db, dx


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def triplet_loss(d1, d2, d1_neg, margin: float = 0.1) -> float:
    """max(0, margin + |d1 - d2| - |d1 - d1_neg|) for one triplet."""
    d1, d2, d1_neg = (np.asarray(v, dtype=np.float64) for v in (d1, d2, d1_neg))
    return float(max(0.0, margin + np.linalg.norm(d1 - d2) - np.linalg.norm(d1 - d1_neg)))


def batch_triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float):
    """Mean hinge loss over a batch plus its gradients w.r.t. the three descriptor sets.

    Hinge kinks and zero distances take subgradient 0.
    """
    dap_v = a - p
    dan_v = a - n
    dap = np.linalg.norm(dap_v, axis=1, keepdims=True)
    dan = np.linalg.norm(dan_v, axis=1, keepdims=True)
    per = margin + dap[:, 0] - dan[:, 0]
    active = (per > 0)[:, None]
    bsz = len(a)
    u_ap = np.where(dap > 0, dap_v / np.where(dap > 0, dap, 1.0), 0.0)
    u_an = np.where(dan > 0, dan_v / np.where(dan > 0, dan, 1.0), 0.0)
    ga = np.where(active, u_ap - u_an, 0.0) / bsz
    gp = np.where(active, -u_ap, 0.0) / bsz
    gn = np.where(active, u_an, 0.0) / bsz
    return float(np.maximum(per, 0.0).mean()), ga, gp, gn


def net_loss_and_grads(net: DescriptorNet, anchors, positives, negatives, margin: float = 0.1):
    """Mean triplet loss over a batch of neighborhood triplets and exact parameter gradients."""
    bsz = len(anchors)
    x = np.concatenate([anchors, positives, negatives])
    y, cache = net.forward(x, keep=True)
    loss, ga, gp, gn = batch_triplet_loss(y[:bsz], y[bsz : 2 * bsz], y[2 * bsz :], margin)
    grads = net.backward(np.concatenate([ga, gp, gn]).astype(y.dtype), cache)
    return loss, grads


def net_backward(net: DescriptorNet, anchors, positives, negatives, margin: float = 0.1) -> dict[str, np.ndarray]:
    return net_loss_and_grads(net, anchors, positives, negatives, margin)[1]


def net_forward(net: DescriptorNet, neighborhood) -> np.ndarray:
    """Descriptor of a single neighborhood (array or object with ``.values``)."""
    values = getattr(neighborhood, "values", neighborhood)
    return net.forward(np.asarray(values)[None])[0]


# ---------------------------------------------------------------------------
# Weights file
# ---------------------------------------------------------------------------


def encode_weights(net: DescriptorNet) -> bytes:
    """``VDSC`` magic, version, layer count, then per layer: weight and bias tensors,
    each as ndim u32, dims u32..., and little-endian f32 values."""
    out = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(PARAM_NAMES) // 2)]
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(net.params[name], dtype="<f4")
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(data: bytes, dtype=np.float32) -> DescriptorNet:
    if data[:4] != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    try:
        version, layers = struct.unpack_from("<II", data, 4)
        if version != WEIGHTS_VERSION or layers != len(PARAM_NAMES) // 2:
            raise WeightsFormatError(f"unsupported weights file (version {version}, {layers} layers)")
        off = 12
        params = {}
        for name in PARAM_NAMES:
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 4)
            off += 4 + 4 * ndim
            count = int(np.prod(shape))
            if len(data) < off + 4 * count:
                raise WeightsFormatError("truncated weights payload")
            params[name] = np.frombuffer(data, "<f4", count, off).reshape(shape).astype(dtype)
            off += 4 * count
    except struct.error as exc:
        raise WeightsFormatError(f"truncated weights header: {exc}") from None
    if off != len(data):
        raise WeightsFormatError("trailing bytes after weights")
    if params["conv2_w"].shape[0] == 0:
        raise WeightsFormatError("empty conv2 layer")
    flat_side = round((params["fc1_w"].shape[1] / params["conv2_w"].shape[0]) ** (1 / 3))
    net = DescriptorNet(params, flat_side + 4)
    _check_shapes(net)
    return net


def _check_shapes(net: DescriptorNet) -> None:
    p = net.params
    c1, c2 = p["conv1_w"].shape[0], p["conv2_w"].shape[0]
    hidden, out = p["fc1_w"].shape[0], p["fc2_w"].shape[0]
    expected = {
        "conv1_w": (c1, 1, 3, 3, 3), "conv1_b": (c1,), "conv2_w": (c2, c1, 3, 3, 3), "conv2_b": (c2,),
        "fc1_w": (hidden, c2 * (net.input_edge - 4) ** 3), "fc1_b": (hidden,), "fc2_w": (out, hidden), "fc2_b": (out,),
    }
    for name, shape in expected.items():
        if p[name].shape != shape:
            raise WeightsFormatError(f"{name} has shape {p[name].shape}, expected {shape}")


def save_weights(net: DescriptorNet, path) -> None:
    Path(path).write_bytes(encode_weights(net))


def load_weights(path, dtype=np.float32) -> DescriptorNet:
    return decode_weights(Path(path).read_bytes(), dtype)
