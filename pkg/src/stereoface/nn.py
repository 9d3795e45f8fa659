"""Minimal float64 tensor layers with exact backward passes.

Implements exactly what the liveness classifier needs: same-padded stride-1
convolution, max pooling, dense layers, ReLU, Sigmoid, binary cross-entropy,
and Adam. Layers cache what their backward pass needs and accumulate
parameter gradients in place, so mini-batch gradients are sums over samples
in index order.

The fixed topology takes a 96x96x1 depth image down to a single real-face
probability:

    conv 5x5x1x8   -> 96x96x8    relu
    maxpool 3/3    -> 32x32x8
    conv 3x3x8x16  -> 32x32x16   relu
    maxpool 2/2    -> 16x16x16
    conv 3x3x16x32 -> 16x16x32   relu
    maxpool 2/2    -> 8x8x32
    flatten        -> 2048
    dense          -> 128        relu
    dense          -> 32         relu
    dense          -> 1          sigmoid
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stereoface.errors import FileFormatError
from stereoface.rng import SplitMix64

INPUT_SIZE = 96

# (name, kind, weight shape); biases are the trailing dimension.
PARAM_PLAN = (
    ("conv1", "conv", (5, 5, 1, 8)),
    ("conv2", "conv", (3, 3, 8, 16)),
    ("conv3", "conv", (3, 3, 16, 32)),
    ("fc1", "dense", (2048, 128)),
    ("fc2", "dense", (128, 32)),
    ("fc3", "dense", (32, 1)),
)

_WEIGHTS_MAGIC = b"SLNN"
_WEIGHTS_VERSION = 1
_TAGS = {"conv": 1, "dense": 2}
_KINDS = {v: k for k, v in _TAGS.items()}


class Conv2D:
    """Stride-1 cross-correlation with zero 'same' padding and bias."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        kh, kw, _, c_out = w.shape
        if kh != kw or kh % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
        if b.shape != (c_out,):
            raise ValueError(f"bias shape {b.shape} does not match {c_out} output channels")
        self.w = np.array(w, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._cols: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        kh, _, c_in, c_out = self.w.shape
        if x.ndim != 3 or x.shape[2] != c_in:
            raise ValueError(f"expected (h, w, {c_in}) input, got {x.shape}")
        h, w, _ = x.shape
        p = (kh - 1) // 2
        xp = np.pad(x, ((p, p), (p, p), (0, 0)))
        windows = sliding_window_view(xp, (kh, kh), axis=(0, 1))
        cols = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kh * c_in)
        self._cols = cols
        self._in_shape = x.shape
        out = cols @ self.w.reshape(-1, c_out) + self.b
        return out.reshape(h, w, c_out)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        kh, _, c_in, c_out = self.w.shape
        h, w, _ = self._in_shape
        p = (kh - 1) // 2
        dflat = dout.reshape(-1, c_out)
        self.db += dflat.sum(axis=0)
        self.dw += (self._cols.T @ dflat).reshape(self.w.shape)
        dcols = (dflat @ self.w.reshape(-1, c_out).T).reshape(h, w, kh, kh, c_in)
        dxp = np.zeros((h + 2 * p, w + 2 * p, c_in))
        for i in range(kh):
            for j in range(kh):
                dxp[i : i + h, j : j + w] += dcols[:, :, i, j, :]
        return dxp[p : p + h, p : p + w]


class MaxPool2D:
    """Max pooling; gradients route to the first maximum in window scan order."""

    def __init__(self, kernel: int, stride: int):
        if kernel < 1 or stride < 1:
            raise ValueError("kernel and stride must be >= 1")
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: np.ndarray) -> np.ndarray:
        k, s = self.kernel, self.stride
        h, w, c = x.shape
        if h < k or w < k or (h - k) % s or (w - k) % s:
            raise ValueError(f"{k}/{s} pooling does not tile a {h}x{w} input")
        oh = (h - k) // s + 1
        ow = (w - k) // s + 1
        windows = sliding_window_view(x, (k, k), axis=(0, 1))[::s, ::s]
        flat = windows.transpose(0, 1, 3, 4, 2).reshape(oh, ow, k * k, c)
        self._argmax = flat.argmax(axis=2)
        self._in_shape = x.shape
        return np.take_along_axis(flat, self._argmax[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, dout: np.ndarray) -> np.ndarray:
        k, s = self.kernel, self.stride
        h, w, c = self._in_shape
        oh, ow, _ = dout.shape
        rows = np.arange(oh)[:, None, None] * s + self._argmax // k
        cols = np.arange(ow)[None, :, None] * s + self._argmax % k
        chan = np.broadcast_to(np.arange(c)[None, None, :], dout.shape)
        dx = np.zeros((h, w, c))
        np.add.at(dx, (rows, cols, chan), dout)
        return dx


class Dense:
    """Affine layer: out = x @ w + b on a flat input."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError(f"bad dense shapes w{w.shape} b{b.shape}")
        self.w = np.array(w, dtype=np.float64)
        self.b = np.array(b, dtype=np.float64)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.w.shape[0],):
            raise ValueError(f"expected input of length {self.w.shape[0]}, got {x.shape}")
        self._x = x
        return x @ self.w + self.b

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.dw += np.outer(self._x, dout)
        self.db += dout
        return self.w @ dout


class ReLU:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0.0  # gradient at exactly 0 is defined as 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dout, 0.0)


class Sigmoid:
    def forward(self, x: np.ndarray) -> np.ndarray:
        y = sigmoid(x)
        self._y = y
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._y * (1.0 - self._y)


class Flatten:
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(-1)  # row-major (h, w, c)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout.reshape(self._shape)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic, kept strictly inside (0, 1) in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def bce_loss(p: float, y: int) -> tuple[float, float]:
    """Binary cross-entropy of probability p against label y in {0, 1}.

    p is clamped to [1e-12, 1 - 1e-12]; the returned d(loss)/dp is taken at
    the clamped value so the pair stays mutually consistent.
    """
    pc = min(max(float(p), 1e-12), 1.0 - 1e-12)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    dp = (pc - y) / (pc * (1.0 - pc))
    return float(loss), float(dp)


class Adam:
    """Adam with bias-corrected first and second moments.

    Given gradients g: m <- b1 m + (1-b1) g, v <- b2 v + (1-b2) g^2, then
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError(f"got {len(grads)} gradients for {len(self.params)} tensors")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Network:
    """The fixed depth-liveness classifier topology."""

    def __init__(self, layers: list):
        self.layers = layers
        self._param_layers = [
            (name, layer)
            for (name, _, _), layer in zip(PARAM_PLAN, [l for l in layers if hasattr(l, "w")])
        ]

    def forward(self, x: np.ndarray) -> float:
        """Probability that x (96x96x1) is a real-face depth map."""
        out = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            out = layer.forward(out)
        return float(out[0])

    def backward(self, dloss_dp: float) -> None:
        """Accumulate parameter gradients for the most recent forward pass."""
        grad = np.array([dloss_dp], dtype=np.float64)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)

    def zero_grads(self) -> None:
        for _, layer in self._param_layers:
            layer.dw[...] = 0.0
            layer.db[...] = 0.0

    def params(self) -> list[np.ndarray]:
        out = []
        for _, layer in self._param_layers:
            out.extend((layer.w, layer.b))
        return out

    def grads(self) -> list[np.ndarray]:
        out = []
        for _, layer in self._param_layers:
            out.extend((layer.dw, layer.db))
        return out

    def param_layers(self) -> list[tuple[str, object]]:
        return list(self._param_layers)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params())


def _assemble(tensors: list[tuple[np.ndarray, np.ndarray]]) -> Network:
    for (name, kind, shape), (w, _) in zip(PARAM_PLAN, tensors):
        if tuple(w.shape) != shape:
            raise FileFormatError(f"{name} weights have shape {w.shape}, expected {shape}")
    (c1w, c1b), (c2w, c2b), (c3w, c3b), (f1w, f1b), (f2w, f2b), (f3w, f3b) = tensors
    return Network(
        [
            Conv2D(c1w, c1b),
            ReLU(),
            MaxPool2D(3, 3),
            Conv2D(c2w, c2b),
            ReLU(),
            MaxPool2D(2, 2),
            Conv2D(c3w, c3b),
            ReLU(),
            MaxPool2D(2, 2),
            Flatten(),
            Dense(f1w, f1b),
            ReLU(),
            Dense(f2w, f2b),
            ReLU(),
            Dense(f3w, f3b),
            Sigmoid(),
        ]
    )


def build_model(seed: int) -> Network:
    """Fresh network with seeded He-uniform weights and zero biases.

    The final dense layer feeding the sigmoid uses Xavier-uniform instead.
    Weight tensors draw from one SplitMix64 stream in plan order, so equal
    seeds give bitwise-equal parameters.
    """
    rng = SplitMix64(seed)
    tensors = []
    for name, kind, shape in PARAM_PLAN:
        if kind == "conv":
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out_dim = shape[3]
        else:
            fan_in = shape[0]
            fan_out_dim = shape[1]
        if name == "fc3":
            limit = np.sqrt(6.0 / (fan_in + fan_out_dim))
        else:
            limit = np.sqrt(6.0 / fan_in)
        n = int(np.prod(shape))
        w = (rng.uniforms(n) * 2.0 - 1.0).reshape(shape) * limit
        tensors.append((w, np.zeros(fan_out_dim)))
    return _assemble(tensors)


def encode_weights(net: Network) -> bytes:
    """Serialize parameters: magic, version, record count, then per layer a
    kind tag, weight dims, weight data, and bias data (little-endian f64)."""
    chunks = [struct.pack("<4sII", _WEIGHTS_MAGIC, _WEIGHTS_VERSION, len(PARAM_PLAN))]
    for (name, kind, _), (_, layer) in zip(PARAM_PLAN, net.param_layers()):
        dims = layer.w.shape
        chunks.append(struct.pack(f"<II{len(dims)}I", _TAGS[kind], len(dims), *dims))
        chunks.append(layer.w.astype("<f8").tobytes())
        chunks.append(layer.b.astype("<f8").tobytes())
    return b"".join(chunks)


def decode_weights(data: bytes) -> Network:
    """Rebuild a network from encode_weights output, validating the layer chain."""
    if len(data) < 12:
        raise FileFormatError("weight data shorter than its 12-byte header")
    magic, version, count = struct.unpack_from("<4sII", data)
    if magic != _WEIGHTS_MAGIC:
        raise FileFormatError(f"bad weight magic {magic!r}")
    if version != _WEIGHTS_VERSION:
        raise FileFormatError(f"unsupported weight format version {version}")
    if count != len(PARAM_PLAN):
        raise FileFormatError(f"expected {len(PARAM_PLAN)} parameter records, found {count}")
    pos = 12
    tensors = []
    for name, kind, shape in PARAM_PLAN:
        if pos + 8 > len(data):
            raise FileFormatError(f"truncated record header for {name}")
        tag, ndim = struct.unpack_from("<II", data, pos)
        pos += 8
        if _KINDS.get(tag) != kind:
            raise FileFormatError(f"{name}: expected a {kind} record, found tag {tag}")
        if ndim != len(shape):
            raise FileFormatError(f"{name}: expected {len(shape)} dims, found {ndim}")
        if pos + 4 * ndim > len(data):
            raise FileFormatError(f"truncated dims for {name}")
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n_w = int(np.prod(dims))
        n_b = dims[-1]
        need = 8 * (n_w + n_b)
        if pos + need > len(data):
            raise FileFormatError(f"truncated parameter data for {name}")
        w = np.frombuffer(data, dtype="<f8", count=n_w, offset=pos).reshape(dims)
        pos += 8 * n_w
        b = np.frombuffer(data, dtype="<f8", count=n_b, offset=pos)
        pos += 8 * n_b
        tensors.append((w.astype(np.float64), b.astype(np.float64)))
    if pos != len(data):
        raise FileFormatError(f"{len(data) - pos} trailing bytes after the last record")
    return _assemble(tensors)
