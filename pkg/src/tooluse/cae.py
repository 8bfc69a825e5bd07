"""Convolutional autoencoder compressing task images to a few feature values.

The encoder is a stack of valid strided convolutions followed by fully
connected layers narrowing to ``feature_dim``; the decoder mirrors it with
transposed convolutions so its output has exactly the input shape.  Hidden
and bottleneck units use tanh, the output layer a sigmoid over pixels
normalised to [0, 1].
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (DimensionError, TrainingError, affine_forward, conv2d_backward,
                       conv2d_forward, conv_output_size, conv_transpose2d,
                       conv_transpose2d_backward, sigmoid_act, tanh_act)

MAGIC = b"CAE1"


@dataclass
class CaeConfig:
    image_width: int = 32
    image_height: int = 24
    channels: int = 3
    feature_dim: int = 20
    # (kernel_count, kernel_size, stride)
    conv_layers: list = field(default_factory=lambda: [(16, 6, 2), (32, 6, 2)])
    fc_layers: list = field(default_factory=lambda: [128])
    hidden_activation: str = "tanh"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        self.conv_layers = [tuple(int(v) for v in layer) for layer in self.conv_layers]
        self.fc_layers = [int(v) for v in self.fc_layers]
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if (self.hidden_activation, self.output_activation) != ("tanh", "sigmoid"):
            raise ValueError("only tanh hidden and sigmoid output activations are supported")
        self.conv_shapes()

    @classmethod
    def paper(cls) -> "CaeConfig":
        return cls(image_width=64, image_height=48)

    def conv_shapes(self) -> list[tuple[int, int, int]]:
        """Activation shapes ``(C, H, W)`` from the image through every conv layer."""
        shapes = [(self.channels, self.image_height, self.image_width)]
        for k, size, stride in self.conv_layers:
            _, h, w = shapes[-1]
            if size > h or size > w or stride < 1:
                raise ValueError(f"conv layer {(k, size, stride)} does not fit input {shapes[-1]}")
            shapes.append((k, conv_output_size(h, size, stride), conv_output_size(w, size, stride)))
        return shapes

    def fc_widths(self) -> list[int]:
        c, h, w = self.conv_shapes()[-1]
        return [c * h * w] + list(self.fc_layers) + [self.feature_dim]


@dataclass
class CaeParams:
    """Encoder then decoder tensors, in declaration order."""
    enc_kernels: list
    enc_conv_bias: list
    enc_weights: list
    enc_bias: list
    dec_weights: list
    dec_bias: list
    dec_kernels: list
    dec_conv_bias: list
    pixel_bias: np.ndarray  # C x H x W, added before the output sigmoid
    input_mean: np.ndarray  # C x H x W, subtracted from every input; not trained
    iterations: int = 0

    def tensors(self) -> list[np.ndarray]:
        out = []
        for k, b in zip(self.enc_kernels, self.enc_conv_bias):
            out += [k, b]
        for w, b in zip(self.enc_weights, self.enc_bias):
            out += [w, b]
        for w, b in zip(self.dec_weights, self.dec_bias):
            out += [w, b]
        for k, b in zip(self.dec_kernels, self.dec_conv_bias):
            out += [k, b]
        return out + [self.pixel_bias, self.input_mean]

    def copy(self) -> "CaeParams":
        return CaeParams(*[[a.copy() for a in group] for group in (
            self.enc_kernels, self.enc_conv_bias, self.enc_weights, self.enc_bias,
            self.dec_weights, self.dec_bias, self.dec_kernels, self.dec_conv_bias)],
            self.pixel_bias.copy(), self.input_mean.copy(), iterations=self.iterations)


@dataclass
class FeatureSet:
    """Rescaled features ``(sequences, frames, feature_dim)`` with their affine map."""
    features: np.ndarray
    raw_min: np.ndarray
    raw_max: np.ndarray
    untrained: bool = False

    def rescale(self, raw) -> np.ndarray:
        return rescale(raw, self.raw_min, self.raw_max)

    def inverse(self, scaled) -> np.ndarray:
        return inverse_rescale(scaled, self.raw_min, self.raw_max)


def init_params(config: CaeConfig, seed: int = 0, zero: bool = False) -> CaeParams:
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        if zero:
            return np.zeros(shape)
        r = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-r, r, size=shape)

    shapes = config.conv_shapes()
    widths = config.fc_widths()
    enc_k, enc_cb, dec_k, dec_cb = [], [], [], []
    for (c, _, _), (k, size, _) in zip(shapes[:-1], config.conv_layers):
        enc_k.append(uni((k, c, size, size), c * size * size))
        enc_cb.append(np.zeros(k))
    enc_w = [uni((o, i), i) for i, o in zip(widths[:-1], widths[1:])]
    enc_b = [np.zeros(o) for o in widths[1:]]
    rev = widths[::-1]
    dec_w = [uni((o, i), i) for i, o in zip(rev[:-1], rev[1:])]
    dec_b = [np.zeros(o) for o in rev[1:]]
    for (c, _, _), (k, size, _) in reversed(list(zip(shapes[:-1], config.conv_layers))):
        # transposed conv from k channels back to c; fan-in counts contributing taps
        dec_k.append(uni((k, c, size, size), k * size * size))
        dec_cb.append(np.zeros(c))
    image = (config.channels, config.image_height, config.image_width)
    return CaeParams(enc_k, enc_cb, enc_w, enc_b, dec_w, dec_b, dec_k, dec_cb,
                     np.zeros(image), np.zeros(image))


def init_from_data(images, config: CaeConfig, seed: int = 0) -> CaeParams:
    """Random weights plus data-derived centring: inputs minus the mean image, and an
    output bias equal to the logit of that mean, so the bottleneck only has to
    carry what varies between frames."""
    params = init_params(config, seed)
    mean = np.asarray(images, dtype=np.float64).mean(axis=0)
    params.input_mean[...] = mean
    m = np.clip(mean, 0.02, 0.98)
    params.pixel_bias[...] = np.log(m / (1.0 - m))
    return params


def _check_images(x: np.ndarray, config: CaeConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (config.channels, config.image_height, config.image_width)
    if x.shape[-3:] != want or x.ndim not in (3, 4):
        raise DimensionError(f"image shape {x.shape} does not match config {want}")
    return x


def _encode_batch(x: np.ndarray, params: CaeParams, config: CaeConfig):
    h = x - params.input_mean
    acts = [h]
    for k, b, (_, _, stride) in zip(params.enc_kernels, params.enc_conv_bias, config.conv_layers):
        h = tanh_act(conv2d_forward(h, k, stride) + b[None, :, None, None])
        acts.append(h)
    h = h.reshape(len(x), -1)
    acts.append(h)
    for w, b in zip(params.enc_weights, params.enc_bias):
        h = tanh_act(affine_forward(h, w, b))
        acts.append(h)
    return h, acts


def _decode_batch(z: np.ndarray, params: CaeParams, config: CaeConfig):
    shapes = config.conv_shapes()
    acts = [z]
    h = z
    for w, b in zip(params.dec_weights, params.dec_bias):
        h = tanh_act(affine_forward(h, w, b))
        acts.append(h)
    h = h.reshape((len(z),) + shapes[-1])
    acts.append(h)
    layers = list(zip(shapes[:-1], config.conv_layers))[::-1]
    for i, (k, b, ((_, hh, ww), (_, _, stride))) in enumerate(
            zip(params.dec_kernels, params.dec_conv_bias, layers)):
        pre = conv_transpose2d(h, k, stride, (hh, ww)) + b[None, :, None, None]
        if i == len(layers) - 1:
            h = sigmoid_act(pre + params.pixel_bias)
        else:
            h = tanh_act(pre)
        acts.append(h)
    return h, acts


def encode(image, params: CaeParams, config: CaeConfig) -> np.ndarray:
    """Raw bottleneck features of one ``C x H x W`` image or a batch of them."""
    x = _check_images(image, config)
    single = x.ndim == 3
    z, _ = _encode_batch(x[None] if single else x, params, config)
    return z[0] if single else z


def decode(feature, params: CaeParams, config: CaeConfig) -> np.ndarray:
    z = np.asarray(feature, dtype=np.float64)
    if z.shape[-1] != config.feature_dim or z.ndim not in (1, 2):
        raise DimensionError(f"feature length {z.shape} != feature_dim {config.feature_dim}")
    single = z.ndim == 1
    out, _ = _decode_batch(z[None] if single else z, params, config)
    return out[0] if single else out


def reconstruct(images, params: CaeParams, config: CaeConfig) -> np.ndarray:
    return decode(encode(images, params, config), params, config)


def loss_and_grads(x: np.ndarray, params: CaeParams, config: CaeConfig, scale: float):
    """Sum of squared errors times ``scale`` and its gradients, in declaration order."""
    z, enc_acts = _encode_batch(x, params, config)
    out, dec_acts = _decode_batch(z, params, config)
    diff = out - x
    loss = float(np.sum(diff * diff)) * scale
    shapes = config.conv_shapes()
    layers = list(zip(shapes[:-1], config.conv_layers))[::-1]
    n_dec = len(layers)

    dec_k_g, dec_cb_g = [None] * n_dec, [None] * n_dec
    g = 2.0 * scale * diff * out * (1.0 - out)  # through the sigmoid
    pixel_bias_g = g.sum(axis=0)
    for i in range(n_dec - 1, -1, -1):
        inp = dec_acts[len(params.dec_weights) + 1 + i]
        stride = layers[i][1][2]
        dec_cb_g[i] = g.sum(axis=(0, 2, 3))
        g_in, dec_k_g[i] = conv_transpose2d_backward(inp, params.dec_kernels[i], g, stride)
        g = g_in * (1.0 - inp * inp) if i > 0 else g_in
    g = g.reshape(len(x), -1)
    n_fc = len(params.dec_weights)
    dec_w_g, dec_b_g = [None] * n_fc, [None] * n_fc
    hid = dec_acts[n_fc]  # output of the last fc layer, feeds the reshape
    g = g * (1.0 - hid * hid)
    for i in range(n_fc - 1, -1, -1):
        inp = dec_acts[i]
        dec_w_g[i] = g.T @ inp
        dec_b_g[i] = g.sum(axis=0)
        g = g @ params.dec_weights[i]
        g = g * (1.0 - inp * inp)  # inp is z (tanh bottleneck) or a tanh hidden layer
    n_conv = len(params.enc_kernels)
    enc_w_g, enc_b_g = [None] * n_fc, [None] * n_fc
    for i in range(n_fc - 1, -1, -1):
        inp = enc_acts[n_conv + 1 + i]
        enc_w_g[i] = g.T @ inp
        enc_b_g[i] = g.sum(axis=0)
        g = g @ params.enc_weights[i]
        if i > 0:
            g = g * (1.0 - inp * inp)
    h = enc_acts[n_conv]
    g = g.reshape(h.shape) * (1.0 - h * h)
    enc_k_g, enc_cb_g = [None] * n_conv, [None] * n_conv
    for i in range(n_conv - 1, -1, -1):
        inp = enc_acts[i]
        stride = config.conv_layers[i][2]
        enc_cb_g[i] = g.sum(axis=(0, 2, 3))
        g_in, enc_k_g[i] = conv2d_backward(inp, params.enc_kernels[i], g, stride)
        if i > 0:
            g = g_in * (1.0 - inp * inp)
    grads = CaeParams(enc_k_g, enc_cb_g, enc_w_g, enc_b_g, dec_w_g, dec_b_g, dec_k_g, dec_cb_g,
                      pixel_bias_g, np.zeros_like(params.input_mean))
    return loss, grads


@dataclass
class CaeTrainConfig:
    iterations: int = 3000
    alpha: float = 1e-3
    momentum: float = 0.9
    optimizer: str = "adam"  # or "momentum"
    beta2: float = 0.999
    batch_size: int = 32
    chunk_size: int = 16
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _batch_grads(x, params, config, tc: CaeTrainConfig, pool):
    scale = 1.0 / x.size
    chunks = [x[i:i + tc.chunk_size] for i in range(0, len(x), tc.chunk_size)]
    if pool is not None and len(chunks) > 1:
        results = list(pool.map(lambda c: loss_and_grads(c, params, config, scale), chunks))
    else:
        results = [loss_and_grads(c, params, config, scale) for c in chunks]
    loss = 0.0
    total = None
    for lval, grads in results:  # fixed-order reduction
        loss += lval
        tensors = grads.tensors()
        total = tensors if total is None else [a + b for a, b in zip(total, tensors)]
    return loss, total


def _adam_update(tensors, grads, first, second, tc: CaeTrainConfig, step: int) -> None:
    b1, b2 = tc.momentum, tc.beta2
    lr = tc.alpha * np.sqrt(1.0 - b2 ** step) / (1.0 - b1 ** step)
    for t, m, v, g in zip(tensors, first, second, grads):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t -= lr * m / (np.sqrt(v) + 1e-8)


def train_cae(images, config: CaeConfig, train_config: CaeTrainConfig | None = None,
              params: CaeParams | None = None, progress=None):
    """Minibatch training on the per-pixel reconstruction MSE (Adam or heavy-ball momentum).

    ``images`` is an array ``(n, C, H, W)``.  Returns ``(params, loss_curve)``
    where ``loss_curve[i]`` is the minibatch MSE at iteration ``i``.
    """
    tc = train_config or CaeTrainConfig()
    x_all = _check_images(images, config)
    if x_all.ndim == 3:
        x_all = x_all[None]
    if len(x_all) < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(tc.seed)
    params = init_from_data(x_all, config, tc.seed) if params is None else params.copy()
    tensors = params.tensors()
    velocity = [np.zeros_like(t) for t in tensors]
    second = [np.zeros_like(t) for t in tensors]
    curve = np.empty(tc.iterations)
    batch = min(tc.batch_size, len(x_all))
    order = rng.permutation(len(x_all))
    cursor = 0
    pool = ThreadPoolExecutor(max_workers=tc.threads) if tc.threads > 1 else None
    try:
        for it in range(tc.iterations):
            if cursor + batch > len(order):
                order = rng.permutation(len(x_all))
                cursor = 0
            idx = np.sort(order[cursor:cursor + batch])
            cursor += batch
            loss, grads = _batch_grads(x_all[idx], params, config, tc, pool)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError("CAE training diverged", it)
            curve[it] = loss
            if tc.optimizer == "adam":
                _adam_update(tensors, grads, velocity, second, tc, it + 1)
            else:
                for t, v, g in zip(tensors, velocity, grads):
                    v *= tc.momentum
                    v -= tc.alpha * g
                    t += v
            if progress is not None:
                progress(it, loss)
    finally:
        if pool is not None:
            pool.shutdown()
    params.iterations += tc.iterations
    return params, curve


def reconstruction_mse(images, params: CaeParams, config: CaeConfig, batch: int = 256) -> float:
    x = _check_images(images, config)
    total = 0.0
    for i in range(0, len(x), batch):
        d = reconstruct(x[i:i + batch], params, config) - x[i:i + batch]
        total += float(np.sum(d * d))
    return total / x.size


# -- feature rescaling -----------------------------------------------------

def rescale(raw, lo, hi) -> np.ndarray:
    raw, lo, hi = (np.asarray(a, dtype=np.float64) for a in (raw, lo, hi))
    span = hi - lo
    ok = span > 0
    safe = np.where(ok, span, 1.0)
    return np.where(ok, 2.0 * (raw - lo) / safe - 1.0, 0.0)


def inverse_rescale(scaled, lo, hi) -> np.ndarray:
    scaled, lo, hi = (np.asarray(a, dtype=np.float64) for a in (scaled, lo, hi))
    return lo + (scaled + 1.0) * 0.5 * (hi - lo)


def extract_feature_sequences(images, params: CaeParams, config: CaeConfig,
                              batch: int = 256) -> FeatureSet:
    """Encode ``(sequences, frames, C, H, W)`` images and rescale each component to [-1, 1]."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 5:
        raise DimensionError(f"expected (sequences, frames, C, H, W), got {x.shape}")
    untrained = params.iterations == 0
    if untrained:
        warnings.warn("extracting features with an untrained CAE", RuntimeWarning)
    flat = x.reshape((-1,) + x.shape[2:])
    raw = np.concatenate([encode(flat[i:i + batch], params, config)
                          for i in range(0, len(flat), batch)])
    raw = raw.reshape(x.shape[:2] + (config.feature_dim,))
    lo = raw.min(axis=(0, 1))
    hi = raw.max(axis=(0, 1))
    return FeatureSet(rescale(raw, lo, hi), lo, hi, untrained)


def encode_scaled(image, params: CaeParams, config: CaeConfig, features: FeatureSet) -> np.ndarray:
    """Features of new images on the dataset scale, clipped into [-1, 1]."""
    return np.clip(features.rescale(encode(image, params, config)), -1.0, 1.0)


def decode_scaled(scaled, params: CaeParams, config: CaeConfig, features: FeatureSet) -> np.ndarray:
    return decode(features.inverse(scaled), params, config)


# -- serialization ---------------------------------------------------------

def to_bytes(params: CaeParams, config: CaeConfig) -> bytes:
    header = json.dumps({"config": asdict(config), "iterations": params.iterations},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for t in params.tensors():
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes):
    """Returns ``(params, config)``."""
    if data[:4] != MAGIC:
        raise ValueError(f"bad CAE model magic {data[:4]!r}")
    (hlen,) = struct.unpack_from("<I", data, 4)
    pos = 8 + hlen
    header = json.loads(data[8:pos])
    config = CaeConfig(**header["config"])
    params = init_params(config, zero=True)
    for t in params.tensors():
        t[...] = np.frombuffer(data, "<f4", t.size, pos).reshape(t.shape)
        pos += 4 * t.size
    if pos != len(data):
        raise ValueError("CAE model file size does not match its config")
    params.iterations = header["iterations"]
    return params, config


def save(path, params: CaeParams, config: CaeConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params, config))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
