"""Minimal neural-network engine: dense and band-convolution layers with exact backprop.

Layers are purely functional: ``forward`` returns ``(y, cache)`` and ``backward``
consumes that cache, so several forward passes can coexist before their
backward passes run (the adversarial trainer needs this). Parameter gradients
accumulate into ``layer.grads`` until ``zero_grads`` is called.

Network blocks follow the order affine -> relu -> batchnorm -> dropout; the
final layer is always a single linear regression head. Convolutional variants
treat the band axis as a length-16, single-channel sequence and use valid
padding with stride 1, so feature length shrinks by kernel-1 per stage.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError, ShapeError
from .rng import substream

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

_KIND_CODES = {"dense": 1, "conv1d": 2, "relu": 3, "batchnorm": 4, "dropout": 5,
               "linear_output": 6}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """One layer in an architecture description.

    nodes applies to dense/linear_output, channels and kernel to conv1d,
    rate to dropout; unused fields stay zero.
    """

    kind: str
    nodes: int = 0
    channels: int = 0
    kernel: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "linear_output") and self.nodes < 1:
            raise ConfigError(f"{self.kind} layer needs nodes >= 1")
        if self.kind == "conv1d":
            if self.channels < 1:
                raise ConfigError("conv1d layer needs channels >= 1")
            if self.kernel < 1:
                raise ConfigError("conv1d kernel width must be >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")


def fcn_spec(hidden=(64, 128, 256), rate: float = 0.2) -> list:
    """Fully connected regressor: three hidden blocks then a linear head."""
    specs = []
    for width in hidden:
        specs += [LayerSpec("dense", nodes=width), LayerSpec("relu"),
                  LayerSpec("batchnorm"), LayerSpec("dropout", rate=rate)]
    specs.append(LayerSpec("linear_output", nodes=1))
    return specs


def cnn_spec(channels=(16, 32), kernel: int = 2, rate: float = 0.2) -> list:
    """Convolutional regressor over the band axis, flattened into a linear head."""
    specs = []
    for ch in channels:
        specs += [LayerSpec("conv1d", channels=ch, kernel=kernel), LayerSpec("relu"),
                  LayerSpec("batchnorm"), LayerSpec("dropout", rate=rate)]
    specs.append(LayerSpec("linear_output", nodes=1))
    return specs


class Dense:
    """Affine map. Inputs with more than 2 axes are flattened per sample."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng, dtype):
        bound = 1.0 / np.sqrt(n_in)
        self.w = rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype)
        self.b = rng.uniform(-bound, bound, n_out).astype(dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]

    def buffers(self):
        return []

    def forward(self, x, train, rng):
        shape = x.shape
        if x.ndim > 2:
            x = x.reshape(shape[0], -1)
        return x @ self.w + self.b, (x, shape)

    def backward(self, gy, cache):
        x, shape = cache
        self.gw += x.T @ gy
        self.gb += gy.sum(axis=0)
        gx = gy @ self.w.T
        return gx.reshape(shape)


class Conv1D:
    """Valid 1-d convolution, stride 1, over (batch, length, channels) tensors."""

    kind = "conv1d"

    def __init__(self, n_in: int, n_out: int, kernel: int, rng, dtype):
        bound = 1.0 / np.sqrt(kernel * n_in)
        self.w = rng.uniform(-bound, bound, (kernel, n_in, n_out)).astype(dtype)
        self.b = rng.uniform(-bound, bound, n_out).astype(dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.kernel = kernel

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.gw, self.gb]

    def buffers(self):
        return []

    def forward(self, x, train, rng):
        k = self.kernel
        n, length, _ = x.shape
        if length < k:
            raise ShapeError(f"sequence length {length} shorter than kernel {k}")
        out = length - k + 1
        y = x[:, 0:out, :] @ self.w[0]
        for dk in range(1, k):
            y += x[:, dk:dk + out, :] @ self.w[dk]
        return y + self.b, x

    def backward(self, gy, cache):
        x = cache
        k = self.kernel
        out = gy.shape[1]
        n_out = gy.shape[2]
        flat = gy.reshape(-1, n_out)
        gx = np.zeros_like(x)
        for dk in range(k):
            window = x[:, dk:dk + out, :]
            self.gw[dk] += window.reshape(-1, window.shape[2]).T @ flat
            gx[:, dk:dk + out, :] += gy @ self.w[dk].T
        self.gb += flat.sum(axis=0)
        return gx


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def grads(self):
        return []

    def buffers(self):
        return []

    def forward(self, x, train, rng):
        return np.maximum(x, 0), x > 0

    def backward(self, gy, cache):
        return gy * cache


class BatchNorm:
    """Per-feature normalization over every axis but the last.

    Train mode normalizes with the batch statistics and folds them into the
    running estimates; eval mode applies the running statistics, which makes
    it a fixed affine map.
    """

    kind = "batchnorm"

    def __init__(self, width: int, dtype):
        self.gamma = np.ones(width, dtype=dtype)
        self.beta = np.zeros(width, dtype=dtype)
        self.run_mean = np.zeros(width, dtype=dtype)
        self.run_var = np.ones(width, dtype=dtype)
        self.g_gamma = np.zeros_like(self.gamma)
        self.g_beta = np.zeros_like(self.beta)

    def params(self):
        return [self.gamma, self.beta]

    def grads(self):
        return [self.g_gamma, self.g_beta]

    def buffers(self):
        return [self.run_mean, self.run_var]

    def forward(self, x, train, rng):
        width = x.shape[-1]
        flat = x.reshape(-1, width)
        if train:
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
            self.run_mean += _BN_MOMENTUM * (mean - self.run_mean)
            self.run_var += _BN_MOMENTUM * (var - self.run_var)
        else:
            mean, var = self.run_mean, self.run_var
        inv = 1.0 / np.sqrt(var + np.asarray(_BN_EPS, dtype=x.dtype))
        xhat = (flat - mean) * inv
        y = (self.gamma * xhat + self.beta).reshape(x.shape)
        return y, (xhat, inv, x.shape, train)

    def backward(self, gy, cache):
        xhat, inv, shape, train = cache
        width = shape[-1]
        g = gy.reshape(-1, width)
        self.g_gamma += (g * xhat).sum(axis=0)
        self.g_beta += g.sum(axis=0)
        if not train:
            return (g * self.gamma * inv).reshape(shape)
        gh = g * self.gamma
        gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx.reshape(shape)


class Dropout:
    """Inverted dropout: eval mode is the identity."""

    kind = "dropout"

    def __init__(self, rate: float):
        self.rate = rate
        self.fixed_mask = None  # test hook for finite-difference checks

    def params(self):
        return []

    def grads(self):
        return []

    def buffers(self):
        return []

    def forward(self, x, train, rng):
        if not train or self.rate == 0.0:
            return x, None
        if self.fixed_mask is not None:
            mask = self.fixed_mask
        else:
            if rng is None:
                raise ConfigError("train-mode forward through dropout needs an rng")
            mask = rng.random(x.shape) >= self.rate
        scale = np.asarray(1.0 / (1.0 - self.rate), dtype=x.dtype)
        return x * mask * scale, (mask, scale)

    def backward(self, gy, cache):
        if cache is None:
            return gy
        mask, scale = cache
        return gy * mask * scale


def _build_layers(specs, input_width: int, rng, dtype):
    layers = []
    conv_mode = specs[0].kind == "conv1d"
    length = input_width if conv_mode else 0
    channels = 1
    width = input_width
    for spec in specs:
        if spec.kind == "dense":
            layers.append(Dense(width, spec.nodes, rng, dtype))
            width, conv_mode = spec.nodes, False
        elif spec.kind == "linear_output":
            feat = length * channels if conv_mode else width
            layers.append(Dense(feat, spec.nodes, rng, dtype))
            width, conv_mode = spec.nodes, False
        elif spec.kind == "conv1d":
            if not conv_mode:
                raise ConfigError("conv1d layer after the sequence was flattened")
            if spec.kernel > length:
                raise ConfigError(f"kernel {spec.kernel} exceeds sequence length {length}")
            layers.append(Conv1D(channels, spec.channels, spec.kernel, rng, dtype))
            length -= spec.kernel - 1
            channels = spec.channels
            width = length * channels
        elif spec.kind == "relu":
            layers.append(ReLU())
        elif spec.kind == "batchnorm":
            layers.append(BatchNorm(channels if conv_mode else width, dtype))
        elif spec.kind == "dropout":
            layers.append(Dropout(spec.rate))
    return layers, (length * channels if conv_mode else width)


class Network:
    """Feature generator plus linear regression head, optional domain head.

    The last spec must be a single-unit linear_output; everything before it is
    the feature generator. ``forward`` reports the tensor feeding the head so
    a discriminator can branch off the same features.
    """

    def __init__(self, specs, input_width: int, seed: int, dtype=np.float32,
                 discriminator: bool = False):
        specs = list(specs)
        if not specs or specs[-1].kind != "linear_output" or specs[-1].nodes != 1:
            raise ConfigError("architecture must end in a single-unit linear_output")
        if sum(s.kind == "linear_output" for s in specs) != 1:
            raise ConfigError("exactly one linear_output layer is allowed")
        self.specs = specs
        self.input_width = input_width
        self.dtype = np.dtype(dtype)
        rng = substream(seed, "net-init")
        self.layers, _ = _build_layers(specs, input_width, rng, self.dtype)
        self.head = self.layers[-1]
        feature_width = self.head.w.shape[0]
        self.discriminator = (Dense(feature_width, 1, substream(seed, "disc-init"),
                                    self.dtype) if discriminator else None)

    @property
    def conv_input(self) -> bool:
        return self.specs[0].kind == "conv1d"

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.params()
        return out

    def grads(self):
        out = []
        for layer in self.layers:
            out += layer.grads()
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0
        if self.discriminator is not None:
            for g in self.discriminator.grads():
                g[...] = 0

    def state_arrays(self):
        """Every array that defines behaviour: params, buffers, then the domain head."""
        out = []
        for layer in self.layers:
            out += layer.params() + layer.buffers()
        if self.discriminator is not None:
            out += self.discriminator.params()
        return out

    def snapshot(self):
        return [a.copy() for a in self.state_arrays()]

    def restore(self, snap):
        for dst, src in zip(self.state_arrays(), snap):
            dst[...] = src

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"expected (n, {self.input_width}) features, got {x.shape}")
        if self.conv_input:
            x = x[:, :, None]
        return x

    def forward(self, x, train: bool = False, rng=None):
        """Run the generator; returns (predictions, head-input features, caches)."""
        x = self._prepare(x)
        caches = []
        for layer in self.layers[:-1]:
            x, cache = layer.forward(x, train, rng)
            caches.append(cache)
        features = x
        pred, head_cache = self.head.forward(x, train, rng)
        caches.append(head_cache)
        return pred[:, 0], features, caches

    def backward(self, g_pred, caches, g_features=None):
        """Accumulate generator gradients.

        g_pred is d(loss)/d(prediction) or None to skip the head path;
        g_features is an optional extra gradient injected at the head input
        (the discriminator path).
        """
        if g_pred is not None:
            gx = self.head.backward(np.asarray(g_pred, dtype=self.dtype)[:, None],
                                    caches[-1])
        else:
            gx = 0.0
        if g_features is not None:
            gx = gx + g_features
        for layer, cache in zip(reversed(self.layers[:-1]), reversed(caches[:-1])):
            gx = layer.backward(gx, cache)
        return gx

    def predict(self, x):
        """Eval-mode predictions clamped to the unit interval."""
        pred, _, _ = self.forward(x, train=False)
        return np.clip(pred, 0.0, 1.0)


def fold_inference_weights(net: Network):
    """Collapse an all-dense eval network into a list of (w, b) affine stages.

    Batchnorm in eval mode is affine, so it folds into the next dense layer;
    relu stays as the nonlinearity between stages; dropout vanishes. Returns
    None when the network contains convolutions (no fast path there).
    """
    if net.conv_input:
        return None
    stages = []
    scale = None
    shift = None
    for layer in net.layers:
        if isinstance(layer, Dense):
            w = layer.w
            b = layer.b
            if scale is not None:
                w = scale[:, None] * w
                b = b + shift @ layer.w
                scale = shift = None
            stages.append((np.ascontiguousarray(w), b.copy()))
        elif isinstance(layer, BatchNorm):
            inv = 1.0 / np.sqrt(layer.run_var + _BN_EPS)
            s = (layer.gamma * inv).astype(net.dtype)
            t = (layer.beta - layer.gamma * layer.run_mean * inv).astype(net.dtype)
            if scale is None:
                scale, shift = s, t
            else:  # two affines in a row just compose
                shift = shift * s + t
                scale = scale * s
        elif isinstance(layer, (ReLU, Dropout)):
            continue
    if scale is not None:  # trailing batchnorm with no dense after it
        return None
    return stages


def _normalize_rows(flat):
    # trapezoid area over the band index; non-positive rows become zero spectra
    area = 0.5 * (flat[:, 0] + flat[:, -1]) + flat[:, 1:-1].sum(axis=1)
    good = area > 0
    out = np.zeros_like(flat)
    np.divide(flat, area[:, None], out=out, where=good[:, None])
    return out


def infer_map(net: Network, hypercube, normalize: bool = True,
              chunk: int = 1024) -> np.ndarray:
    """Predict an oxygenation map from an (H, W, bands) reflectance stack.

    Optionally area-normalizes each pixel spectrum first. Output is clamped
    to [0, 1]. Pixels whose spectral area is not positive are treated as zero
    spectra rather than raising, so arbitrary finite frames stay mappable.

    All-dense networks run through the folded affine stages in chunks sized
    to stay cache-resident; chunk is a tuning knob, not a semantic one.
    """
    cube = np.asarray(hypercube, dtype=net.dtype)
    if cube.ndim != 3 or cube.shape[2] != net.input_width:
        raise ShapeError(f"expected (h, w, {net.input_width}) stack, got {cube.shape}")
    h, w, bands = cube.shape
    flat = np.ascontiguousarray(cube.reshape(-1, bands))
    n = flat.shape[0]
    stages = fold_inference_weights(net)
    out = np.empty(n, dtype=net.dtype)
    if stages is None:  # generic eval path for convolutional nets
        for lo in range(0, n, chunk):
            block = flat[lo:lo + chunk]
            if normalize:
                block = _normalize_rows(block)
            pred, _, _ = net.forward(block, train=False)
            out[lo:lo + chunk] = pred
        return np.clip(out, 0.0, 1.0).reshape(h, w)
    norm_buf = np.empty((chunk, bands), dtype=net.dtype)
    bufs = [np.empty((chunk, wgt.shape[1]), dtype=net.dtype) for wgt, _ in stages]
    last = len(stages) - 1
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        x = flat[lo:hi]
        if normalize:
            area = 0.5 * (x[:, 0] + x[:, -1]) + x[:, 1:-1].sum(axis=1)
            inv = np.where(area > 0, 1.0, 0.0) / np.where(area > 0, area, 1.0)
            np.multiply(x, inv[:, None], out=norm_buf[:m])
            x = norm_buf[:m]
        for i, (wgt, bias) in enumerate(stages):
            dst = bufs[i][:m]
            np.dot(x, wgt, out=dst)
            dst += bias
            if i < last:
                np.maximum(dst, 0, out=dst)
            x = dst
        out[lo:hi] = x[:, 0]
    return np.clip(out, 0.0, 1.0).reshape(h, w)


_MODEL_MAGIC = b"OXNN"
_MODEL_VERSION = 1
_SPEC_PACK = "<BiifB"  # kind, nodes/channels, kernel, rate, reserved


def save_model(net: Network, path) -> None:
    """Write a little-endian model file: header, layer table, parameters, CRC."""
    head = struct.pack("<4sHHiBB", _MODEL_MAGIC, _MODEL_VERSION, len(net.specs),
                       net.input_width, net.dtype.itemsize,
                       1 if net.discriminator is not None else 0)
    table = b"".join(
        struct.pack(_SPEC_PACK, _KIND_CODES[s.kind],
                    s.nodes if s.kind in ("dense", "linear_output") else s.channels,
                    s.kernel, s.rate, 0)
        for s in net.specs)
    blob = b"".join(a.tobytes() for a in net.state_arrays())
    payload = head + table + blob
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def model_file_size(net: Network) -> int:
    """Exact on-disk size implied by the format layout."""
    n_values = sum(a.size for a in net.state_arrays())
    return 14 + 14 * len(net.specs) + n_values * net.dtype.itemsize + 4


def load_model(path, expected_specs=None) -> Network:
    """Rebuild a network from ``save_model`` output.

    expected_specs, when given, must match the stored layer table exactly;
    a mismatch raises instead of silently reshaping weights.
    """
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < 18 or payload[:4] != _MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model file")
    body, trailer = payload[:-4], payload[-4:]
    if struct.unpack("<I", trailer)[0] != (zlib.crc32(body) & 0xFFFFFFFF):
        raise DataFormatError(f"{path}: model checksum mismatch; file is corrupted")
    magic, version, n_specs, input_width, itemsize, has_disc = struct.unpack(
        "<4sHHiBB", body[:14])
    if version != _MODEL_VERSION:
        raise DataFormatError(f"{path}: unsupported model version {version}")
    if itemsize not in (4, 8):
        raise DataFormatError(f"{path}: bad parameter width {itemsize}")
    specs = []
    off = 14
    for _ in range(n_specs):
        code, a, kernel, rate, _pad = struct.unpack(_SPEC_PACK, body[off:off + 14])
        off += 14
        kind = _CODE_KINDS.get(code)
        if kind is None:
            raise DataFormatError(f"{path}: unknown layer code {code}")
        if kind in ("dense", "linear_output"):
            specs.append(LayerSpec(kind, nodes=a))
        elif kind == "conv1d":
            specs.append(LayerSpec(kind, channels=a, kernel=kernel))
        elif kind == "dropout":
            specs.append(LayerSpec(kind, rate=rate))
        else:
            specs.append(LayerSpec(kind))
    if expected_specs is not None:
        # stored rates went through float32, so compare at that precision
        def key(s):
            return (s.kind, s.nodes, s.channels, s.kernel, float(np.float32(s.rate)))

        if [key(s) for s in expected_specs] != [key(s) for s in specs]:
            raise DataFormatError(f"{path}: stored topology does not match the "
                                  "requested architecture")
    dtype = np.float32 if itemsize == 4 else np.float64
    net = Network(specs, input_width, seed=0, dtype=dtype, discriminator=bool(has_disc))
    arrays = net.state_arrays()
    need = sum(a.size for a in arrays) * itemsize
    if len(body) - off != need:
        raise DataFormatError(f"{path}: parameter blob is {len(body) - off} bytes, "
                              f"topology needs {need}")
    for arr in arrays:
        n = arr.size * itemsize
        arr[...] = np.frombuffer(body[off:off + n], dtype=dtype).reshape(arr.shape)
        off += n
    return net
