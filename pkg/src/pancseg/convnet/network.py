"""Network assembly: spec validation, parameter init, forward/backward,
loss, and parameter file I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer list plus the expected (channels, height, width) input."""

    layers: tuple
    input_shape: tuple[int, int, int] = (1, 64, 64)

    def validate(self) -> list[tuple]:
        """Check layers chain consistently; returns per-layer output shapes."""
        shapes = []
        shape = self.input_shape
        flat = False
        if not self.layers or not isinstance(self.layers[-1], L.Softmax):
            raise ValueError("network must end in a softmax layer")
        for i, layer in enumerate(self.layers):
            last = i == len(self.layers) - 1
            if isinstance(layer, L.Softmax):
                if not last:
                    raise ValueError("softmax must be the final layer")
                if layer.classes != 2:
                    raise ValueError("final softmax must be 2-way")
                if not flat or shape != (2,):
                    raise ValueError("softmax input must be 2 units")
            elif isinstance(layer, L.Conv):
                if flat:
                    raise ValueError("conv after flattening")
                c, h, w = shape
                oh, ow = L.conv_out_hw(h, w, layer.kernel, layer.stride,
                                       layer.pad)
                if oh < 1 or ow < 1:
                    raise ValueError(f"conv layer {i} output collapses")
                shape = (layer.out_channels, oh, ow)
            elif isinstance(layer, L.MaxPool):
                if flat:
                    raise ValueError("pool after flattening")
                c, h, w = shape
                oh = (h - layer.window) // layer.step + 1
                ow = (w - layer.window) // layer.step + 1
                if oh < 1 or ow < 1:
                    raise ValueError(f"pool layer {i} output collapses")
                shape = (c, oh, ow)
            elif isinstance(layer, L.FullyConnected):
                shape = (layer.out_units,)
                flat = True
            elif isinstance(layer, L.Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise ValueError("dropout rate must be in [0,1)")
            elif isinstance(layer, L.ReLU):
                pass
            else:
                raise ValueError(f"unknown layer {layer!r}")
            shapes.append(shape)
        return shapes

    def conv_count(self) -> int:
        return sum(isinstance(l, L.Conv) for l in self.layers)

    def to_json(self) -> str:
        def enc(layer):
            d = {"type": type(layer).__name__}
            d.update(vars(layer))
            return d
        return json.dumps({"input_shape": list(self.input_shape),
                           "layers": [enc(l) for l in self.layers]},
                          sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @staticmethod
    def from_json(text: str) -> "NetworkSpec":
        doc = json.loads(text)
        types = {c.__name__: c for c in (L.Conv, L.MaxPool, L.ReLU,
                                         L.FullyConnected, L.Dropout,
                                         L.Softmax)}
        out = []
        for entry in doc["layers"]:
            kw = dict(entry)
            cls = types[kw.pop("type")]
            out.append(cls(**kw))
        return NetworkSpec(layers=tuple(out),
                           input_shape=tuple(doc["input_shape"]))


def standard_spec(input_size: int = 64) -> NetworkSpec:
    """Five-conv architecture for 64x64 single-channel patches."""
    return NetworkSpec(layers=(
        L.Conv(32, 5, 1, 2), L.ReLU(), L.MaxPool(2),
        L.Conv(32, 5, 1, 2), L.ReLU(), L.MaxPool(2),
        L.Conv(64, 3, 1, 1), L.ReLU(),
        L.Conv(64, 3, 1, 1), L.ReLU(), L.MaxPool(2),
        L.Conv(96, 3, 1, 1), L.ReLU(), L.MaxPool(2),
        L.FullyConnected(256), L.ReLU(), L.Dropout(0.5),
        L.FullyConnected(2), L.Softmax(2),
    ), input_shape=(1, input_size, input_size))


def compact_spec(input_size: int = 32) -> NetworkSpec:
    """Lean five-conv variant sized for desk-scale experiments."""
    return NetworkSpec(layers=(
        L.Conv(8, 5, 1, 2), L.ReLU(), L.MaxPool(2),
        L.Conv(16, 3, 1, 1), L.ReLU(), L.MaxPool(2),
        L.Conv(16, 3, 1, 1), L.ReLU(),
        L.Conv(24, 3, 1, 1), L.ReLU(), L.MaxPool(2),
        L.Conv(32, 3, 1, 1), L.ReLU(), L.MaxPool(2),
        L.FullyConnected(64), L.ReLU(), L.Dropout(0.5),
        L.FullyConnected(2), L.Softmax(2),
    ), input_shape=(1, input_size, input_size))


SPEC_REGISTRY = {"standard64": standard_spec, "compact32": compact_spec}


def named_spec(name: str) -> NetworkSpec:
    if name not in SPEC_REGISTRY:
        raise ValueError(f"unknown network spec {name!r}; "
                         f"options: {sorted(SPEC_REGISTRY)}")
    return SPEC_REGISTRY[name]()


def validate_pipeline_spec(spec: NetworkSpec) -> None:
    """The pipeline architecture carries exactly five conv layers; reduced
    specs remain legal for unit tests and gradient checks."""
    spec.validate()
    if spec.conv_count() != 5:
        raise ValueError(
            f"pipeline network needs exactly 5 conv layers, got {spec.conv_count()}")


def init_params(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> list:
    """He-uniform weights (seed-controlled), zero biases; entries align with
    spec.layers (None where a layer has no parameters)."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E7)))
    params = []
    shape = spec.input_shape
    for layer in spec.layers:
        if isinstance(layer, L.Conv):
            c = shape[0]
            fan_in = c * layer.kernel * layer.kernel
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit,
                            size=(layer.out_channels, c, layer.kernel,
                                  layer.kernel)).astype(dtype)
            b = np.zeros(layer.out_channels, dtype=dtype)
            params.append({"w": w, "b": b})
            oh, ow = L.conv_out_hw(shape[1], shape[2], layer.kernel,
                                   layer.stride, layer.pad)
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, L.MaxPool):
            oh = (shape[1] - layer.window) // layer.step + 1
            ow = (shape[2] - layer.window) // layer.step + 1
            shape = (shape[0], oh, ow)
            params.append(None)
        elif isinstance(layer, L.FullyConnected):
            fan_in = int(np.prod(shape))
            limit = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit,
                            size=(layer.out_units, fan_in)).astype(dtype)
            b = np.zeros(layer.out_units, dtype=dtype)
            params.append({"w": w, "b": b})
            shape = (layer.out_units,)
        else:
            params.append(None)
    return params


def _forward_cached(spec: NetworkSpec, params, x, mode, rng):
    caches = []
    out = x
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, L.Conv):
            out, cache = L.conv_forward(out, p["w"], p["b"], layer.stride,
                                        layer.pad)
        elif isinstance(layer, L.MaxPool):
            out, cache = L.maxpool_forward(out, layer.window, layer.step)
        elif isinstance(layer, L.ReLU):
            out, cache = L.relu_forward(out)
        elif isinstance(layer, L.FullyConnected):
            out, cache = L.fc_forward(out, p["w"], p["b"])
        elif isinstance(layer, L.Dropout):
            out, cache = L.dropout_forward(out, layer.rate, mode, rng)
        elif isinstance(layer, L.Softmax):
            out = L.softmax_forward(out)
            cache = None
        caches.append(cache)
    return out, caches


def _check_batch(spec: NetworkSpec, batch):
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(
            f"batch shape {x.shape} incompatible with input {spec.input_shape}")
    return x


def forward(spec: NetworkSpec, params, batch, mode: str = "test",
            rng=None) -> np.ndarray:
    """Class probabilities (batch, 2); rows sum to 1.  Test mode is a pure
    deterministic function; train mode applies inverted dropout from rng."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be train|test, got {mode!r}")
    x = _check_batch(spec, batch)
    probs, _ = _forward_cached(spec, params, x, mode, rng)
    return probs


def loss(probabilities, labels) -> float:
    """Mean cross-entropy with the log clamped at 1e-12."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim != 2 or len(p) != len(y):
        raise ValueError("probabilities must be (batch, classes) matching labels")
    if ((y != 0) & (y != 1)).any():
        raise ValueError("labels must be 0 or 1")
    p_true = p[np.arange(len(y)), y.astype(np.int64)]
    return float(-np.log(np.maximum(p_true, 1e-12)).mean())


def backward(spec: NetworkSpec, params, batch, labels, rng=None,
             return_probs: bool = False):
    """Gradients of mean cross-entropy w.r.t. every parameter (same
    structure as params).  Runs its own train-mode forward pass, so the
    dropout masks come from the rng handed in here."""
    x = _check_batch(spec, batch)
    y = np.asarray(labels).astype(np.int64)
    if ((y != 0) & (y != 1)).any():
        raise ValueError("labels must be 0 or 1")
    probs, caches = _forward_cached(spec, params, x, "train", rng)

    n = len(y)
    delta = probs.astype(np.float64, copy=True)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    delta = delta.astype(x.dtype, copy=False)

    grads: list = [None] * len(spec.layers)
    dy = delta
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        p = params[i]
        cache = caches[i]
        if isinstance(layer, L.Softmax):
            continue  # folded into the cross-entropy delta
        if isinstance(layer, L.Conv):
            dy, dw, db = L.conv_backward(dy, cache, p["w"], layer.stride,
                                         layer.pad)
            grads[i] = {"w": dw, "b": db}
        elif isinstance(layer, L.MaxPool):
            dy = L.maxpool_backward(dy, cache)
        elif isinstance(layer, L.ReLU):
            dy = L.relu_backward(dy, cache)
        elif isinstance(layer, L.FullyConnected):
            dy, dw, db = L.fc_backward(dy, cache, p["w"])
            grads[i] = {"w": dw, "b": db}
        elif isinstance(layer, L.Dropout):
            dy = L.dropout_backward(dy, cache, layer.rate)
    if return_probs:
        return grads, probs
    return grads


_PARAMS_MAGIC = b"PSNP"


def save_params(spec: NetworkSpec, params, path: str, seed: int = 0) -> None:
    """Versioned binary: magic, spec hash + json, per-array shape headers,
    float32 payloads."""
    spec_json = spec.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<IQ", 1, seed))
        fh.write(bytes.fromhex(spec.hash()))
        fh.write(struct.pack("<I", len(spec_json)))
        fh.write(spec_json)
        for p in params:
            if p is None:
                fh.write(struct.pack("<I", 0))
                continue
            fh.write(struct.pack("<I", len(p)))
            for key in sorted(p):
                arr = p[key]
                fh.write(struct.pack("<BI", ord(key), arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f4").tobytes())


def load_params(path: str):
    """Returns (spec, params, seed); refuses files whose hash and spec
    disagree."""
    with open(path, "rb") as fh:
        if fh.read(4) != _PARAMS_MAGIC:
            raise ValueError(f"{path}: not a network params file")
        version, seed = struct.unpack("<IQ", fh.read(12))
        if version != 1:
            raise ValueError(f"{path}: unsupported params version {version}")
        spec_hash = fh.read(32).hex()
        (n,) = struct.unpack("<I", fh.read(4))
        spec = NetworkSpec.from_json(fh.read(n).decode())
        if spec.hash() != spec_hash:
            raise ValueError(f"{path}: spec hash mismatch")
        params = []
        for layer in spec.layers:
            (count,) = struct.unpack("<I", fh.read(4))
            if count == 0:
                params.append(None)
                continue
            entry = {}
            for _ in range(count):
                key_code, ndim = struct.unpack("<BI", fh.read(5))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                size = int(np.prod(shape))
                arr = np.frombuffer(fh.read(4 * size),
                                    dtype="<f4").reshape(shape).copy()
                entry[chr(key_code)] = arr
            params.append(entry)
    return spec, params, seed
