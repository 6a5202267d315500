"""Small classifiers with hand-written forward and backward passes.

Two architectures are supported:

* ``mlp``: dense layers with ReLU between them, ``layer_sizes`` lists
  widths from input to classes.
* ``tiny_conv``: conv3x3(c1)-ReLU-maxpool2, conv3x3(c2)-ReLU-maxpool2,
  flatten, dense(classes). Convolutions use stride 1 and zero padding 1.

Parameters are an ordered ``dict`` of float64 arrays. Dense weights are
stored ``(fan_in, fan_out)``; conv kernels ``(c_out, c_in, 3, 3)``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

Params = dict[str, np.ndarray]

KINDS = ("mlp", "tiny_conv")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    input_shape: tuple[int, ...] = (784,)
    class_count: int = 10
    layer_sizes: tuple[int, ...] = (784, 256, 128, 10)
    channels: tuple[int, int] = (8, 16)
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layer_sizes", tuple(int(v) for v in self.layer_sizes))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be positive, got {self.input_shape}")
        if self.kind == "mlp":
            sizes = self.layer_sizes
            if len(sizes) < 3:
                raise ValueError("mlp needs at least one hidden layer")
            if any(s < 1 for s in sizes):
                raise ValueError(f"layer sizes must be positive, got {sizes}")
            if sizes[0] != math.prod(self.input_shape):
                raise ValueError(f"first layer width {sizes[0]} != input size {math.prod(self.input_shape)}")
            if sizes[-1] != self.class_count:
                raise ValueError(f"output width {sizes[-1]} != class_count {self.class_count}")
        else:
            if len(self.input_shape) != 3:
                raise ValueError("tiny_conv input_shape must be (channels, height, width)")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ValueError(f"tiny_conv needs height and width divisible by 4, got {h}x{w}")
            if len(self.channels) != 2 or min(self.channels) < 1:
                raise ValueError(f"tiny_conv channels must be two positive ints, got {self.channels}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes, in the canonical iteration order."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.kind == "mlp":
            for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
                shapes[f"dense{i}.W"] = (a, b)
                shapes[f"dense{i}.b"] = (b,)
        else:
            c0, h, w = self.input_shape
            c1, c2 = self.channels
            shapes["conv0.W"] = (c1, c0, 3, 3)
            shapes["conv0.b"] = (c1,)
            shapes["conv1.W"] = (c2, c1, 3, 3)
            shapes["conv1.b"] = (c2,)
            shapes["dense0.W"] = (c2 * (h // 4) * (w // 4), self.class_count)
            shapes["dense0.b"] = (self.class_count,)
        return shapes

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        d = dict(d)
        for key in ("input_shape", "layer_sizes", "channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def mlp_spec(layer_sizes, init_seed: int = 0) -> ModelSpec:
    sizes = tuple(layer_sizes)
    return ModelSpec(kind="mlp", input_shape=(sizes[0],), class_count=sizes[-1],
                     layer_sizes=sizes, init_seed=init_seed)


def init_params(spec: ModelSpec, seed: int | None = None) -> Params:
    """He-normal weights (variance 2 / fan_in) and zero biases."""
    spec.validate()
    rng = np.random.default_rng(spec.init_seed if seed is None else seed)
    params: Params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = math.prod(shape[1:]) if len(shape) == 4 else shape[0]
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return params


def count_params(params: Params) -> int:
    return sum(p.size for p in params.values())


# -- layers -----------------------------------------------------------------

def _conv3x3(x, w, b):
    """Same-padded 3x3 convolution. x: (n, ci, h, w), w: (co, ci, 3, 3)."""
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd))
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + h, dj:dj + wd]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, di, dj])
    return out + b[None, :, None, None], xp


def _conv3x3_backward(dout, xp, w):
    n, co, h, wd = dout.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + h, dj:dj + wd]
            dw[:, :, di, dj] = np.einsum("nohw,nchw->oc", dout, patch)
            dxp[:, :, di:di + h, dj:dj + wd] += np.einsum("nohw,oc->nchw", dout, w[:, :, di, dj])
    db = dout.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _maxpool2(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)  # first max wins, so the routed gradient is unique
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool2_backward(dout, idx, shape):
    n, c, h, w = shape
    win = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


# -- forward / backward -----------------------------------------------------

@dataclass
class Cache:
    spec: ModelSpec
    batch_size: int
    param_ids: dict[str, int]
    values: dict[str, Any] = field(default_factory=dict)


def _check_params(spec: ModelSpec, params: Params):
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ValueError(f"parameter names {list(params)} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def forward(spec: ModelSpec, params: Params, batch) -> tuple[np.ndarray, Cache]:
    """Logits for ``batch`` plus the activation record ``backward`` needs."""
    x = np.asarray(batch, dtype=np.float64)
    n = x.shape[0]
    per_sample = math.prod(spec.input_shape)
    if x.ndim < 2 or math.prod(x.shape[1:]) != per_sample:
        raise ValueError(f"batch shape {x.shape} does not match model input {spec.input_shape}")
    cache = Cache(spec, n, {k: id(v) for k, v in params.items()})
    v = cache.values
    if spec.kind == "mlp":
        a = x.reshape(n, per_sample)
        layers = len(spec.layer_sizes) - 1
        for i in range(layers):
            v[f"in{i}"] = a
            z = a @ params[f"dense{i}.W"] + params[f"dense{i}.b"]
            if i < layers - 1:
                v[f"z{i}"] = z
                a = np.maximum(z, 0.0)
            else:
                a = z
        return a, cache
    a = x.reshape((n,) + spec.input_shape)
    for i in range(2):
        z, xp = _conv3x3(a, params[f"conv{i}.W"], params[f"conv{i}.b"])
        v[f"xp{i}"] = xp
        v[f"z{i}"] = z
        a, idx = _maxpool2(np.maximum(z, 0.0))
        v[f"pool{i}"] = idx
    v["flat_shape"] = a.shape
    flat = a.reshape(n, -1)
    v["flat"] = flat
    return flat @ params["dense0.W"] + params["dense0.b"], cache


def backward(spec: ModelSpec, params: Params, cache: Cache, grad_logits) -> Params:
    """Gradients of the loss w.r.t. every parameter, given dLoss/dlogits."""
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.spec != spec or cache.param_ids != {k: id(p) for k, p in params.items()}:
        raise ValueError("cache was produced by a different model or parameter set")
    if g.shape != (cache.batch_size, spec.class_count):
        raise ValueError(f"grad_logits shape {g.shape} does not match logits "
                         f"({cache.batch_size}, {spec.class_count})")
    v = cache.values
    grads: Params = {}
    if spec.kind == "mlp":
        for i in reversed(range(len(spec.layer_sizes) - 1)):
            if i < len(spec.layer_sizes) - 2:
                g = g * (v[f"z{i}"] > 0)
            grads[f"dense{i}.W"] = v[f"in{i}"].T @ g
            grads[f"dense{i}.b"] = g.sum(axis=0)
            if i:
                g = g @ params[f"dense{i}.W"].T
    else:
        grads["dense0.W"] = v["flat"].T @ g
        grads["dense0.b"] = g.sum(axis=0)
        g = (g @ params["dense0.W"].T).reshape(v["flat_shape"])
        for i in (1, 0):
            z = v[f"z{i}"]
            g = _maxpool2_backward(g, v[f"pool{i}"], z.shape) * (z > 0)
            g, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = _conv3x3_backward(g, v[f"xp{i}"], params[f"conv{i}.W"])
    return {name: grads[name] for name in spec.param_shapes()}


def predict(spec: ModelSpec, params: Params, inputs, chunk: int = 1024) -> np.ndarray:
    """Logits for a whole dataset, computed in fixed-size chunks."""
    inputs = np.asarray(inputs)
    parts = [forward(spec, params, inputs[i:i + chunk])[0] for i in range(0, inputs.shape[0], chunk)]
    if not parts:
        return np.zeros((0, spec.class_count))
    return np.concatenate(parts)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"DRKD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file could not be read."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Params
    metadata: dict[str, Any] = field(default_factory=dict)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    _check_params(ckpt.spec, ckpt.params)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in ckpt.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps({"spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata,
                         "tensors": manifest}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header, *blobs])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if 12 + hlen > len(buf):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        manifest = header["tensors"]
        metadata = header["metadata"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    data = memoryview(buf)[12 + hlen:]
    expected = spec.param_shapes()
    params: Params = {}
    end = 0
    for entry in manifest:
        name = entry.get("name")
        shape = tuple(entry.get("shape", ()))
        if name not in expected or expected[name] != shape:
            raise CheckpointError(f"tensor {name!r}: shape {shape} does not match spec")
        start = entry["offset"]
        end = start + 8 * math.prod(shape)
        if end > len(data):
            raise CheckpointError(f"tensor {name!r}: data truncated")
        params[name] = np.frombuffer(data[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    if list(params) != list(expected):
        missing = [k for k in expected if k not in params]
        raise CheckpointError(f"tensor {missing[0] if missing else '?'!r}: missing or out of order")
    if end != len(data):
        raise CheckpointError("trailing bytes after tensor data")
    return Checkpoint(spec, params, metadata)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
