"""Fully-convolutional segmentation network with instance-norm statistics.

The network keeps full resolution: ``len(widths)`` blocks of
3x3 conv -> instance norm -> ReLU followed by a 1x1 classifier head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, UsageError
from .tensorcore import NormMode, NormStats, Tensor, conv2d, instance_norm, no_grad, relu, softmax

MAGIC = b"SFSA"
FORMAT_VERSION = 1


@dataclass
class ArchConfig:
    n_classes: int = 5
    in_channels: int = 3
    widths: list[int] = field(default_factory=lambda: [16, 32, 32, 32])
    kernel_size: int = 3
    eps: float = 1e-5
    dtype: str = "float64"

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.in_channels < 1 or not self.widths or min(self.widths) < 1:
            raise ConfigError("channel widths must be positive and non-empty")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch_config keys: {sorted(unknown)}")
        return cls(**d)


class ConvLayer:
    def __init__(self, weight: np.ndarray, bias: np.ndarray, pad: int):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.pad = pad

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class NormLayer:
    def __init__(self, channels: int, eps: float, dtype):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stats = NormStats(channels)
        self.eps = eps

    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor, mode: NormMode) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, mode=mode, stats=self.stats, eps=self.eps)


class SegModel:
    """Source/target segmentation network M: (1, 3, H, W) -> (1, C, H, W) logits."""

    def __init__(self, arch: ArchConfig, norm_mode: NormMode | str = NormMode.PER_INSTANCE):
        arch.validate()
        self.arch = arch
        self.norm_mode = NormMode(norm_mode)
        self.layers: list[ConvLayer | NormLayer] = []
        dtype = np.dtype(arch.dtype)
        k = arch.kernel_size
        cin = arch.in_channels
        for w in arch.widths:
            self.layers.append(ConvLayer(np.zeros((w, cin, k, k), dtype), np.zeros(w, dtype), pad=k // 2))
            self.layers.append(NormLayer(w, arch.eps, dtype))
            cin = w
        self.layers.append(ConvLayer(np.zeros((arch.n_classes, cin, 1, 1), dtype), np.zeros(arch.n_classes, dtype), pad=0))

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    @property
    def norm_layers(self) -> list[NormLayer]:
        return [l for l in self.layers if isinstance(l, NormLayer)]

    @property
    def conv_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def norm_affine_parameters(self) -> list[Tensor]:
        return [p for layer in self.norm_layers for p in layer.params()]

    def set_norm_mode(self, mode: NormMode | str) -> "SegModel":
        self.norm_mode = NormMode(mode)
        return self

    def clone(self) -> "SegModel":
        other = SegModel(ArchConfig(**asdict(self.arch)), self.norm_mode)
        for mine, theirs in zip(self.layers, other.layers):
            for p, q in zip(mine.params(), theirs.params()):
                q.data = p.data.copy()
            if isinstance(mine, NormLayer):
                theirs.stats = mine.stats.copy()
        return other

    def __call__(self, image) -> Tensor:
        return forward(self, image)


def _as_input(model: SegModel, image) -> Tensor:
    if isinstance(image, Tensor):
        x = image
    else:
        x = Tensor(np.asarray(image), dtype=np.dtype(model.arch.dtype))
    if x.ndim == 3:
        x = Tensor(x.data[None], dtype=x.dtype)
    if x.ndim != 4 or x.shape[1] != model.arch.in_channels:
        raise ShapeError(f"expected image with {model.arch.in_channels} channels, got shape {x.shape}")
    if x.dtype != np.dtype(model.arch.dtype):
        x = Tensor(x.data.astype(model.arch.dtype), requires_grad=x.requires_grad)
    return x


def forward(model: SegModel, image) -> Tensor:
    """Logits for a (1, 3, H, W) or (3, H, W) image."""
    h = _as_input(model, image)
    for layer in model.layers[:-1]:
        if isinstance(layer, ConvLayer):
            h = layer(h)
        else:
            h = relu(layer(h, model.norm_mode))
    return model.layers[-1](h)


def predict_proba(model: SegModel, image) -> np.ndarray:
    """Softmax probabilities (C, H, W) without recording a graph."""
    with no_grad():
        return softmax(forward(model, image)).data[0]


def predict(model: SegModel, image) -> np.ndarray:
    """Plain argmax label map (H, W) as uint8."""
    with no_grad():
        logits = forward(model, image).data[0]
    return logits.argmax(axis=0).astype(np.uint8)


def init_model(arch: ArchConfig | dict | None = None, seed: int = 0) -> SegModel:
    """Seeded uniform fan-in initialisation, PerInstance mode, zeroed stats."""
    if arch is None:
        arch = ArchConfig()
    elif isinstance(arch, dict):
        arch = ArchConfig.from_dict(arch)
    model = SegModel(arch, NormMode.PER_INSTANCE)
    rng = np.random.default_rng(seed)
    for layer in model.conv_layers:
        w = layer.weight.data
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        bound = np.sqrt(6.0 / fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        layer.bias.data[...] = 0.0
    return model


def update_norm_pass(model: SegModel, dataset: Iterable) -> SegModel:
    """One forward epoch that replaces every norm layer's stored statistics.

    Stats are reset and then running-averaged over the images, so afterwards
    each layer holds the plain mean of per-image means and variances. Only
    statistics change; weights and affine parameters are untouched. The
    model is returned in StoredStats mode.
    """
    norms = model.norm_layers
    if not norms:
        raise UsageError("model has no normalisation layers")
    for layer in norms:
        layer.stats.reset()
    seen = 0
    prev_mode = model.norm_mode
    model.set_norm_mode(NormMode.ACCUMULATE)
    try:
        with no_grad():
            for image in dataset:
                forward(model, image)
                for layer in norms:
                    mu, var = layer.stats.last_batch
                    for b in range(mu.shape[0]):
                        layer.stats.update(mu[b], var[b])
                    layer.stats.last_batch = None
                seen += 1
    except Exception:
        model.set_norm_mode(prev_mode)
        raise
    if seen == 0:
        model.set_norm_mode(prev_mode)
        raise UsageError("update_norm_pass needs a non-empty dataset")
    return model.set_norm_mode(NormMode.STORED_STATS)


# ---------------------------------------------------------------------------
# checkpoints


def _header(model: SegModel) -> bytes:
    cfg = asdict(model.arch)
    cfg["norm_mode"] = model.norm_mode.value
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<I", len(blob)) + blob


def checkpoint_bytes(model: SegModel) -> bytes:
    parts = [_header(model)]
    for layer in model.layers:
        flat = np.concatenate([p.data.ravel() for p in layer.params()]).astype("<f8")
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
        if isinstance(layer, NormLayer):
            parts.append(layer.stats.mean.astype("<f8").tobytes())
            parts.append(layer.stats.var.astype("<f8").tobytes())
            parts.append(struct.pack("<Q", layer.stats.count))
    return b"".join(parts)


def save_checkpoint(model: SegModel, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise EOFError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def model_from_bytes(buf: bytes) -> SegModel:
    r = _Reader(buf)
    try:
        if r.take(4) != MAGIC:
            raise FormatError("not a checkpoint: bad magic bytes")
        version = r.unpack("<I")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        cfg = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
        mode = cfg.pop("norm_mode", NormMode.PER_INSTANCE.value)
        model = SegModel(ArchConfig.from_dict(cfg), mode)
        dtype = np.dtype(model.arch.dtype)
        for layer in model.layers:
            params = layer.params()
            n = r.unpack("<Q")
            expected = sum(p.data.size for p in params)
            if n != expected:
                raise FormatError(f"layer parameter count {n} does not match architecture ({expected})")
            flat = r.f64(n)
            offset = 0
            for p in params:
                p.data = flat[offset:offset + p.data.size].reshape(p.shape).astype(dtype)
                offset += p.data.size
            if isinstance(layer, NormLayer):
                c = layer.stats.mean.shape[0]
                layer.stats.mean = r.f64(c)
                layer.stats.var = r.f64(c)
                layer.stats.count = r.unpack("<Q")
        if r.pos != len(buf):
            raise FormatError("trailing bytes after last layer record")
    except EOFError as exc:
        raise OSError(str(exc)) from exc
    except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from exc
    return model


def load_checkpoint(path) -> SegModel:
    return model_from_bytes(Path(path).read_bytes())


def parameters_equal(a: SegModel, b: SegModel) -> bool:
    """Bitwise equality of all weights and affine parameters."""
    pa, pb = a.parameters(), b.parameters()
    return len(pa) == len(pb) and all(
        x.data.shape == y.data.shape and x.data.tobytes() == y.data.tobytes() for x, y in zip(pa, pb)
    )
