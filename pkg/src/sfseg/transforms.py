"""Augment and spatial transforms, transform pairs and collages.

Arrays handled here are plain numpy:

* images: float (3, H, W)
* label maps: integer (H, W), ``NO_LABEL`` marks unlabeled pixels
* probability maps: float (C, H, W), each pixel on the simplex

Augment kinds (Gaussian, Cutout) only ever touch images. Spatial kinds
(Mirror, Rotate) act on all three, with interpolation and fill chosen by role.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .errors import ShapeError, UsageError
from .tensorcore import NO_LABEL


class Role(str, Enum):
    IMAGE = "image"
    LABEL = "label"
    PROB = "prob"


class Kind(str, Enum):
    MIRROR = "Mirror"
    ROTATE = "Rotate"
    GAUSSIAN = "Gaussian"
    CUTOUT = "Cutout"

    @property
    def spatial(self) -> bool:
        return self in (Kind.MIRROR, Kind.ROTATE)


# canonical composition order
KIND_ORDER = (Kind.MIRROR, Kind.ROTATE, Kind.GAUSSIAN, Kind.CUTOUT)


def _hw(x: np.ndarray) -> tuple[int, int]:
    if x.ndim not in (2, 3):
        raise ShapeError(f"expected (H, W) or (C, H, W) array, got shape {x.shape}")
    return x.shape[-2], x.shape[-1]


# ---------------------------------------------------------------------------
# spatial


def mirror_apply(x: np.ndarray, c: int) -> np.ndarray:
    """Reflect the larger side of a vertical split at column ``c`` onto the smaller.

    A tie (c == W/2) counts as left-larger.
    """
    W = x.shape[-1]
    if not 0 < c < W:
        raise ValueError(f"split column must satisfy 0 < c < {W}, got {c}")
    out = np.array(x, copy=True)
    if c >= W - c:
        n = W - c
        out[..., c:] = x[..., c - 1::-1][..., :n]
    else:
        # right side larger: out[c-1-t] = in[c+t]
        out[..., :c] = x[..., c:2 * c][..., ::-1]
    return out


def _rotation_sources(H: int, W: int, theta_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) coordinates for each output pixel under rotation about the centre."""
    t = math.radians(theta_deg)
    ct, st = math.cos(t), math.sin(t)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: rotate output coordinates by -theta
    src_x = ct * dx + st * dy + cx
    src_y = -st * dx + ct * dy + cy
    return src_y, src_x


def rotate_apply(x: np.ndarray, theta: float, role: Role | str = Role.IMAGE, n_classes: int | None = None) -> np.ndarray:
    """Rotate about the image centre by ``theta`` degrees.

    Images: bilinear, outside filled with 0. Label maps: nearest neighbour,
    outside NO_LABEL. Probability maps: nearest neighbour, outside uniform.
    """
    role = Role(role)
    if abs(theta) > 45:
        raise ValueError(f"rotation angle {theta} outside the supported [-45, 45] range")
    H, W = _hw(x)
    if theta == 0:
        return np.array(x, copy=True)
    sy, sx = _rotation_sources(H, W, theta)

    if role is Role.IMAGE:
        y0 = np.floor(sy).astype(np.intp)
        x0 = np.floor(sx).astype(np.intp)
        fy, fx = sy - y0, sx - x0
        out = np.zeros(x.shape, dtype=np.result_type(x.dtype, np.float64))
        for oy, wy in ((0, 1.0 - fy), (1, fy)):
            for ox, wx in ((0, 1.0 - fx), (1, fx)):
                yi, xi = y0 + oy, x0 + ox
                ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
                vals = x[..., np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
                out += vals * (wy * wx * ok)
        return out.astype(x.dtype, copy=False)

    yi = np.floor(sy + 0.5).astype(np.intp)
    xi = np.floor(sx + 0.5).astype(np.intp)
    ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
    vals = x[..., np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
    if role is Role.LABEL:
        return np.where(ok, vals, NO_LABEL).astype(x.dtype)
    C = x.shape[0] if n_classes is None else n_classes
    return np.where(ok[None], vals, 1.0 / C).astype(x.dtype)


def rotation_valid_mask(H: int, W: int, theta: float) -> np.ndarray:
    """Pixels whose nearest-neighbour source lies inside the image."""
    if theta == 0:
        return np.ones((H, W), dtype=bool)
    sy, sx = _rotation_sources(H, W, theta)
    yi = np.floor(sy + 0.5)
    xi = np.floor(sx + 0.5)
    return (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)


# ---------------------------------------------------------------------------
# augment


def gaussian_kernel1d(ks: int, sigma: float) -> np.ndarray:
    if ks % 2 == 0 or ks < 3:
        raise ValueError(f"kernel size must be odd and >= 3, got {ks}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.arange(ks) - ks // 2
    k = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_apply(x: np.ndarray, ks: int, sigma: float) -> np.ndarray:
    """Separable per-channel Gaussian blur with reflect padding."""
    k = gaussian_kernel1d(ks, sigma)
    r = ks // 2
    img = np.asarray(x, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    H, W = img.shape[-2:]
    if r >= H or r >= W:
        raise ShapeError(f"kernel radius {r} too large for a {H}x{W} image")
    p = np.pad(img, ((0, 0), (0, 0), (r, r)), mode="reflect")
    tmp = sum(k[i] * p[:, :, i:i + W] for i in range(ks))
    p = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = sum(k[i] * p[:, i:i + H, :] for i in range(ks))
    if squeeze:
        out = out[0]
    return out.astype(np.asarray(x).dtype, copy=False)


def cutout_count(H: int, W: int, b: int, p: float) -> int:
    """Number of b x b blocks so that k * b^2 / (H * W) is closest to p."""
    return int(math.floor(p * H * W / (b * b) + 0.5))


def sample_cutout_origins(rng: np.random.Generator, H: int, W: int, b: int, p: float) -> list[tuple[int, int]]:
    if b > min(H, W):
        raise ValueError(f"block size {b} exceeds image size {H}x{W}")
    if not 0 < p < 1:
        raise ValueError("cutout fraction must lie in (0, 1)")
    k = cutout_count(H, W, b, p)
    ys = rng.integers(0, H, size=k)
    xs = rng.integers(0, W, size=k)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def cutout_with_origins(x: np.ndarray, b: int, origins) -> np.ndarray:
    out = np.array(x, copy=True)
    for y, xo in origins:
        out[..., y:y + b, xo:xo + b] = 0
    return out


def cutout_apply(x: np.ndarray, b: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero ``round(p*H*W/b^2)`` randomly placed b x b blocks (clipped, overlaps allowed)."""
    H, W = _hw(x)
    return cutout_with_origins(x, b, sample_cutout_origins(rng, H, W, b, p))


# ---------------------------------------------------------------------------
# collage


def make_collage(xi: np.ndarray, xj: np.ndarray, yi: np.ndarray, yj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left half of (xi, yi) joined with the right half of (xj, yj) along the width."""
    if xi.shape != xj.shape:
        raise ShapeError(f"collage images differ in shape: {xi.shape} vs {xj.shape}")
    if yi.shape != yj.shape or yi.shape != xi.shape[-2:]:
        raise ShapeError("pseudo-label maps must match the image height and width")
    half = xi.shape[-1] // 2
    image = np.concatenate([xi[..., :half], xj[..., half:]], axis=-1)
    labels = np.concatenate([yi[..., :half], yj[..., half:]], axis=-1)
    return image, labels


# ---------------------------------------------------------------------------
# transform objects


@dataclass(frozen=True)
class Transform:
    kind: Kind
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def spatial(self) -> bool:
        return self.kind.spatial

    def apply(self, x: np.ndarray, role: Role | str = Role.IMAGE) -> np.ndarray:
        role = Role(role)
        if not self.spatial and role is not Role.IMAGE:
            raise UsageError(f"{self.kind.value} is an augment transform and only applies to images")
        if self.kind is Kind.MIRROR:
            return mirror_apply(x, self.params["c"])
        if self.kind is Kind.ROTATE:
            return rotate_apply(x, self.params["theta"], role)
        if self.kind is Kind.GAUSSIAN:
            return gaussian_apply(x, self.params["ks"], self.params["sigma"])
        return cutout_with_origins(x, self.params["b"], self.params["origins"])

    def to_dict(self) -> dict:
        params = dict(self.params)
        if "origins" in params:
            params["origins"] = [list(o) for o in params["origins"]]
        return {"kind": self.kind.value, "params": params}

    @classmethod
    def from_dict(cls, d: dict) -> "Transform":
        params = dict(d["params"])
        if "origins" in params:
            params["origins"] = tuple(tuple(o) for o in params["origins"])
        return cls(Kind(d["kind"]), params)


@dataclass(frozen=True)
class TransformPair:
    """Input chain T_i and its spatial-only output chain T_o."""

    input_chain: tuple[Transform, ...]
    output_chain: tuple[Transform, ...]

    def __post_init__(self):
        if not self.input_chain:
            raise ValueError("input chain must be non-empty")
        if tuple(t for t in self.input_chain if t.spatial) != self.output_chain:
            raise ValueError("output chain must be the spatial members of the input chain in order")

    @classmethod
    def from_chain(cls, chain) -> "TransformPair":
        chain = tuple(chain)
        return cls(chain, tuple(t for t in chain if t.spatial))

    @property
    def kinds(self) -> tuple[Kind, ...]:
        return tuple(t.kind for t in self.input_chain)

    def to_dict(self) -> dict:
        return {"input_chain": [t.to_dict() for t in self.input_chain]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformPair":
        return cls.from_chain(Transform.from_dict(t) for t in d["input_chain"])


def apply_chain(chain, x: np.ndarray, role: Role | str = Role.IMAGE) -> np.ndarray:
    for t in chain:
        x = t.apply(x, role)
    return x


def apply_pair(pair: TransformPair, x: np.ndarray, role: Role | str = Role.IMAGE) -> np.ndarray:
    """Images go through T_i; label and probability maps through T_o."""
    role = Role(role)
    chain = pair.input_chain if role is Role.IMAGE else pair.output_chain
    return apply_chain(chain, x, role)


@dataclass
class TransformParams:
    """Sampling ranges. Desk-scale cutout (16 px at 64x96) keeps the b=64 at 512x1024 ratio."""

    rotate_max_deg: float = 5.0
    gaussian_ks: int = 5
    gaussian_sigma_min: float = 0.1
    gaussian_sigma_max: float = 2.0
    cutout_b: int = 16
    cutout_p: float = 0.2
    kinds: tuple[str, ...] = tuple(k.value for k in KIND_ORDER)

    @classmethod
    def full_resolution(cls) -> "TransformParams":
        return cls(cutout_b=64, cutout_p=0.2)


def _sample_one(kind: Kind, rng: np.random.Generator, params: TransformParams, H: int, W: int) -> Transform:
    if kind is Kind.MIRROR:
        return Transform(kind, {"c": int(rng.integers(1, W))})
    if kind is Kind.ROTATE:
        return Transform(kind, {"theta": float(rng.uniform(-params.rotate_max_deg, params.rotate_max_deg))})
    if kind is Kind.GAUSSIAN:
        sigma = float(rng.uniform(params.gaussian_sigma_min, params.gaussian_sigma_max))
        return Transform(kind, {"ks": params.gaussian_ks, "sigma": sigma})
    b = min(params.cutout_b, H, W)
    origins = tuple(sample_cutout_origins(rng, H, W, b, params.cutout_p))
    return Transform(kind, {"b": b, "p": params.cutout_p, "origins": origins})


def sample_transform_pair(rng: np.random.Generator, params: TransformParams | None = None, shape: tuple[int, int] = (64, 96)) -> TransformPair:
    """Uniform non-empty subset of the enabled kinds, composed in canonical order."""
    params = params or TransformParams()
    enabled = [k for k in KIND_ORDER if k.value in params.kinds]
    if not enabled:
        raise ValueError("no transform kinds enabled")
    subset = int(rng.integers(1, 2 ** len(enabled)))
    H, W = shape
    chain = [_sample_one(k, rng, params, H, W) for i, k in enumerate(enabled) if subset >> i & 1]
    return TransformPair.from_chain(chain)
