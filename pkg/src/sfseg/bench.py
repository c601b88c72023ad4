"""Synthetic two-domain segmentation benchmark, dataset I/O and metrics.

Images are random shapes on a background; every class has a base colour.
Source and target share the geometry process and differ only in appearance
(hue rotation, contrast/brightness, blur, noise). Pixel values are quantised
to 8 bits at generation time so in-memory and on-disk data agree exactly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, ShapeError
from .segmodel import ArchConfig, SegModel, forward, init_model, predict, update_norm_pass
from .tensorcore import NO_LABEL, OptimizerState, backward, hard_ce_masked, poly_lr, sgd_step
from .transforms import gaussian_apply

log = logging.getLogger(__name__)

SHAPES = ("disk", "rectangle", "triangle", "stripe")
DEFAULT_PALETTE = (
    (0.50, 0.50, 0.50),  # background
    (0.80, 0.25, 0.25),
    (0.25, 0.75, 0.30),
    (0.25, 0.35, 0.85),
    (0.85, 0.80, 0.20),
)


@dataclass
class DomainSpec:
    palette: list[list[float]] = field(default_factory=lambda: [list(c) for c in DEFAULT_PALETTE])
    shapes: list[str] = field(default_factory=lambda: list(SHAPES))
    image_size: list[int] = field(default_factory=lambda: [64, 96])
    shapes_per_image: list[int] = field(default_factory=lambda: [3, 7])
    color_jitter: float = 0.05
    noise_sigma: float = 0.02
    blur_sigma: float = 0.0
    hue_shift_deg: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0

    @property
    def n_classes(self) -> int:
        return len(self.shapes) + 1

    def validate(self) -> None:
        if len(self.palette) != self.n_classes:
            raise ConfigError(f"palette has {len(self.palette)} colours for {self.n_classes} classes")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ConfigError(f"unknown shapes {sorted(unknown)}")
        H, W = self.image_size
        if H < 16 or W < 16:
            raise ConfigError("image size must be at least 16x16")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ConfigError("shapes_per_image must be an ordered non-negative range")
        if hi > H * W // 256:
            raise ConfigError(f"{hi} shapes overflow a {H}x{W} canvas (max {H * W // 256})")

    def same_geometry(self, other: "DomainSpec") -> bool:
        return (self.shapes, self.image_size, self.shapes_per_image) == (other.shapes, other.image_size, other.shapes_per_image)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown DomainSpec keys: {sorted(unknown)}")
        return cls(**d)


def default_source_spec() -> DomainSpec:
    return DomainSpec()


def default_target_spec() -> DomainSpec:
    return DomainSpec(noise_sigma=0.08, blur_sigma=1.0, hue_shift_deg=40.0, contrast=0.7, brightness=0.1)


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, 3, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N, H, W) uint8

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# generation


def _shape_mask(kind: str, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = rng.uniform(0, H), rng.uniform(0, W)
    if kind == "disk":
        r = rng.uniform(5, 12)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        h, w = rng.uniform(8, 20), rng.uniform(8, 24)
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    if kind == "triangle":
        size = rng.uniform(10, 22)
        ang = rng.uniform(0, 2 * math.pi)
        pts = [(cy + size * 0.6 * math.sin(ang + k * 2 * math.pi / 3), cx + size * 0.6 * math.cos(ang + k * 2 * math.pi / 3)) for k in range(3)]
        orient = _orientation(pts)
        inside = np.ones((H, W), dtype=bool)
        for (y1, x1), (y2, x2) in zip(pts, pts[1:] + pts[:1]):
            inside &= ((x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)) * orient >= 0
        return inside
    # stripe: thick segment
    length = rng.uniform(25, 60)
    thick = rng.uniform(2.5, 4.5)
    ang = rng.uniform(0, math.pi)
    dy, dx = math.sin(ang), math.cos(ang)
    along = (yy - cy) * dy + (xx - cx) * dx
    across = -(yy - cy) * dx + (xx - cx) * dy
    return (np.abs(along) <= length / 2) & (np.abs(across) <= thick / 2)


def _orientation(pts) -> float:
    (y1, x1), (y2, x2), (y3, x3) = pts
    return 1.0 if (x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1) >= 0 else -1.0


def render_labels(rng: np.random.Generator, spec: DomainSpec) -> np.ndarray:
    """Random label map: shapes painted in order over background 0."""
    H, W = spec.image_size
    labels = np.zeros((H, W), dtype=np.uint8)
    lo, hi = spec.shapes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(1, spec.n_classes))
        mask = _shape_mask(spec.shapes[cls - 1], rng, H, W)
        labels[mask] = cls
    return labels


def _hue_matrix(deg: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    k = 1.0 / 3.0
    sq = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - sq * s, k * (1 - c) + sq * s],
        [k * (1 - c) + sq * s, c + k * (1 - c), k * (1 - c) - sq * s],
        [k * (1 - c) - sq * s, k * (1 - c) + sq * s, c + k * (1 - c)],
    ])


def render_image(rng: np.random.Generator, labels: np.ndarray, spec: DomainSpec) -> np.ndarray:
    """Appearance for a label map: class colours, jitter, shift, blur, noise, 8-bit quantisation."""
    palette = np.asarray(spec.palette, dtype=np.float64)
    H, W = labels.shape
    colors = palette[labels]  # H, W, 3
    # one colour offset per class, redrawn for every image
    jitter = rng.normal(0.0, spec.color_jitter, size=(spec.n_classes, 3))
    img = colors + jitter[labels]
    if spec.hue_shift_deg:
        img = img @ _hue_matrix(spec.hue_shift_deg).T
    img = (img - 0.5) * spec.contrast + 0.5 + spec.brightness
    img = img.transpose(2, 0, 1)
    if spec.blur_sigma > 0:
        ks = 2 * int(math.ceil(2 * spec.blur_sigma)) + 1
        img = gaussian_apply(img, ks, spec.blur_sigma)
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def gen_split(rng: np.random.Generator, spec: DomainSpec, n: int) -> LabeledSet:
    H, W = spec.image_size
    images = np.empty((n, 3, H, W), dtype=np.float64)
    labels = np.empty((n, H, W), dtype=np.uint8)
    for i in range(n):
        labels[i] = render_labels(rng, spec)
        images[i] = render_image(rng, labels[i], spec)
    return LabeledSet(images, labels)


def gen_domain_pair(seed: int, spec_source: DomainSpec, spec_target: DomainSpec, n_source: int, n_target: int) -> tuple[LabeledSet, LabeledSet]:
    """Deterministic labeled source and target sets with shared geometry process."""
    spec_source.validate()
    spec_target.validate()
    if spec_source.n_classes != spec_target.n_classes or spec_source.image_size != spec_target.image_size:
        raise ConfigError("source and target specs must share class count and image size")
    if not spec_source.same_geometry(spec_target):
        raise ConfigError("source and target specs may differ only in appearance")
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return gen_split(src_rng, spec_source, n_source), gen_split(tgt_rng, spec_target, n_target)


@dataclass
class BenchmarkSizes:
    source_train: int = 200
    source_test: int = 50
    target_train: int = 100
    target_test: int = 100


def make_benchmark(seed: int = 7, spec_source: DomainSpec | None = None, spec_target: DomainSpec | None = None,
                   sizes: BenchmarkSizes | None = None) -> dict[str, LabeledSet]:
    """The four standard splits: source_train/source_test/target_train/target_test."""
    spec_source = spec_source or default_source_spec()
    spec_target = spec_target or default_target_spec()
    sizes = sizes or BenchmarkSizes()
    src, tgt = gen_domain_pair(seed, spec_source, spec_target, sizes.source_train + sizes.source_test,
                               sizes.target_train + sizes.target_test)
    ns, nt = sizes.source_train, sizes.target_train
    return {
        "source_train": src.subset(slice(0, ns)),
        "source_test": src.subset(slice(ns, None)),
        "target_train": tgt.subset(slice(0, nt)),
        "target_test": tgt.subset(slice(nt, None)),
    }


# ---------------------------------------------------------------------------
# dataset files

MANIFEST = "manifest.json"


def save_dataset(root, splits: Mapping[str, LabeledSet], n_classes: int, specs: Mapping[str, DomainSpec], extra: dict | None = None) -> Path:
    """One directory per split with 8-bit PNG images and labels plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"n_classes": n_classes, "domain_specs": {k: asdict(v) for k, v in specs.items()}, "splits": {}}
    if extra:
        manifest.update(extra)
    for name, data in splits.items():
        d = root / name
        d.mkdir(exist_ok=True)
        files = []
        for i, (img, lab) in enumerate(zip(data.images, data.labels)):
            img_name, lab_name = f"{i:04d}_image.png", f"{i:04d}_label.png"
            rgb = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
            Image.fromarray(rgb, mode="RGB").save(d / img_name, optimize=False)
            Image.fromarray(lab.astype(np.uint8), mode="L").save(d / lab_name, optimize=False)
            files.append({"image": f"{name}/{img_name}", "label": f"{name}/{lab_name}"})
        manifest["splits"][name] = files
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict) or "splits" not in manifest or "n_classes" not in manifest:
        raise FormatError(f"manifest {path} lacks 'splits' or 'n_classes'")
    return manifest


def load_split(root, name: str, manifest: dict | None = None) -> LabeledSet:
    root = Path(root)
    manifest = manifest or read_manifest(root)
    if name not in manifest["splits"]:
        raise FormatError(f"split {name!r} not listed in manifest")
    images, labels = [], []
    for entry in manifest["splits"][name]:
        rgb = np.asarray(Image.open(root / entry["image"]).convert("RGB"), dtype=np.float64) / 255.0
        images.append(rgb.transpose(2, 0, 1))
        labels.append(np.asarray(Image.open(root / entry["label"]), dtype=np.uint8))
    if not images:
        raise FormatError(f"split {name!r} is empty")
    return LabeledSet(np.stack(images), np.stack(labels))


# ---------------------------------------------------------------------------
# metrics


class ConfusionMatrix:
    """C x C counts, rows = ground truth, columns = prediction."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {truth.shape} differ in shape")
    keep = truth != NO_LABEL
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    C = cm.n_classes
    if t.size and (t.max() >= C or p.max() >= C or p.min() < 0):
        raise ValueError("label values outside the confusion matrix range")
    cm.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return cm


def miou(cm: ConfusionMatrix | np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where undefined) and their mean over defined classes."""
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    if np.all(np.isnan(iou)):
        raise ValueError("mIoU undefined: every class has an empty union")
    return iou, float(np.nanmean(iou))


def group_miou(per_class: np.ndarray, groups: Mapping[str, Sequence[int]]) -> dict[str, float]:
    per_class = np.asarray(per_class, dtype=np.float64)
    out = {}
    for name, idx in groups.items():
        idx = list(idx)
        if any(i < 0 or i >= per_class.size for i in idx):
            raise ValueError(f"group {name!r} has class indices outside [0, {per_class.size})")
        vals = per_class[idx]
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if vals.size else float("nan")
    return out


DEFAULT_GROUPS = {"stuff": [0, 4], "things": [1, 2, 3]}


def evaluate(model: SegModel, data: LabeledSet, n_classes: int | None = None, predictions=None) -> ConfusionMatrix:
    """Confusion matrix of plain-argmax predictions over a labeled set."""
    cm = ConfusionMatrix(n_classes or model.n_classes)
    for i, (img, lab) in enumerate(zip(data.images, data.labels)):
        pred = predict(model, img) if predictions is None else predictions[i]
        accumulate_confusion(cm, pred, lab)
    return cm


def score(model: SegModel, data: LabeledSet) -> float:
    return miou(evaluate(model, data))[1]


# ---------------------------------------------------------------------------
# source training


@dataclass
class TrainConfig:
    epochs: int = 4
    base_lr: float = 0.05
    lr_power: float = 0.9
    seed: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def train_source(dataset: LabeledSet, model_cfg: ArchConfig | None = None, train_cfg: TrainConfig | None = None,
                 history: list | None = None) -> SegModel:
    """Supervised hard-CE training from scratch, then source statistics are stored.

    Training runs in PerInstance mode; a final norm pass over the training
    images records source statistics, and the model is returned in
    StoredStats mode, ready to be adapted.
    """
    model_cfg = model_cfg or ArchConfig()
    train_cfg = train_cfg or TrainConfig()
    if train_cfg.epochs < 0 or train_cfg.base_lr <= 0:
        raise ConfigError("epochs must be >= 0 and base_lr > 0")
    if len(dataset) == 0:
        raise ConfigError("empty source dataset")
    model = init_model(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed + 1)
    n = len(dataset)
    total = max(1, train_cfg.epochs * n)
    state = OptimizerState(train_cfg.base_lr, train_cfg.lr_power, total)
    params = model.parameters()
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        running = 0.0
        for i in order:
            lr = poly_lr(state)
            loss, _ = hard_ce_masked(forward(model, dataset.images[i]), dataset.labels[i])
            backward(loss)
            sgd_step(params, lr)
            state.step()
            running += loss.item()
            if history is not None:
                history.append({"epoch": epoch, "iter": state.current_iter, "lr": lr, "loss": loss.item()})
        log.info("source epoch %d mean loss %.4f", epoch, running / n)
    return update_norm_pass(model, dataset.images)
