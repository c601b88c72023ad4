"""Source-free adaptation engine and episodic test-time adaptation.

Pipeline for :func:`adapt`:

1. refresh the source model's norm statistics on the target images,
2. cache its confidence-filtered pseudo-labels,
3. train a new target model on collages with the pseudo-label loss plus the
   soft/hard transform-consistency losses, whose targets come from the
   current target model and carry no gradient,
4. evolve the class thresholds used for the hard consistency term by EMA.
"""
from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .pseudolabel import ema_update, image_thresholds, pseudo_label, thresholds_from_probs
from .segmodel import SegModel, forward, init_model, predict, predict_proba, update_norm_pass
from .tensorcore import (
    NormMode,
    OptimizerState,
    Tensor,
    backward,
    entropy,
    hard_ce_masked,
    poly_lr,
    sgd_step,
    soft_ce,
    softmax,
)
from .transforms import Role, TransformPair, TransformParams, apply_pair, make_collage, sample_transform_pair

log = logging.getLogger(__name__)


def _transform_params(value) -> TransformParams:
    if isinstance(value, TransformParams):
        return value
    value = dict(value or {})
    if "kinds" in value:
        value["kinds"] = tuple(value["kinds"])
    return TransformParams(**value)


@dataclass
class AdaptConfig:
    epochs: int = 20
    base_lr: float = 0.05
    lr_power: float = 0.9
    ema_lambda: float = 0.99
    transforms: TransformParams = field(default_factory=TransformParams)
    init_mode: str = "scratch"
    target_norm_mode: str = NormMode.PER_INSTANCE.value
    collage: bool = True
    soft: bool = True
    hard: bool = True
    loss_c_weight: float = 1.0
    loss_r_weight: float = 1.0
    uniform_threshold: float | None = None
    consistency_model: str = "target"
    pl_augment: bool = False
    seed: int = 0

    def __post_init__(self):
        self.transforms = _transform_params(self.transforms)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigError("ema_lambda must lie in [0, 1]")
        if self.init_mode not in ("scratch", "finetune"):
            raise ConfigError(f"init_mode must be 'scratch' or 'finetune', got {self.init_mode!r}")
        if self.consistency_model not in ("target", "source"):
            raise ConfigError("consistency_model must be 'target' or 'source'")
        if self.uniform_threshold is not None and not 0.0 <= self.uniform_threshold <= 1.0:
            raise ConfigError("uniform_threshold must lie in [0, 1]")
        NormMode(self.target_norm_mode)

    @property
    def consistency(self) -> bool:
        return (self.soft or self.hard) and not self.pl_augment

    def total_iters(self, n_images: int) -> int:
        return self.epochs * n_images

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transforms"]["kinds"] = list(d["transforms"]["kinds"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AdaptConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown adapt config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def pl_only(cls, **kw) -> "AdaptConfig":
        return cls(collage=False, soft=False, hard=False, **kw)


@dataclass
class IterationResult:
    loss_c: float
    loss_r_soft: float
    loss_r_hard: float
    n_labeled: int
    n_pixels: int
    p_k: np.ndarray
    valid: np.ndarray
    pair: TransformPair | None


def training_iteration(
    model: SegModel,
    image: np.ndarray,
    labels: np.ndarray,
    thresholds: np.ndarray,
    rng: np.random.Generator,
    cfg: AdaptConfig | None = None,
    pair: TransformPair | None = None,
    teacher: SegModel | None = None,
    target_probe: Callable[[Tensor], Tensor] | None = None,
) -> IterationResult:
    """Forward/backward for one (collage) image; gradients accumulate on ``model``.

    ``teacher`` (default: ``model`` itself) provides the consistency targets.
    ``target_probe(P)`` is added to the live probability tensor just before
    it is detached; it lets tests hook a differentiable term onto the target
    branch and confirm no gradient comes back through it.
    """
    cfg = cfg or AdaptConfig()
    H, W = image.shape[-2:]
    logits = forward(model, image)
    loss_c, n_lab = hard_ce_masked(logits, labels)
    total = loss_c * cfg.loss_c_weight if cfg.loss_c_weight != 1.0 else loss_c

    if teacher is None or teacher is model:
        p_live = softmax(logits)
        if target_probe is not None:
            p_live = p_live + target_probe(p_live)
        prob = p_live.detach().data[0].copy()
    else:
        prob = predict_proba(teacher, image)
    p_k, valid = image_thresholds(prob, current=thresholds)

    soft_val = hard_val = 0.0
    used_pair = None
    if cfg.consistency:
        used_pair = pair if pair is not None else sample_transform_pair(rng, cfg.transforms, (H, W))
        q_logits = forward(model, apply_pair(used_pair, image, Role.IMAGE))
        loss_r = None
        if cfg.soft:
            target = apply_pair(used_pair, prob, Role.PROB)
            soft = soft_ce(q_logits, target[None])
            soft_val = soft.item()
            loss_r = soft
        if cfg.hard:
            hard_labels = apply_pair(used_pair, pseudo_label(prob, thresholds), Role.LABEL)
            hard, _ = hard_ce_masked(q_logits, hard_labels)
            hard_val = hard.item()
            loss_r = hard if loss_r is None else loss_r + hard
        if cfg.loss_r_weight != 1.0:
            loss_r = loss_r * cfg.loss_r_weight
        total = total + loss_r

    backward(total)
    return IterationResult(loss_c.item(), soft_val, hard_val, n_lab, H * W, p_k, valid, used_pair)


def pl_augment_iteration(model: SegModel, source: SegModel, image: np.ndarray, labels: np.ndarray,
                         source_thresholds: np.ndarray, rng: np.random.Generator, cfg: AdaptConfig) -> IterationResult:
    """Standard-augmentation baseline: pseudo-label the transformed image with the source model.

    The original image with its cached pseudo-labels and the transformed
    image with freshly computed source pseudo-labels contribute equally.
    """
    H, W = image.shape[-2:]
    loss_c, n_lab = hard_ce_masked(forward(model, image), labels)
    pair = sample_transform_pair(rng, cfg.transforms, (H, W))
    aug = apply_pair(pair, image, Role.IMAGE)
    aug_labels = pseudo_label(predict_proba(source, aug), source_thresholds)
    loss_a, _ = hard_ce_masked(forward(model, aug), aug_labels)
    backward(loss_c + loss_a)
    return IterationResult(loss_c.item(), 0.0, loss_a.item(), n_lab, H * W,
                           np.asarray(source_thresholds, dtype=np.float64), np.zeros(len(source_thresholds), bool), pair)


@dataclass
class AdaptState:
    """What :func:`adapt` leaves behind besides the target model."""

    source_model: SegModel | None = None
    source_thresholds: np.ndarray | None = None
    thresholds: np.ndarray | None = None
    pseudo_labels: list[np.ndarray] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def prepare_source(source_model: SegModel, target_images: Sequence[np.ndarray]) -> SegModel:
    """Norm-updated copy of the source model (the caller's model is left intact)."""
    return update_norm_pass(source_model.clone(), target_images)


def adapt(
    source_model: SegModel,
    target_images: Sequence[np.ndarray],
    cfg: AdaptConfig | None = None,
    rng: np.random.Generator | None = None,
    state: AdaptState | None = None,
) -> SegModel:
    """Adapt ``source_model`` to unlabeled ``target_images``; returns the target model."""
    cfg = cfg or AdaptConfig()
    cfg.validate()
    images = [np.asarray(x) for x in target_images]
    n = len(images)
    if n == 0:
        raise ConfigError("no target images")
    if cfg.collage and n < 2:
        raise ConfigError("collages need at least two target images")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    state = state if state is not None else AdaptState()
    C = source_model.n_classes

    m_s = prepare_source(source_model, images)
    probs = [predict_proba(m_s, x) for x in images]
    if cfg.uniform_threshold is not None:
        thr = np.full(C, cfg.uniform_threshold, dtype=np.float64)
    else:
        thr = thresholds_from_probs(probs, C)
    cached = [pseudo_label(p, thr) for p in probs]
    del probs
    state.source_model, state.source_thresholds, state.pseudo_labels = m_s, thr.copy(), cached

    if cfg.init_mode == "scratch":
        m_t = init_model(source_model.arch, seed=cfg.seed)
    else:
        m_t = m_s.clone()
    m_t.set_norm_mode(cfg.target_norm_mode)
    teacher = m_s if cfg.consistency_model == "source" else m_t

    running = thr.copy()
    total = cfg.total_iters(n)
    if total == 0:
        state.thresholds = running
        return m_t
    opt = OptimizerState(cfg.base_lr, cfg.lr_power, total)
    params = m_t.parameters()
    sums = _EpochSums(C)
    for it in range(total):
        if cfg.collage:
            i, j = rng.choice(n, size=2, replace=False)
            x, y = make_collage(images[i], images[j], cached[i], cached[j])
        else:
            i = int(rng.integers(n))
            x, y = images[i], cached[i]
        if cfg.pl_augment:
            res = pl_augment_iteration(m_t, m_s, x, y, thr, rng, cfg)
        else:
            res = training_iteration(m_t, x, y, running, rng, cfg, teacher=teacher)
        lr = poly_lr(opt)
        sgd_step(params, lr)
        opt.step()
        if cfg.consistency and cfg.hard:
            running = ema_update(running, res.p_k, res.valid, cfg.ema_lambda)
        sums.add(res)
        if (it + 1) % n == 0:
            row = sums.row(epoch=(it + 1) // n - 1, it=it + 1, lr=lr, thresholds=running)
            state.history.append(row)
            log.info("epoch %d loss_c %.4f soft %.4f hard %.4f", row["epoch"], row["loss_c"], row["loss_r_soft"], row["loss_r_hard"])
            sums = _EpochSums(C)
    state.thresholds = running
    return m_t


class _EpochSums:
    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.count = 0
        self.loss_c = self.soft = self.hard = 0.0
        self.labeled = 0
        self.pixels = 0

    def add(self, res: IterationResult) -> None:
        self.count += 1
        self.loss_c += res.loss_c
        self.soft += res.loss_r_soft
        self.hard += res.loss_r_hard
        self.labeled += res.n_labeled
        self.pixels += res.n_pixels

    def row(self, epoch: int, it: int, lr: float, thresholds: np.ndarray) -> dict:
        k = max(self.count, 1)
        row = {
            "epoch": epoch,
            "iter": it,
            "lr": lr,
            "loss_c": self.loss_c / k,
            "loss_r_soft": self.soft / k,
            "loss_r_hard": self.hard / k,
            "labeled_pixel_fraction": self.labeled / max(self.pixels, 1),
        }
        for c in range(self.n_classes):
            row[f"thr_{c}"] = float(thresholds[c])
        return row


def history_csv(history: Sequence[dict]) -> str:
    if not history:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(history[0]), lineterminator="\n")
    writer.writeheader()
    for row in history:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# test-time adaptation


@dataclass
class TtaConfig:
    loss_kind: str = "consistency"
    iters_per_image: int = 1
    lr: float = 0.01
    param_subset: str = "norm_affine"
    transforms: TransformParams = field(default_factory=TransformParams)
    seed: int = 0

    def __post_init__(self):
        self.transforms = _transform_params(self.transforms)

    def validate(self) -> None:
        if self.loss_kind not in ("consistency", "entropy"):
            raise ConfigError(f"loss_kind must be 'consistency' or 'entropy', got {self.loss_kind!r}")
        if self.iters_per_image < 0:
            raise ConfigError("iters_per_image must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.param_subset not in ("all", "norm_affine"):
            raise ConfigError("param_subset must be 'all' or 'norm_affine'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transforms"]["kinds"] = list(d["transforms"]["kinds"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TtaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown tta config keys: {sorted(unknown)}")
        return cls(**d)


def entropy_loss(prob: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy (natural log)."""
    return entropy(prob)


def _episode_rng(image: np.ndarray, seed: int) -> np.random.Generator:
    # keyed on content so episodes do not depend on processing order
    return np.random.default_rng([seed, zlib.crc32(np.ascontiguousarray(image).tobytes())])


def tta_step(model: SegModel, image: np.ndarray, cfg: TtaConfig, rng: np.random.Generator) -> float:
    """One optimisation step on a single image; returns the loss value."""
    params = model.parameters() if cfg.param_subset == "all" else model.norm_affine_parameters()
    logits = forward(model, image)
    if cfg.loss_kind == "entropy":
        loss = entropy_loss(softmax(logits))
    else:
        prob = softmax(logits).data[0].copy()
        thr, _ = image_thresholds(prob)
        pair = sample_transform_pair(rng, cfg.transforms, image.shape[-2:])
        q_logits = forward(model, apply_pair(pair, image, Role.IMAGE))
        soft = soft_ce(q_logits, apply_pair(pair, prob, Role.PROB)[None])
        hard, _ = hard_ce_masked(q_logits, apply_pair(pair, pseudo_label(prob, thr), Role.LABEL))
        loss = soft + hard
    backward(loss)
    for p in model.parameters():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    sgd_step(params, cfg.lr)
    for p in model.parameters():
        p.grad = None
    return loss.item()


def tta_episode(source_model: SegModel, image: np.ndarray, cfg: TtaConfig | None = None,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, bool]:
    """Adapt a throw-away clone to one image, predict, and discard the clone.

    Returns the prediction and whether the source model is bitwise unchanged.
    """
    cfg = cfg or TtaConfig()
    cfg.validate()
    image = np.asarray(image)
    if cfg.iters_per_image == 0:
        return predict(source_model, image), True
    snapshot = [p.data.copy() for p in source_model.parameters()]
    rng = rng if rng is not None else _episode_rng(image, cfg.seed)
    model = source_model.clone()
    for _ in range(cfg.iters_per_image):
        tta_step(model, image, cfg, rng)
    pred = predict(model, image)
    restored = all(a.tobytes() == p.data.tobytes() for a, p in zip(snapshot, source_model.parameters()))
    return pred, restored
