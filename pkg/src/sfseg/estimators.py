"""Estimator-style wrappers (fit / predict / score, get_params / set_params).

Images are passed as arrays shaped (N, 3, H, W) with values in [0, 1];
label maps as (N, H, W) integer arrays where 255 marks unlabeled pixels.
``score`` returns mean IoU, so the wrappers plug into tools that expect a
"higher is better" score such as model-selection utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptConfig, AdaptState, TtaConfig, adapt, tta_episode
from .bench import ConfusionMatrix, LabeledSet, TrainConfig, accumulate_confusion, miou, train_source
from .errors import UsageError
from .segmodel import ArchConfig, SegModel, predict_proba
from .validation import check_images, check_label_maps, check_same_size


class _SegmenterMixin:
    """predict / predict_proba / score on top of a fitted ``model_``."""

    def _fitted_model(self) -> SegModel:
        check_is_fitted(self, "model_")
        return self.model_

    def predict_proba(self, X) -> np.ndarray:
        model = self._fitted_model()
        X = check_images(X)
        return np.stack([predict_proba(model, x) for x in X])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        X = check_images(X)
        n_classes = self._fitted_model().n_classes
        y = check_label_maps(y, n_classes, X)
        cm = ConfusionMatrix(n_classes)
        for pred, truth in zip(self.predict(X), y):
            accumulate_confusion(cm, pred, truth)
        return miou(cm)[1]


class SourceSegmenter(_SegmenterMixin, BaseEstimator):
    """Supervised segmenter trained on labeled source images."""

    def __init__(self, n_classes=5, widths=(16, 32, 32, 32), epochs=4, base_lr=0.05, lr_power=0.9, random_state=0):
        self.n_classes = n_classes
        self.widths = widths
        self.epochs = epochs
        self.base_lr = base_lr
        self.lr_power = lr_power
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X)
        check_same_size(X)
        y = check_label_maps(y, self.n_classes, X)
        arch = ArchConfig(n_classes=self.n_classes, widths=list(self.widths))
        cfg = TrainConfig(epochs=self.epochs, base_lr=self.base_lr, lr_power=self.lr_power, seed=int(self.random_state))
        history: list[dict] = []
        self.model_ = train_source(LabeledSet(X, y), arch, cfg, history=history)
        self.history_ = history
        return self


class SourceFreeAdapter(_SegmenterMixin, BaseEstimator):
    """Adapt a trained source model to unlabeled target images.

    ``fit(X)`` takes target images only; a ``y`` argument is accepted for
    pipeline compatibility and ignored.
    """

    def __init__(self, source_model=None, epochs=20, base_lr=0.05, lr_power=0.9, ema_lambda=0.99,
                 collage=True, soft=True, hard=True, uniform_threshold=None, init_mode="scratch",
                 random_state=0):
        self.source_model = source_model
        self.epochs = epochs
        self.base_lr = base_lr
        self.lr_power = lr_power
        self.ema_lambda = ema_lambda
        self.collage = collage
        self.soft = soft
        self.hard = hard
        self.uniform_threshold = uniform_threshold
        self.init_mode = init_mode
        self.random_state = random_state

    def _source(self) -> SegModel:
        src = self.source_model
        if isinstance(src, SourceSegmenter):
            src = src._fitted_model()
        if not isinstance(src, SegModel):
            raise UsageError("source_model must be a SegModel or a fitted SourceSegmenter")
        return src

    def config(self) -> AdaptConfig:
        return AdaptConfig(epochs=self.epochs, base_lr=self.base_lr, lr_power=self.lr_power,
                           ema_lambda=self.ema_lambda, collage=self.collage, soft=self.soft, hard=self.hard,
                           uniform_threshold=self.uniform_threshold, init_mode=self.init_mode,
                           seed=int(self.random_state))

    def fit(self, X, y=None):
        X = check_images(X)
        check_same_size(X)
        state = AdaptState()
        self.model_ = adapt(self._source(), list(X), self.config(), state=state)
        self.norm_updated_model_ = state.source_model
        self.source_thresholds_ = state.source_thresholds
        self.thresholds_ = state.thresholds
        self.history_ = state.history
        return self


class TestTimeAdapter(BaseEstimator):
    """Per-image episodic adaptation; the source model is never modified.

    There is nothing to learn ahead of time, so ``fit`` only checks the
    configuration and source model.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, source_model=None, loss_kind="consistency", iters_per_image=1, lr=0.01,
                 param_subset="norm_affine", random_state=0):
        self.source_model = source_model
        self.loss_kind = loss_kind
        self.iters_per_image = iters_per_image
        self.lr = lr
        self.param_subset = param_subset
        self.random_state = random_state

    def config(self) -> TtaConfig:
        cfg = TtaConfig(loss_kind=self.loss_kind, iters_per_image=self.iters_per_image, lr=self.lr,
                        param_subset=self.param_subset, seed=int(self.random_state))
        cfg.validate()
        return cfg

    def fit(self, X=None, y=None):
        self.config()
        self.model_ = SourceFreeAdapter(self.source_model)._source()
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        cfg = self.config()
        preds = []
        for x in X:
            pred, restored = tta_episode(self.model_, x, cfg)
            if not restored:
                raise RuntimeError("source model changed during a test-time episode")
            preds.append(pred)
        return np.stack(preds)

    def score(self, X, y) -> float:
        X = check_images(X)
        preds = self.predict(X)
        n_classes = self.model_.n_classes
        y = check_label_maps(y, n_classes, X)
        cm = ConfusionMatrix(n_classes)
        for pred, truth in zip(preds, y):
            accumulate_confusion(cm, pred, truth)
        return miou(cm)[1]
