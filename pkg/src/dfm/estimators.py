"""scikit-learn style wrappers around the blockwise flow-matching trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import TrainConfig, substream
from .detection import nms_and_filter
from .inference import MODES, classify, predict_latent
from .model import build_model
from .tensor import log_softmax_np
from .trainer import train


class FlowMatchingClassifier(ClassifierMixin, BaseEstimator):
    """Blockwise flow-matching classifier over flat feature vectors.

    ``inference`` picks single_step, ensemble or multi_step decoding.
    """

    def __init__(self, T=3, d=16, hidden=0, lam=1.0, epochs=30, batch_size=64, lr=1e-3, weight_decay=1e-4,
                 grad_clip_norm=1.0, schedule="sequential", backbone_widths=(256, 256), inference="ensemble",
                 single_block=0, random_state=0):
        self.T = T
        self.d = d
        self.hidden = hidden
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.schedule = schedule
        self.backbone_widths = backbone_widths
        self.inference = inference
        self.single_block = single_block
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(seed=int(self.random_state), T=self.T, d=self.d, hidden=self.hidden, lam=self.lam,
                           epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, grad_clip_norm=self.grad_clip_norm,
                           schedule=self.schedule, backbone_widths=tuple(self.backbone_widths),
                           single_block=self.single_block)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if self.inference not in MODES[1:]:
            raise ValueError(f"inference must be one of {MODES[1:]}, got {self.inference!r}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        cfg = self._config()
        self.n_features_in_ = X.shape[1]
        self.model_ = build_model("classification", (X.shape[1],), len(self.classes_), substream(cfg.seed, "init"),
                                  T=cfg.T, d=cfg.d, hidden=cfg.hidden_width, backbone_widths=cfg.backbone_widths)
        result = train(self.model_, X, codes, cfg, path_rng=substream(cfg.seed, "path"),
                       data_rng=substream(cfg.seed, "data-order"))
        self.telemetry_ = result.telemetry
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def _rng(self):
        return substream(int(self.random_state), "inference")

    def predict(self, X):
        X = self._check(X)
        return self.classes_[classify(self.model_, X, self.inference, self._rng(), self.single_block)]

    def predict_proba(self, X):
        """Softmax of the readout logits at the decoded latent."""
        X = self._check(X)
        z = predict_latent(self.model_, X, self.inference, self._rng(), self.single_block)
        return np.exp(log_softmax_np(self.model_.head.logits(z)))

    def transform(self, X):
        """Backbone features f(x)."""
        return self.model_.features(self._check(X)).data


class FlowMatchingDetector(BaseEstimator):
    """Set-prediction detector on [N, 1, 64, 64] images with (class, box) targets."""

    def __init__(self, n_classes=3, T=4, d=64, M=8, epochs=40, batch_size=32, lr=1e-3, weight_decay=1e-4,
                 schedule="parallel", inference="multi_step", conf_threshold=0.05, random_state=0):
        self.n_classes = n_classes
        self.T = T
        self.d = d
        self.M = M
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.inference = inference
        self.conf_threshold = conf_threshold
        self.random_state = random_state

    def fit(self, images, targets):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"images must be [N, 1, H, W], got {images.shape}")
        if len(targets) != len(images):
            raise ValueError(f"{len(images)} images but {len(targets)} target lists")
        cfg = TrainConfig(seed=int(self.random_state), dataset="shapes", T=self.T, d=self.d, M=self.M,
                          epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          weight_decay=self.weight_decay, schedule=self.schedule, backbone="conv2")
        self.model_ = build_model("detection", images.shape[1:], self.n_classes, substream(cfg.seed, "init"),
                                  T=cfg.T, d=cfg.d, backbone="conv2", M=cfg.M)
        result = train(self.model_, images, list(targets), cfg, path_rng=substream(cfg.seed, "path"),
                       data_rng=substream(cfg.seed, "data-order"))
        self.telemetry_ = result.telemetry
        return self

    def predict(self, images) -> list:
        """Per-image lists of ``(class, conf, box)``."""
        check_is_fitted(self, "model_")
        images = np.asarray(images, dtype=np.float64)
        z = predict_latent(self.model_, images, self.inference, substream(int(self.random_state), "inference"))
        logits, boxes = self.model_.head.decode(z)
        return [nms_and_filter(logits[i], boxes[i], self.conf_threshold) for i in range(len(images))]
