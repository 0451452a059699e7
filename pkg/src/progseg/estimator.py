"""scikit-learn style wrapper: ``fit(X, y)`` / ``predict(X)`` on image batches."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import Config, validate
from .data import Dataset
from .metrics import Metrics, per_pixel_metrics
from .progan import DESK_WIDTHS, predict_proba
from .train import fit as fit_models
from .validation import check_images, check_masks


class ProgressiveSegmenter(BaseEstimator):
    """Binary segmenter trained as a U-Net, a GAN or a progressively grown GAN.

    X is a float array (n, 3, R, R) in [0, 1] (channel-last is accepted);
    y is a binary mask array (n, R, R). ``R`` must equal ``stages[-1]``.

    Parameters mirror the config keys of the same name. ``mode="unet"``
    trains the generator on the L1 term alone; ``"gan"`` adds the adversarial
    term at full resolution from the start; ``"progressive"`` grows decoder
    and discriminator through ``stages``.

    Fitted attributes: ``state_`` (models, optimizer state, growth state) and
    ``records_`` (the TrainRecord log).
    """

    def __init__(self, mode="progressive", stages=(8, 16, 32, 64), iterations=6000,
                 batch_size=16, lr=2e-4, beta1=0.5, beta2=0.999, lambda_l1=100.0,
                 gan_mode="non_saturating", widths=DESK_WIDTHS, dropout=0.5,
                 fade_fraction=0.5, fade_mode="linear", discriminator_sees_input=False,
                 threshold=0.5, inference="deterministic", seed=0, probe_interval=100,
                 log_interval=1, bn_momentum=0.9, bn_eps=1e-9):
        self.mode = mode
        self.stages = stages
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.lambda_l1 = lambda_l1
        self.gan_mode = gan_mode
        self.widths = widths
        self.dropout = dropout
        self.fade_fraction = fade_fraction
        self.fade_mode = fade_mode
        self.discriminator_sees_input = discriminator_sees_input
        self.threshold = threshold
        self.inference = inference
        self.seed = seed
        self.probe_interval = probe_interval
        self.log_interval = log_interval
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps

    _CONFIG_KEYS = ("mode", "iterations", "batch_size", "lr", "beta1", "beta2", "lambda_l1",
                    "gan_mode", "dropout", "fade_fraction", "fade_mode",
                    "discriminator_sees_input", "threshold", "seed", "probe_interval",
                    "log_interval", "bn_momentum", "bn_eps")

    def to_config(self, **extra) -> Config:
        values = {k: getattr(self, k) for k in self._CONFIG_KEYS}
        values["stages"] = tuple(int(s) for s in self.stages)
        values["widths"] = tuple(int(w) for w in self.widths)
        values["deterministic_inference"] = self.inference == "deterministic"
        values.update(extra)
        return validate(Config(**values))

    @classmethod
    def from_config(cls, cfg: Config, **overrides) -> "ProgressiveSegmenter":
        params = {k: getattr(cfg, k) for k in cls._CONFIG_KEYS}
        params["stages"] = tuple(cfg.stages)
        params["widths"] = tuple(cfg.widths)
        params["inference"] = "deterministic" if cfg.deterministic_inference else "stochastic"
        params.update(overrides)
        return cls(**params)

    def fit(self, X, y, sink=None):
        cfg = self.to_config()
        X = check_images(X, resolution=cfg.full_res)
        y = check_masks(y, n=X.shape[0], resolution=cfg.full_res)
        dataset = Dataset(X, y, min_res=cfg.stages[0])
        self.state_, self.records_ = fit_models(dataset, cfg.architecture(), cfg.schedule(),
                                                cfg.train_config(), sink)
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    @property
    def generator_(self):
        self._check_fitted()
        return self.state_.models.generator

    @property
    def growth_state_(self):
        self._check_fitted()
        return self.state_.gs

    def predict_proba(self, X) -> np.ndarray:
        """Mask-head output (n, R, R) in [0, 1]."""
        self._check_fitted()
        X = check_images(X, resolution=self.generator_.arch.full_res)
        return predict_proba(self.generator_, X, self.growth_state_, self.inference)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def evaluate(self, X, y) -> Metrics:
        pred = self.predict(X)
        return per_pixel_metrics(pred, check_masks(y, n=pred.shape[0]))

    def score(self, X, y) -> float:
        """Per-pixel accuracy pooled over all samples."""
        return self.evaluate(X, y).accuracy
