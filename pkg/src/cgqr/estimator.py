"""scikit-learn compatible wrapper around the segmentation network."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ImageSample, make_boundary_target, normalize_image, resize_mask, resize_pair, split_by_patient, DatasetSplit
from .encoder import EncoderConfig
from .errors import ShapeError
from .evaluator import evaluate
from .model import ModelConfig
from .trainer import TrainConfig, init_state, train


def check_images(X) -> np.ndarray:
    """Validate an image stack: (n, H, W) finite, non-empty."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[0] == 0 or 0 in X.shape[1:]:
        raise ShapeError(f"expected a non-empty (n_samples, H, W) image stack, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != X.shape:
        raise ShapeError(f"masks {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("masks must hold integer labels")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() > n_classes:
        raise ValueError(f"mask labels must lie in [0, {n_classes}]")
    return y.astype(np.int64)


class CGQRSegmenter(BaseEstimator):
    """Contour-guided query refinement segmenter with a fit/predict interface.

    ``X`` is an image stack (n, H, W); ``y`` the matching integer label
    masks with values in ``[0, n_classes]``. Inputs of any size are resized
    to ``image_size`` and predictions are mapped back to the input size.
    """

    def __init__(self, n_classes: int = 3, image_size=(64, 64), branch_channels=(16, 32, 64),
                 branch_strides=(4, 8, 16), n_stages: int = 2, embed_dim: int = 64,
                 n_base_queries: int = 4, epochs: int = 200, teacher_forcing_epochs: int = 40,
                 batch_size: int = 4, lr: float = 1e-3, weight_decay: float = 1e-4,
                 lam: float = 0.5, mu_aux: float = 0.4, boundary_thickness: int = 1,
                 ablations: Sequence[str] = (), validation_fraction: Optional[float] = None,
                 random_state: int = 0):
        self.n_classes = n_classes
        self.image_size = image_size
        self.branch_channels = branch_channels
        self.branch_strides = branch_strides
        self.n_stages = n_stages
        self.embed_dim = embed_dim
        self.n_base_queries = n_base_queries
        self.epochs = epochs
        self.teacher_forcing_epochs = teacher_forcing_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lam = lam
        self.mu_aux = mu_aux
        self.boundary_thickness = boundary_thickness
        self.ablations = ablations
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            n_classes=self.n_classes,
            image_size=tuple(self.image_size),
            encoder=EncoderConfig(branch_channels=tuple(self.branch_channels),
                                  branch_strides=tuple(self.branch_strides), n_stages=self.n_stages),
            embed_dim=self.embed_dim,
            n_base_queries=self.n_base_queries,
            ablations=frozenset(self.ablations),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, teacher_forcing_epochs=min(self.teacher_forcing_epochs, self.epochs),
            batch_size=self.batch_size, lr0=self.lr, weight_decay=self.weight_decay,
            lam=self.lam, mu_aux=self.mu_aux, seed=self.random_state, ablations=frozenset(self.ablations),
        )

    def _prepare(self, X: np.ndarray, y: Optional[np.ndarray] = None, groups=None) -> list:
        size = tuple(self.image_size)
        out = []
        for i, image in enumerate(X):
            mask = y[i] if y is not None else np.zeros(image.shape, dtype=np.int64)
            image, mask = resize_pair(image, mask, size)
            mask = mask.astype(np.int64)
            pid = str(groups[i]) if groups is not None else f"sample{i:05d}"
            out.append(ImageSample(
                image=normalize_image(image).astype(np.float32), mask=mask,
                boundary=make_boundary_target(mask, self.boundary_thickness), patient_id=pid,
            ))
        return out

    def fit(self, X, y, groups=None):
        """Train on (X, y). ``groups`` holds patient ids for the validation split."""
        X = check_images(X)
        y = check_masks(y, X, self.n_classes)
        samples = self._prepare(X, y, groups)
        if self.validation_fraction:
            split = split_by_patient(samples, 1 - self.validation_fraction, self.random_state)
        else:
            split = DatasetSplit(train=samples, val=samples, split_ratio=1.0, seed=self.random_state)
        cfg = self._train_config()
        state = init_state(cfg, self._model_config())
        self.state_ = train(cfg, split, state=state)
        self.model_ = self.state_.model
        self.classes_ = np.arange(self.n_classes + 1)
        self.best_val_dsc_ = self.state_.best_val_dsc
        self.history_ = list(self.state_.history)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """(n, K+1, H0, W0) class probabilities at the network resolution."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        samples = self._prepare(X)
        images = torch.from_numpy(np.stack([s.image for s in samples]))
        return self.model_.predict_proba(images).numpy()

    def predict(self, X) -> np.ndarray:
        """Label masks resized (nearest) back to each input's size."""
        X = check_images(X)
        labels = self.predict_proba(X).argmax(axis=1)
        return np.stack([resize_mask(lab, X.shape[1:]) for lab in labels])

    def score(self, X, y) -> float:
        """Mean foreground DSC (pooled over samples) at the network resolution."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        y = check_masks(y, X, self.n_classes)
        return evaluate(self.model_, self._prepare(X, y), n_classes=self.n_classes).mean_dsc
