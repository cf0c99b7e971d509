"""scikit-learn style wrappers around pretraining and frozen finetuning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import recon_accuracy, reconstruct
from .heads import predict_batched
from .training import (DEFAULT_BATCH, DEFAULT_LR, DEFAULT_WEIGHT_DECAY, encode_dataset,
                       finetune_segment, finetune_sense, load_model, pretrain,
                       save_model)
from .validation import (check_images, check_labels, check_mask_ratio, check_masks,
                         check_positive_int)
from .vit import MsmModel, preset


class MaskedSpectrogramModel(BaseEstimator, TransformerMixin):
    """Masked-reconstruction pretraining as an unsupervised transformer.

    ``fit`` pretrains from scratch; ``transform`` returns mean-pooled
    encoder tokens of the unmasked input, shape (N, enc_embed_dim).
    """

    def __init__(self, preset="vit-tiny", img_hw=(64, 64), patch_size=8, in_channels=1,
                 mask_ratio=0.75, steps=500, batch_size=DEFAULT_BATCH, lr=DEFAULT_LR,
                 weight_decay=DEFAULT_WEIGHT_DECAY, random_state=0):
        self.preset = preset
        self.img_hw = img_hw
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.mask_ratio = mask_ratio
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _config(self):
        return preset(self.preset, img_hw=tuple(self.img_hw), patch_size=self.patch_size,
                      in_channels=self.in_channels)

    def fit(self, X, y=None):
        cfg = self._config()
        gamma = check_mask_ratio(self.mask_ratio)
        X = check_images(X, cfg.in_channels, cfg.img_hw)
        seed = int(self.random_state)
        model = MsmModel(cfg, seed=seed)
        result = pretrain(model, X, gamma, steps=check_positive_int(self.steps, "steps"), seed=seed,
                          batch_size=check_positive_int(self.batch_size, "batch_size"),
                          lr=self.lr, weight_decay=self.weight_decay)
        self.model_ = model
        self.loss_trace_ = result.trace
        self.n_features_out_ = cfg.enc_embed_dim
        return self

    def encode(self, X) -> np.ndarray:
        """Unmasked encoder tokens, (N, M, enc_embed_dim)."""
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        return encode_dataset(self.model_, check_images(X, cfg.in_channels, cfg.img_hw))

    def transform(self, X) -> np.ndarray:
        return self.encode(X).mean(axis=1)

    def reconstruct(self, X, mask_ratio=None, seed=None) -> np.ndarray:
        """Visible patches kept, masked patches predicted; same shape as ``X``."""
        check_is_fitted(self, "model_")
        cfg = self.model_.cfg
        gamma = check_mask_ratio(self.mask_ratio if mask_ratio is None else mask_ratio)
        X = check_images(X, cfg.in_channels, cfg.img_hw)
        out, _ = reconstruct(self.model_, X, gamma, self.random_state if seed is None else seed)
        return out

    def score(self, X, y=None, mask_ratio=None) -> float:
        """Mean resource-grid reconstruction accuracy at ``mask_ratio``."""
        X = check_images(X)
        recon = self.reconstruct(X, mask_ratio)
        return float(np.mean([recon_accuracy(o[0], r[0]) for o, r in zip(X, recon)]))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(path, self.model_, extra={"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "MaskedSpectrogramModel":
        model, meta, _ = load_model(path)
        params = dict(meta.get("estimator", {}))
        params.setdefault("preset", model.cfg.name)
        params.update(img_hw=tuple(model.cfg.img_hw), patch_size=model.cfg.patch_size,
                      in_channels=model.cfg.in_channels)
        est = cls(**params)
        est.model_ = model
        est.loss_trace_ = []
        est.n_features_out_ = model.cfg.enc_embed_dim
        return est


def _as_model(encoder) -> MsmModel:
    if isinstance(encoder, MaskedSpectrogramModel):
        check_is_fitted(encoder, "model_")
        return encoder.model_
    if isinstance(encoder, MsmModel):
        return encoder
    raise TypeError("encoder must be an MsmModel or a fitted MaskedSpectrogramModel")


class _FrozenEncoderBase(BaseEstimator):
    def __init__(self, encoder=None, n_classes=6, alpha=0.1, steps=300, batch_size=DEFAULT_BATCH,
                 lr=DEFAULT_LR, weight_decay=DEFAULT_WEIGHT_DECAY, random_state=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.alpha = alpha
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _fit_kwargs(self) -> dict:
        return dict(alpha=float(self.alpha), steps=check_positive_int(self.steps, "steps"),
                    seed=int(self.random_state),
                    batch_size=check_positive_int(self.batch_size, "batch_size"),
                    lr=self.lr, weight_decay=self.weight_decay,
                    n_classes=check_positive_int(self.n_classes, "n_classes"))

    def _features(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        cfg = self.encoder_.cfg
        return encode_dataset(self.encoder_, check_images(X, cfg.in_channels, cfg.img_hw))


class FrozenEncoderClassifier(ClassifierMixin, _FrozenEncoderBase):
    """Linear head on mean-pooled tokens of a frozen pretrained encoder."""

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), self.n_classes)
        result = finetune_sense(_as_model(self.encoder), X, y, **self._fit_kwargs())
        self.head_ = result.head
        self.encoder_ = result.encoder
        self.loss_trace_ = result.trace
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return predict_batched(self.head_, self._features(X))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


class FrozenEncoderSegmenter(_FrozenEncoderBase):
    """Per-pixel classifier on the token grid of a frozen pretrained encoder."""

    def __init__(self, encoder=None, n_classes=3, alpha=0.1, steps=300, batch_size=DEFAULT_BATCH,
                 lr=DEFAULT_LR, weight_decay=DEFAULT_WEIGHT_DECAY, random_state=0):
        super().__init__(encoder, n_classes, alpha, steps, batch_size, lr, weight_decay,
                         random_state)

    def fit(self, X, masks):
        X = check_images(X)
        masks = check_masks(masks, (len(X), *X.shape[2:]), self.n_classes)
        result = finetune_segment(_as_model(self.encoder), X, masks, **self._fit_kwargs())
        self.head_ = result.head
        self.encoder_ = result.encoder
        self.loss_trace_ = result.trace
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """(N, H, W, n_classes) class probabilities."""
        return predict_batched(self.head_, self._features(X), batch_size=8)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X, masks) -> float:
        """Pixel accuracy."""
        pred = self.predict(X)
        masks = check_masks(masks, pred.shape, self.n_classes)
        return float((pred == masks).mean())


__all__ = ["MaskedSpectrogramModel", "FrozenEncoderClassifier", "FrozenEncoderSegmenter"]
