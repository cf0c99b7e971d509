"""Training objectives: masked reconstruction and label-smoothed cross-entropy."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor
from .vit import MaskPlan


def loss_msm(recon, target, plans: list[MaskPlan]) -> Tensor:
    """Squared error over masked patches only, normalized by N * M.

    ``recon`` and ``target`` are (N, M, D); visible patches contribute
    nothing, so their reconstruction rows receive exactly zero gradient.
    """
    recon = T.as_tensor(recon)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if recon.ndim == 2:
        recon = recon.reshape(1, *recon.shape)
        target = target[None]
    if recon.shape != target.shape:
        raise ShapeError(f"recon {recon.shape} and target {target.shape} differ")
    n, m, _ = recon.shape
    if len(plans) != n:
        raise ShapeError(f"{len(plans)} mask plans for a batch of {n}")
    mask = np.stack([p.mask_vector() for p in plans])
    if mask.shape != (n, m):
        raise ShapeError("mask plans do not cover the patch grid")
    if not mask.any():
        raise ContractError("no masked patches: the reconstruction loss is undefined")
    diff = recon - Tensor(target)
    per_patch = (diff * diff).sum(axis=-1)
    return (per_patch * Tensor(mask)).sum() * (1.0 / (n * m))


def smoothed_targets(labels, n_classes: int, alpha: float) -> np.ndarray:
    """One-hot rows scaled by (1 - alpha) plus alpha / C everywhere."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    onehot = np.eye(n_classes)[labels]
    return onehot * (1.0 - alpha) + alpha / n_classes


def _smoothed_ce(probs, labels, alpha: float) -> Tensor:
    probs = T.as_tensor(probs)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise ShapeError(f"probabilities {probs.shape} do not match labels {labels.shape}")
    if not 0.0 <= alpha < 1.0:
        raise ContractError("smoothing factor must be in [0, 1)")
    targets = smoothed_targets(labels, probs.shape[-1], alpha)
    count = labels.size
    return (Tensor(targets) * T.log(probs)).sum() * (-1.0 / count)


def loss_label_smooth_ce(pred_probs, labels, alpha: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy averaged over the batch; probs are (N, C)."""
    if T.as_tensor(pred_probs).ndim != 2:
        raise ShapeError("expected (N, C) probabilities")
    return _smoothed_ce(pred_probs, labels, alpha)


def loss_seg(pred_probs, masks, alpha: float = 0.1) -> Tensor:
    """Per-pixel label-smoothed cross-entropy averaged over N * H * W pixels.

    ``pred_probs`` is (N, H, W, C) and ``masks`` holds integer labels (N, H, W).
    """
    if T.as_tensor(pred_probs).ndim != 4:
        raise ShapeError("expected (N, H, W, C) probabilities")
    return _smoothed_ce(pred_probs, masks, alpha)
