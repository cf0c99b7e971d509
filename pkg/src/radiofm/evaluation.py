"""Resource-grid reconstruction accuracy and classification metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .vit import MsmModel, PatchSet, mask_plans, patchify, unpatchify


@dataclass
class ResourceGrid:
    occupancy: np.ndarray
    pool_size: int
    threshold: float

    @property
    def occupied_fraction(self) -> float:
        return float(self.occupancy.mean())


def pool_avg(spect: np.ndarray, k: int = 4) -> np.ndarray:
    """Non-overlapping k x k mean pooling (stride k)."""
    m = np.asarray(spect, dtype=np.float64)
    h, w = m.shape
    if h % k or w % k:
        raise ShapeError(f"{h}x{w} is not divisible by pool size {k}")
    return m.reshape(h // k, k, w // k, k).mean(axis=(1, 3))


def threshold_of(spect: np.ndarray) -> float:
    """mu + 0.5 * sigma of the image itself (population sigma)."""
    m = np.asarray(spect, dtype=np.float64)
    if m.size == 0:
        raise ContractError("threshold of an empty spectrogram")
    return float(m.mean() + 0.5 * m.std())


def binarize(grid: np.ndarray, threshold: float, pool_size: int = 4) -> ResourceGrid:
    """1 where the pooled value is strictly above the threshold."""
    return ResourceGrid((np.asarray(grid) > threshold).astype(np.uint8), pool_size, float(threshold))


def resource_grid(spect: np.ndarray, k: int = 4, threshold: float | None = None) -> ResourceGrid:
    spect = _as_2d(spect)
    delta = threshold_of(spect) if threshold is None else threshold
    return binarize(pool_avg(spect, k), delta, k)


def _as_2d(x) -> np.ndarray:
    x = np.asarray(getattr(x, "pixels", x), dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 2:
        raise ShapeError(f"expected a single-channel image, got {x.shape}")
    return x


def recon_accuracy(orig, recon, k: int = 4) -> float:
    """Fraction of resource blocks whose occupancy agrees.

    The threshold comes from the original image and is shared by both grids.
    """
    orig, recon = _as_2d(orig), _as_2d(recon)
    if orig.shape != recon.shape:
        raise ShapeError(f"{orig.shape} vs {recon.shape}")
    delta = threshold_of(orig)
    a = binarize(pool_avg(orig, k), delta, k).occupancy
    b = binarize(pool_avg(recon, k), delta, k).occupancy
    return float((a == b).mean())


def compose_reconstruction(orig, recon_patches, plan, patch_size: int) -> np.ndarray:
    """Original pixels at visible patches, model output at masked patches."""
    orig = np.asarray(orig, dtype=np.float64)
    ps = patchify(orig, patch_size)
    rows = ps.patches.copy()
    rows[plan.masked_idx] = np.asarray(recon_patches)[plan.masked_idx]
    return unpatchify(PatchSet(rows, ps.grid, ps.patch_size, ps.channels))


def reconstruct(model: MsmModel, images, mask_ratio: float, seed: int = 0,
                batch_size: int = 16) -> tuple[np.ndarray, list]:
    """Composed reconstructions (N, C, H, W) and their mask plans."""
    images = np.asarray(images, dtype=np.float64)
    m = model.cfg.num_patches
    plans = mask_plans(len(images), m, mask_ratio, seed)
    out = np.empty_like(images)
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            recon, _ = model.forward(chunk, plans[i:i + batch_size])
            for j, img in enumerate(chunk):
                out[i + j] = compose_reconstruction(img, recon.data[j], plans[i + j],
                                                    model.cfg.patch_size)
    return out, plans


def recon_curve(model: MsmModel, images, eval_ratios=None, seed: int = 0,
                k: int = 4) -> list[tuple[float, float]]:
    """Mean reconstruction accuracy at each evaluation mask ratio.

    Every sample keeps one permutation stream across ratios, so the visible
    set at a higher ratio is a subset of the one at a lower ratio.
    """
    if eval_ratios is None:
        eval_ratios = [round(0.1 * i, 1) for i in range(1, 10)]
    curve = []
    for gamma in eval_ratios:
        recon, _ = reconstruct(model, images, gamma, seed)
        accs = [recon_accuracy(o[0], r[0], k) for o, r in zip(images, recon)]
        curve.append((float(gamma), float(np.mean(accs))))
    return curve


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "accuracy"])
        for gamma, acc in curve:
            w.writerow([repr(float(gamma)), repr(float(acc))])


def read_curve_csv(path) -> list[tuple[float, float]]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [(float(r["gamma"]), float(r["accuracy"])) for r in rows]


# ---------------------------------------------------------------------------
# classification metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    def per_class_accuracy(self) -> list[float]:
        support = self.counts.sum(axis=1)
        diag = np.diag(self.counts)
        return [float(d / s) if s else float("nan") for d, s in zip(diag, support)]

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion(preds, labels, n_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ShapeError("preds and labels differ in length")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"class ids must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.counts.sum()
    if total < 1:
        raise ContractError("empty confusion matrix")
    return float(np.trace(cm.counts) / total)


def majority_baseline(labels, n_classes: int) -> float:
    """Accuracy of always predicting the most frequent label."""
    counts = np.bincount(np.asarray(labels).ravel(), minlength=n_classes)
    return float(counts.max() / counts.sum())


def write_pgm_pair(path_prefix, orig, recon, k: int = 4) -> tuple[Path, Path]:
    """Dump original / reconstructed resource grids (shared threshold) as P5 images."""
    from .formats import write_pgm

    orig, recon = _as_2d(orig), _as_2d(recon)
    delta = threshold_of(orig)
    a = binarize(pool_avg(orig, k), delta, k).occupancy
    b = binarize(pool_avg(recon, k), delta, k).occupancy
    pa, pb = Path(f"{path_prefix}_orig.pgm"), Path(f"{path_prefix}_recon.pgm")
    write_pgm(pa, a * 255, scale=False)
    write_pgm(pb, b * 255, scale=False)
    return pa, pb
