"""Pretraining and frozen-encoder finetuning loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .evaluation import ConfusionMatrix, confusion, overall_accuracy
from .formats import load_checkpoint, save_checkpoint
from .heads import SegmentationHead, SensingHead, combined_params, predict_batched
from .losses import loss_label_smooth_ce, loss_msm, loss_seg
from .tensor import AdamW
from .vit import ENCODER_PREFIX, MsmModel, VitConfig, mask_plans

logger = logging.getLogger(__name__)

DEFAULT_LR = 1e-3
DEFAULT_BETAS = (0.9, 0.95)
DEFAULT_WEIGHT_DECAY = 0.05
DEFAULT_BATCH = 16


class BatchStream:
    """Deterministic shuffled mini-batches addressed by step number.

    Sample ``pos`` of the global stream comes from epoch ``pos // n``, whose
    permutation depends only on (seed, epoch); any step can be reproduced
    without replaying the ones before it.
    """

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ContractError("empty dataset")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, 2, epoch]).permutation(self.n)}
        return self._perms[epoch]

    def positions(self, step: int) -> np.ndarray:
        return np.arange(step * self.batch_size, (step + 1) * self.batch_size)

    def indices(self, step: int) -> np.ndarray:
        return np.array([self._perm(pos // self.n)[pos % self.n] for pos in self.positions(step)])


@dataclass
class PretrainResult:
    model: MsmModel
    optimizer: AdamW
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[1] for row in self.trace])


def validate_mask_ratio(mask_ratio: float) -> float:
    if not 0.0 < float(mask_ratio) < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {mask_ratio}")
    return float(mask_ratio)


def pretrain(model: MsmModel, data, mask_ratio: float = 0.75, steps: int = 500, seed: int = 0,
             batch_size: int = DEFAULT_BATCH, lr: float = DEFAULT_LR, betas=DEFAULT_BETAS,
             weight_decay: float = DEFAULT_WEIGHT_DECAY, resample_masks: bool = True,
             optimizer: AdamW | None = None, start_step: int = 0,
             trace: list | None = None,
             on_step: Callable[[int, PretrainResult], None] | None = None) -> PretrainResult:
    """Masked-reconstruction pretraining with AdamW.

    Masks come from per-sample streams keyed on (seed, position in the sample
    stream), or on (seed, dataset index) when ``resample_masks`` is off.
    ``start_step`` / ``optimizer`` / ``trace`` resume an interrupted run.
    """
    mask_ratio = validate_mask_ratio(mask_ratio)
    data = np.asarray(data, dtype=np.float64)
    cfg = model.cfg
    if data.ndim != 4 or data.shape[1:] != (cfg.in_channels, *cfg.img_hw):
        raise ShapeError(f"data {data.shape} does not match model input "
                         f"({cfg.in_channels}, {cfg.img_hw[0]}, {cfg.img_hw[1]})")
    opt = optimizer or AdamW(model.params, lr=lr, betas=betas, weight_decay=weight_decay)
    result = PretrainResult(model, opt, list(trace or []))
    stream = BatchStream(len(data), min(batch_size, len(data)), seed)
    m = cfg.num_patches
    for step in range(start_step, steps):
        idx = stream.indices(step)
        if resample_masks:
            offsets = stream.positions(step)
        else:
            offsets = idx
        plans = [mask_plans(1, m, mask_ratio, seed, int(o))[0] for o in offsets]
        model.params.zero_grad()
        recon, target = model.forward(data[idx], plans)
        loss = loss_msm(recon, target, plans)
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}")
        T.backward(loss)
        opt.step()
        result.trace.append((step, value, opt.lr))
        if on_step is not None:
            on_step(step, result)
    return result


def write_loss_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in trace:
            w.writerow([int(step), repr(float(loss)), repr(float(lr))])


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    with open(path) as fh:
        return [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: MsmModel, optimizer: AdamW | None = None, extra: dict | None = None) -> None:
    """RFM1 payload plus JSON sidecar; optimizer moments ride along for resume."""
    entries = dict(model.state_dict())
    meta = model.config_dict()
    if optimizer is not None:
        entries.update({f"optim.{k}": v for k, v in optimizer.state_dict().items()})
        meta["optimizer"] = {"step_count": optimizer.step_count, **optimizer.hyper}
    meta.update(extra or {})
    save_checkpoint(path, entries, meta)


def load_model(path) -> tuple[MsmModel, dict, dict[str, np.ndarray]]:
    """Returns (model, sidecar config, optimizer entries)."""
    entries, meta = load_checkpoint(path)
    if meta is None or "vit" not in meta:
        raise ContractError(f"{path} has no model config sidecar")
    cfg = VitConfig.from_dict(meta["vit"])
    params = {k: v for k, v in entries.items() if not k.startswith("optim.")}
    optim = {k[len("optim."):]: v for k, v in entries.items() if k.startswith("optim.")}
    model = MsmModel.from_state(cfg, params)
    model.seed = meta.get("seed", 0)
    return model, meta, optim


def restore_optimizer(model: MsmModel, meta: dict, optim_state: dict) -> AdamW:
    hyper = meta["optimizer"]
    opt = AdamW(model.params, lr=hyper["learning_rate"], betas=(hyper["beta1"], hyper["beta2"]),
                eps=hyper["eps"], weight_decay=hyper["weight_decay"])
    opt.load_state_dict(optim_state, hyper["step_count"])
    return opt


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class FinetuneResult:
    head: object
    encoder_digest_before: str
    encoder_digest_after: str
    trace: list[tuple[int, float, float]]
    confusion: ConfusionMatrix | None = None
    accuracy: float | None = None
    stopped_early: bool = False
    encoder: MsmModel | None = None

    @property
    def encoder_unchanged(self) -> bool:
        return self.encoder_digest_before == self.encoder_digest_after

    def metrics(self) -> dict:
        out = {"accuracy": self.accuracy, "steps_run": len(self.trace),
               "stopped_early": self.stopped_early,
               "encoder_sha256": self.encoder_digest_after}
        if self.confusion is not None:
            out["per_class_accuracy"] = self.confusion.per_class_accuracy()
            out["confusion_matrix"] = self.confusion.to_list()
        return out


def prepare_encoder(model: MsmModel, channels: int) -> MsmModel:
    """Copy of ``model`` whose encoder takes ``channels`` inputs, encoder frozen."""
    if channels != model.cfg.in_channels:
        logger.info("adapting patch projection from %d to %d channels",
                    model.cfg.in_channels, channels)
    model = model.with_channels(channels)
    model.params.freeze_prefix(ENCODER_PREFIX)
    return model


def encode_dataset(model: MsmModel, images, batch_size: int = 32) -> np.ndarray:
    """Unmasked encoder tokens for every image, (N, M, d)."""
    return predict_batched(model.encoder_features, np.asarray(images, dtype=np.float64), batch_size)


def _train_head(head, params, loss_fn, feats, targets, steps, seed, batch_size, lr, weight_decay,
                val=None, eval_every=10, patience=10):
    opt = AdamW(params, lr=lr, betas=DEFAULT_BETAS, weight_decay=weight_decay)
    stream = BatchStream(len(feats), min(batch_size, len(feats)), seed)
    trace = []
    best, stale, stopped = math.inf, 0, False
    for step in range(steps):
        idx = stream.indices(step)
        params.zero_grad()
        loss = loss_fn(head(feats[idx]), targets[idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}")
        T.backward(loss)
        opt.step()
        trace.append((step, value, opt.lr))
        if val is not None and (step + 1) % eval_every == 0:
            vfeats, vtargets = val
            with T.no_grad():
                vloss = float(loss_fn(head(vfeats), vtargets).data)
            if vloss < best - 1e-12:
                best, stale = vloss, 0
            else:
                stale += 1
                if stale >= patience:
                    stopped = True
                    break
    return trace, stopped


def finetune_sense(model: MsmModel, X, y, X_test=None, y_test=None, alpha: float = 0.1,
                   steps: int = 300, seed: int = 0, batch_size: int = DEFAULT_BATCH,
                   lr: float = DEFAULT_LR, weight_decay: float = DEFAULT_WEIGHT_DECAY,
                   n_classes: int = 6, val=None) -> FinetuneResult:
    """Train a linear classifier on mean-pooled tokens of the frozen encoder.

    The input is never masked. A single-channel model is adapted to the
    input channel count first.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    enc = prepare_encoder(model, X.shape[1])
    head = SensingHead(enc.cfg.enc_embed_dim, n_classes, seed=seed)
    params = combined_params(enc.params, head.params, frozen_prefixes=(ENCODER_PREFIX,))
    before = enc.params.digest(ENCODER_PREFIX)
    feats = encode_dataset(enc, X)
    val_feats = None
    if val is not None:
        val_feats = (encode_dataset(enc, val[0]), np.asarray(val[1], dtype=np.int64))
    trace, stopped = _train_head(
        head, params, lambda p, t: loss_label_smooth_ce(p, t, alpha), feats, y, steps, seed,
        batch_size, lr, weight_decay, val=val_feats)
    result = FinetuneResult(head, before, enc.params.digest(ENCODER_PREFIX), trace,
                            stopped_early=stopped, encoder=enc)
    if X_test is not None:
        probs = predict_batched(head, encode_dataset(enc, X_test))
        result.confusion = confusion(probs.argmax(axis=1), y_test, n_classes)
        result.accuracy = overall_accuracy(result.confusion)
    return result


def finetune_segment(model: MsmModel, X, masks, X_test=None, masks_test=None, alpha: float = 0.1,
                     steps: int = 300, seed: int = 0, batch_size: int = DEFAULT_BATCH,
                     lr: float = DEFAULT_LR, weight_decay: float = DEFAULT_WEIGHT_DECAY,
                     n_classes: int = 3, val=None) -> FinetuneResult:
    """Train the two-block segmentation head on the frozen, unmasked encoder."""
    X = np.asarray(X, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.int64)
    enc = prepare_encoder(model, X.shape[1])
    head = SegmentationHead(enc.cfg, n_classes, seed=seed)
    params = combined_params(enc.params, head.params, frozen_prefixes=(ENCODER_PREFIX,))
    before = enc.params.digest(ENCODER_PREFIX)
    feats = encode_dataset(enc, X)
    val_feats = None
    if val is not None:
        val_feats = (encode_dataset(enc, val[0]), np.asarray(val[1], dtype=np.int64))
    trace, stopped = _train_head(
        head, params, lambda p, t: loss_seg(p, t, alpha), feats, masks, steps, seed,
        batch_size, lr, weight_decay, val=val_feats)
    result = FinetuneResult(head, before, enc.params.digest(ENCODER_PREFIX), trace,
                            stopped_early=stopped, encoder=enc)
    if X_test is not None:
        probs = predict_batched(head, encode_dataset(enc, X_test), batch_size=8)
        result.confusion = confusion(probs.argmax(axis=-1), masks_test, n_classes)
        result.accuracy = overall_accuracy(result.confusion)
    return result


def save_head(path, head, extra: dict | None = None) -> None:
    meta = head.config_dict()
    if isinstance(head, SegmentationHead):
        meta["vit"] = head.cfg.to_dict()
    meta.update(extra or {})
    save_checkpoint(path, head.params.state_dict(), meta)


def load_head(path):
    entries, meta = load_checkpoint(path)
    if meta is None or "head" not in meta:
        raise ContractError(f"{path} has no head config sidecar")
    if meta["head"] == "sense":
        head = SensingHead(meta["embed_dim"], meta["n_classes"])
    else:
        head = SegmentationHead(VitConfig.from_dict(meta["vit"]), meta["n_classes"],
                                width=meta["width"], heads=meta["heads"], depth=meta["depth"])
    head.params.load_state_dict(entries)
    return head, meta
