"""Task heads that sit on top of a frozen encoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamSet, Tensor
from .vit import VitConfig, _block_shapes, block, build_params, linear, pos_embed_2d

SENSE_PREFIX = "head."
SEG_PREFIX = "seg."


class SensingHead:
    """Mean-pool encoder tokens, then a single linear layer and softmax."""

    def __init__(self, embed_dim: int, n_classes: int = 6, seed: int = 0):
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.params = build_params({
            "head.fc.weight": (embed_dim, n_classes),
            "head.fc.bias": (n_classes,),
        }, seed)

    def logits(self, features) -> Tensor:
        pooled = T.as_tensor(features).mean(axis=1)
        return linear(pooled, self.params, "head.fc.")

    def __call__(self, features) -> Tensor:
        return T.softmax_lastdim(self.logits(features))

    def config_dict(self) -> dict:
        return {"head": "sense", "embed_dim": self.embed_dim, "n_classes": self.n_classes}


class SegmentationHead:
    """Two transformer blocks over projected encoder tokens, then per-pixel class logits."""

    def __init__(self, cfg: VitConfig, n_classes: int = 3, width: int | None = None,
                 heads: int | None = None, depth: int = 2, seed: int = 0):
        self.cfg = cfg
        self.n_classes = n_classes
        self.width = width or cfg.dec_embed_dim
        self.heads = heads or cfg.dec_heads
        self.depth = depth
        p = cfg.patch_size
        shapes = {
            "seg.embed.weight": (cfg.enc_embed_dim, self.width),
            "seg.embed.bias": (self.width,),
        }
        for i in range(depth):
            shapes.update(_block_shapes(f"seg.blocks.{i}.", self.width, cfg.mlp_ratio))
        shapes["seg.norm.gain"] = (self.width,)
        shapes["seg.norm.bias"] = (self.width,)
        shapes["seg.pred.weight"] = (self.width, p * p * n_classes)
        shapes["seg.pred.bias"] = (p * p * n_classes,)
        self.params = build_params(shapes, seed)
        self.pos = pos_embed_2d(cfg.grid, self.width)

    def logits(self, features) -> Tensor:
        """(N, M, enc_dim) tokens -> (N, H, W, classes) logits."""
        x = linear(T.as_tensor(features), self.params, "seg.embed.") + Tensor(self.pos)
        for i in range(self.depth):
            x = block(x, self.params, f"seg.blocks.{i}.", self.heads)
        x = T.layer_norm(x, self.params["seg.norm.gain"], self.params["seg.norm.bias"])
        x = linear(x, self.params, "seg.pred.")
        n = x.shape[0]
        gh, gw = self.cfg.grid
        p, c = self.cfg.patch_size, self.n_classes
        # per-patch layout is (class, u, v), matching patchify
        x = x.reshape(n, gh, gw, c, p, p).transpose(0, 1, 4, 2, 5, 3)
        return x.reshape(n, gh * p, gw * p, c)

    def __call__(self, features) -> Tensor:
        return T.softmax_lastdim(self.logits(features))

    def config_dict(self) -> dict:
        return {"head": "segment", "n_classes": self.n_classes, "width": self.width,
                "heads": self.heads, "depth": self.depth}


def combined_params(*sets: ParamSet, frozen_prefixes=()) -> ParamSet:
    """Share tensors from several sets in one ParamSet, freezing the given prefixes."""
    out = ParamSet()
    for s in sets:
        for name, t in s.items():
            out.add(name, t)
    for prefix in frozen_prefixes:
        out.freeze_prefix(prefix)
    return out


def predict_batched(fn, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Run ``fn`` over leading-axis chunks without recording a graph."""
    outs = []
    with T.no_grad():
        for i in range(0, len(features), batch_size):
            outs.append(fn(features[i:i + batch_size]).data)
    return np.concatenate(outs)
