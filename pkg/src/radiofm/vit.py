"""ViT masked autoencoder for spectrograms.

Forward pass for masked spectrogram modeling:
patchify -> sample visible subset -> linear embed + sin/cos positions ->
encoder blocks (visible tokens only) -> project to decoder width ->
scatter back into original order with a shared mask token -> decoder
positions -> decoder blocks -> linear head back to pixel patches.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import ParamSet, Tensor

ENCODER_PREFIX = "encoder."
DECODER_PREFIX = "decoder."


@dataclass(frozen=True)
class VitConfig:
    patch_size: int = 16
    in_channels: int = 1
    img_hw: tuple[int, int] = (224, 224)
    enc_embed_dim: int = 768
    enc_depth: int = 12
    enc_heads: int = 12
    dec_embed_dim: int = 512
    dec_depth: int = 8
    dec_heads: int = 16
    mlp_ratio: int = 4
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "img_hw", tuple(int(v) for v in self.img_hw))
        h, w = self.img_hw
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigError(f"image {self.img_hw} is not divisible by patch size {p}")
        if self.enc_embed_dim % self.enc_heads or self.dec_embed_dim % self.dec_heads:
            raise ConfigError("embed dims must be divisible by head counts")
        if self.enc_embed_dim % 4 or self.dec_embed_dim % 4:
            raise ConfigError("embed dims must be divisible by 4 for 2-D sin/cos positions")
        if min(self.enc_depth, self.dec_depth, self.in_channels) < 1:
            raise ConfigError("depths and channel count must be >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        return self.img_hw[0] // self.patch_size, self.img_hw[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["img_hw"] = list(self.img_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VitConfig":
        return cls(**d)


PRESETS = {
    "vit-s": VitConfig(16, 1, (224, 224), 512, 12, 8, 256, 8, 16, name="vit-s"),
    "vit-m": VitConfig(16, 1, (224, 224), 768, 12, 12, 512, 8, 16, name="vit-m"),
    "vit-l": VitConfig(16, 1, (224, 224), 1024, 24, 16, 512, 8, 16, name="vit-l"),
    "vit-tiny": VitConfig(16, 1, (224, 224), 64, 2, 4, 32, 1, 4, name="vit-tiny"),
}


def preset(name: str, **overrides) -> VitConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# parameter layout


def _block_shapes(prefix: str, d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    h = ratio * d
    return {
        f"{prefix}norm1.gain": (d,),
        f"{prefix}norm1.bias": (d,),
        f"{prefix}attn.qkv.weight": (d, 3 * d),
        # no key bias: it cancels in the softmax and would never get a gradient
        f"{prefix}attn.q.bias": (d,),
        f"{prefix}attn.v.bias": (d,),
        f"{prefix}attn.proj.weight": (d, d),
        f"{prefix}attn.proj.bias": (d,),
        f"{prefix}norm2.gain": (d,),
        f"{prefix}norm2.bias": (d,),
        f"{prefix}mlp.fc1.weight": (d, h),
        f"{prefix}mlp.fc1.bias": (h,),
        f"{prefix}mlp.fc2.weight": (h, d),
        f"{prefix}mlp.fc2.bias": (d,),
    }


def param_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in construction order."""
    d, dd = cfg.enc_embed_dim, cfg.dec_embed_dim
    shapes = {
        "encoder.patch_embed.weight": (cfg.patch_dim, d),
        "encoder.patch_embed.bias": (d,),
    }
    for i in range(cfg.enc_depth):
        shapes.update(_block_shapes(f"encoder.blocks.{i}.", d, cfg.mlp_ratio))
    shapes["encoder.norm.gain"] = (d,)
    shapes["encoder.norm.bias"] = (d,)
    shapes["decoder.embed.weight"] = (d, dd)
    shapes["decoder.embed.bias"] = (dd,)
    shapes["decoder.mask_token"] = (dd,)
    for i in range(cfg.dec_depth):
        shapes.update(_block_shapes(f"decoder.blocks.{i}.", dd, cfg.mlp_ratio))
    shapes["decoder.norm.gain"] = (dd,)
    shapes["decoder.norm.bias"] = (dd,)
    shapes["decoder.pred.weight"] = (dd, cfg.patch_dim)
    shapes["decoder.pred.bias"] = (cfg.patch_dim,)
    return shapes


def count_params(cfg: VitConfig) -> tuple[int, int]:
    """(encoder, decoder) parameter counts, without allocating the model."""
    enc = dec = 0
    for name, shape in param_shapes(cfg).items():
        n = int(np.prod(shape))
        if name.startswith(ENCODER_PREFIX):
            enc += n
        else:
            dec += n
    return enc, dec


def init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith("mask_token"):
        return 0.02 * rng.standard_normal(shape)
    if name.endswith(".gain"):
        return np.ones(shape)
    if len(shape) == 2:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, shape)
    return np.zeros(shape)


def build_params(shapes: dict[str, tuple[int, ...]], seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    return ParamSet({name: init_param(name, shape, rng) for name, shape in shapes.items()})


# ---------------------------------------------------------------------------
# patches, masks, positions


@dataclass
class PatchSet:
    patches: np.ndarray  # (M, D) or (N, M, D)
    grid: tuple[int, int]
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[-2]

    def to_image(self) -> np.ndarray:
        return unpatchify(self)


def patchify(img, p: int) -> PatchSet:
    """(C, H, W) or (N, C, H, W) -> rows of p*p*C values.

    Patches are ordered row-major over the (i, j) grid; inside a patch the
    values are ordered channel, then row u, then column v.
    """
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(n, gh * gw, c * p * p)
    return PatchSet(out[0] if single else out, (gh, gw), p, c)


def unpatchify(ps: PatchSet) -> np.ndarray:
    x = np.asarray(ps.patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    gh, gw = ps.grid
    p, c = ps.patch_size, ps.channels
    n, m, dim = x.shape
    if m != gh * gw or dim != c * p * p:
        raise ShapeError(f"patches {x.shape} do not match grid {ps.grid}, p={p}, C={c}")
    img = x.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, gh * p, gw * p)
    return img[0] if single else img


@dataclass
class MaskPlan:
    mask_ratio: float
    visible_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)

    def mask_vector(self) -> np.ndarray:
        """1 at masked positions, 0 at visible ones, in original patch order."""
        m = np.zeros(self.num_patches)
        m[self.masked_idx] = 1.0
        return m


def visible_count(m: int, mask_ratio: float) -> int:
    return max(1, int(math.floor(m * (1.0 - mask_ratio) + 0.5)))


def sample_mask(m: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random split of 0..m-1 into visible and masked indices."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {mask_ratio}")
    perm = rng.permutation(m)
    k = visible_count(m, mask_ratio)
    return MaskPlan(float(mask_ratio), perm[:k].copy(), perm[k:].copy())


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim / 2.0))
    ang = pos[:, None] * omega[None, :]
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def pos_embed_2d(grid: tuple[int, int], dim: int) -> np.ndarray:
    """Fixed sin/cos table, (gh*gw, dim): first half encodes the row, second the column."""
    if dim % 4:
        raise ConfigError("positional embedding dim must be divisible by 4")
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64),
                             indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows.reshape(-1)),
                           _sincos_1d(dim // 2, cols.reshape(-1))], axis=1)


def adapt_patch_embed_channels(w, channels: int) -> np.ndarray:
    """Tile a single-channel patch projection across ``channels`` blocks, each scaled 1/C.

    A channel-replicated input then maps to exactly the single-channel output.
    """
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if channels < 1:
        raise ConfigError("channels must be >= 1")
    if channels == 1:
        return w.copy()
    return np.concatenate([w / channels] * channels, axis=0)


# ---------------------------------------------------------------------------
# transformer pieces


def linear(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    return x @ params[prefix + "weight"] + params[prefix + "bias"]


def attention(x: Tensor, params: ParamSet, prefix: str, heads: int, trace: list | None = None) -> Tensor:
    n, l, d = x.shape
    dh = d // heads
    bias = T.concat([params[prefix + "q.bias"], Tensor(np.zeros(d)), params[prefix + "v.bias"]], axis=0)
    qkv = (x @ params[prefix + "qkv.weight"] + bias).reshape(n, l, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    probs = T.softmax_lastdim(scores)
    if trace is not None:
        trace.append(probs.data)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(n, l, d)
    return linear(out, params, prefix + "proj.")


def block(x: Tensor, params: ParamSet, prefix: str, heads: int, trace: list | None = None) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = T.layer_norm(x, params[prefix + "norm1.gain"], params[prefix + "norm1.bias"])
    x = x + attention(h, params, prefix + "attn.", heads, trace)
    h = T.layer_norm(x, params[prefix + "norm2.gain"], params[prefix + "norm2.bias"])
    h = linear(T.gelu(linear(h, params, prefix + "mlp.fc1.")), params, prefix + "mlp.fc2.")
    return x + h


def mask_plans(n: int, m: int, mask_ratio: float, seed: int, offset: int = 0) -> list[MaskPlan]:
    """One plan per sample, each from its own (seed, offset + i) stream."""
    return [sample_mask(m, mask_ratio, np.random.default_rng([int(seed), int(offset + i)]))
            for i in range(n)]


class MsmModel:
    """Parameters and forward pass of the spectrogram masked autoencoder."""

    def __init__(self, cfg: VitConfig, seed: int = 0, params: ParamSet | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else build_params(param_shapes(cfg), seed)
        self.enc_pos = pos_embed_2d(cfg.grid, cfg.enc_embed_dim)
        self.dec_pos = pos_embed_2d(cfg.grid, cfg.dec_embed_dim)
        self.last_encoder_tokens: int | None = None
        self.attention_trace: list | None = None

    # -- stages --------------------------------------------------------------

    def embed(self, patches, idx) -> Tensor:
        """Project patch rows and add encoder positions at their original indices.

        ``patches`` is (N, L, D) (or (L, D)), ``idx`` the matching patch indices.
        """
        x = T.as_tensor(patches)
        idx = np.asarray(idx)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
            idx = idx[None]
        if x.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"patch rows of length {x.shape[-1]}, model expects {self.cfg.patch_dim}")
        return linear(x, self.params, "encoder.patch_embed.") + Tensor(self.enc_pos[idx])

    def encode(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.cfg.enc_embed_dim:
            raise ShapeError("token width does not match the encoder")
        self.last_encoder_tokens = tokens.shape[1]
        x = tokens
        for i in range(self.cfg.enc_depth):
            x = block(x, self.params, f"encoder.blocks.{i}.", self.cfg.enc_heads, self.attention_trace)
        return T.layer_norm(x, self.params["encoder.norm.gain"], self.params["encoder.norm.bias"])

    def decoder_embed_and_reorder(self, features: Tensor, plans: list[MaskPlan]) -> Tensor:
        """Project to decoder width and restore original patch order with mask tokens."""
        n, l, _ = features.shape
        m = self.cfg.num_patches
        if len(plans) != n or any(len(p.visible_idx) != l for p in plans):
            raise ShapeError("features do not match the visible counts of the mask plans")
        x = linear(features, self.params, "decoder.embed.")
        if l < m:
            tokens = T.broadcast_to(self.params["decoder.mask_token"], (n, m - l, self.cfg.dec_embed_dim))
            x = T.concat([x, tokens], axis=1)
        order = np.stack([np.concatenate([p.visible_idx, p.masked_idx]) for p in plans])
        restore = np.argsort(order, axis=1, kind="stable")
        x = T.gather_rows(x, restore)
        return x + Tensor(self.dec_pos)

    def decode(self, seq: Tensor) -> Tensor:
        if seq.shape[1] != self.cfg.num_patches:
            raise ShapeError("decoder expects the full patch sequence")
        x = seq
        for i in range(self.cfg.dec_depth):
            x = block(x, self.params, f"decoder.blocks.{i}.", self.cfg.dec_heads, self.attention_trace)
        x = T.layer_norm(x, self.params["decoder.norm.gain"], self.params["decoder.norm.bias"])
        return linear(x, self.params, "decoder.pred.")

    # -- compositions --------------------------------------------------------

    def forward(self, images, plans: list[MaskPlan]) -> tuple[Tensor, np.ndarray]:
        """Masked reconstruction for a batch. Returns (recon (N,M,D) Tensor, target patches)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        target = patchify(images, self.cfg.patch_size).patches
        vis = np.stack([p.visible_idx for p in plans])
        visible = np.take_along_axis(target, vis[:, :, None], axis=1)
        tokens = self.embed(visible, vis)
        features = self.encode(tokens)
        seq = self.decoder_embed_and_reorder(features, plans)
        return self.decode(seq), target

    def encoder_features(self, images) -> Tensor:
        """Unmasked encoder output tokens, (N, M, enc_embed_dim)."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        patches = patchify(images, self.cfg.patch_size).patches
        idx = np.broadcast_to(np.arange(self.cfg.num_patches), patches.shape[:2])
        return self.encode(self.embed(patches, idx))

    # -- housekeeping --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict()

    def config_dict(self) -> dict:
        return {"vit": self.cfg.to_dict(), "preset": self.cfg.name, "seed": self.seed}

    @classmethod
    def from_state(cls, cfg: VitConfig, state: dict[str, np.ndarray]) -> "MsmModel":
        model = cls(cfg, params=ParamSet({n: np.zeros(s) for n, s in param_shapes(cfg).items()}))
        model.params.load_state_dict(state)
        return model

    def with_channels(self, channels: int) -> "MsmModel":
        """Copy whose patch projection accepts ``channels`` input channels.

        Only valid from a single-channel model; the decoder reconstruction head
        is resized with fresh weights since it is not used downstream.
        """
        if channels == self.cfg.in_channels:
            return copy.deepcopy(self)
        if self.cfg.in_channels != 1:
            raise ConfigError("channel adaptation starts from a single-channel model")
        cfg = replace(self.cfg, in_channels=channels)
        state = {n: t.data.copy() for n, t in self.params.items()}
        state["encoder.patch_embed.weight"] = adapt_patch_embed_channels(
            state["encoder.patch_embed.weight"], channels)
        rng = np.random.default_rng([self.seed, channels])
        for name in ("decoder.pred.weight", "decoder.pred.bias"):
            state[name] = init_param(name, param_shapes(cfg)[name], rng)
        model = MsmModel.from_state(cfg, state)
        model.seed = self.seed
        return model
