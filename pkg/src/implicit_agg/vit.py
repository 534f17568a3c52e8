"""Miniature pre-norm vision transformer.

Token layout is always ``[agg | class | patch]``. Parameters live in a flat
``name -> Tensor`` dict using the checkpoint names
``block{i}.{ln1,qkv,proj,ln2,fc1,fc2}.{w,b}``, ``embed.{w,b}``, ``pos``,
``cls`` and ``norm.{w,b}``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

BLOCK_PARTS = ("ln1", "qkv", "proj", "ln2", "fc1", "fc2")


@dataclass
class BackboneConfig:
    image_h: int = 28
    image_w: int = 28
    patch_size: int = 14
    embed_dim: int = 32
    num_blocks: int = 6
    num_heads: int = 4
    frozen_prefix: int = 2
    mlp_ratio: int = 4
    channels: int = 3
    ln_eps: float = 1e-6
    init_std: float = 0.02
    final_norm: bool = True
    model_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        P = self.patch_size
        if P <= 0 or self.image_h % P or self.image_w % P:
            raise ContractError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {P}"
            )
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ContractError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0 <= self.frozen_prefix <= self.num_blocks:
            raise ContractError(
                f"frozen_prefix {self.frozen_prefix} outside [0, {self.num_blocks}]"
            )
        if self.mlp_ratio <= 0 or self.ln_eps <= 0:
            raise ContractError("mlp_ratio and ln_eps must be positive")

    @property
    def grid(self) -> tuple:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def trainable_suffix(self) -> int:
        return self.num_blocks - self.frozen_prefix

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @classmethod
    def toy(cls, **kw) -> "BackboneConfig":
        return replace(cls(), **kw)

    @classmethod
    def desk(cls, **kw) -> "BackboneConfig":
        base = cls(
            image_h=56, image_w=56, patch_size=8, embed_dim=64,
            num_blocks=8, num_heads=4, frozen_prefix=4,
        )
        return replace(base, **kw)


@dataclass
class TokenSequence:
    """Token matrix ``(..., T, D)`` with ``[agg | class | patch]`` bookkeeping.

    ``agg_groups`` lists insertion sizes oldest first. Newer groups are
    prepended, so the agg segment holds them in reverse insertion order.
    """

    tokens: Tensor
    agg_count: int = 0
    has_class: bool = True
    agg_groups: tuple = field(default_factory=tuple)

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def num_patches(self) -> int:
        return self.length - self.agg_count - int(self.has_class)

    @property
    def patch_start(self) -> int:
        return self.agg_count + int(self.has_class)

    def agg_segment(self) -> Tensor:
        if self.agg_count == 0:
            raise ContractError("sequence holds no aggregation tokens")
        return T.take(self.tokens, 0, self.agg_count)

    def class_segment(self) -> Tensor:
        if not self.has_class:
            raise ContractError("sequence holds no class token")
        return T.take(self.tokens, self.agg_count, self.agg_count + 1)

    def patch_segment(self) -> Tensor:
        return T.take(self.tokens, self.patch_start, self.length)

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


def init_params(cfg: BackboneConfig) -> dict:
    rng = np.random.default_rng(cfg.model_seed)
    D, H = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    std = cfg.init_std

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    p = {
        "embed.w": normal(cfg.patch_dim, D),
        "embed.b": np.zeros(D),
        "cls": normal(D),
        "pos": normal(cfg.num_patches + 1, D),
    }
    for i in range(cfg.num_blocks):
        p[f"block{i}.ln1.w"] = np.ones(D)
        p[f"block{i}.ln1.b"] = np.zeros(D)
        p[f"block{i}.qkv.w"] = normal(D, 3 * D)
        p[f"block{i}.qkv.b"] = np.zeros(3 * D)
        p[f"block{i}.proj.w"] = normal(D, D)
        p[f"block{i}.proj.b"] = np.zeros(D)
        p[f"block{i}.ln2.w"] = np.ones(D)
        p[f"block{i}.ln2.b"] = np.zeros(D)
        p[f"block{i}.fc1.w"] = normal(D, H)
        p[f"block{i}.fc1.b"] = np.zeros(H)
        p[f"block{i}.fc2.w"] = normal(H, D)
        p[f"block{i}.fc2.b"] = np.zeros(D)
    p["norm.w"] = np.ones(D)
    p["norm.b"] = np.zeros(D)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class ViT:
    """Parameter container plus the shape checks shared by the forward ops."""

    def __init__(self, cfg: BackboneConfig, params: Optional[dict] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.freeze_prefix(cfg.frozen_prefix)

    def block(self, i: int) -> dict:
        if not 0 <= i < self.cfg.num_blocks:
            raise ContractError(f"block index {i} outside [0, {self.cfg.num_blocks})")
        pre = f"block{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def block_frozen(self, i: int) -> bool:
        return not any(t.requires_grad for t in self.block(i).values())

    def embed_frozen(self) -> bool:
        return not any(self.params[k].requires_grad for k in ("embed.w", "embed.b", "cls", "pos"))

    def set_trainable(self, names, flag: bool) -> None:
        for n in names:
            self.params[n].requires_grad = flag

    def freeze_prefix(self, count: int) -> None:
        """Freeze embedding + blocks ``[0, count)``; everything else trainable."""
        self.unfreeze_all()
        if count == 0:
            return
        frozen = ["embed.w", "embed.b", "cls", "pos"]
        for i in range(count):
            frozen += [f"block{i}.{part}.{s}" for part in BLOCK_PARTS for s in "wb"]
        self.set_trainable(frozen, False)

    def unfreeze_all(self) -> None:
        for t in self.params.values():
            t.requires_grad = True

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        for k, t in self.params.items():
            if k not in state:
                if strict:
                    raise KeyError(f"checkpoint lacks {k!r}")
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.copy()


def _as_batch(image) -> tuple:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    return (arr[None] if single else arr), single


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, N, C*P*P)``, patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, C * patch * patch)


def patch_embed(image, vit: ViT) -> TokenSequence:
    """Project patches, prepend the class token, add positional embeddings."""
    cfg = vit.cfg
    batch, single = _as_batch(image)
    if batch.ndim != 4 or batch.shape[1:] != (cfg.channels, cfg.image_h, cfg.image_w):
        raise DimensionError(
            f"image shape {batch.shape[1:]} does not match "
            f"({cfg.channels}, {cfg.image_h}, {cfg.image_w})"
        )
    p = vit.params
    patches = Tensor(patchify(batch, cfg.patch_size))
    x = T.linear(patches, p["embed.w"], p["embed.b"])
    B, D = batch.shape[0], cfg.embed_dim
    cls = T.broadcast_to(T.reshape(p["cls"], (1, 1, D)), (B, 1, D))
    x = T.add(T.concat_rows([cls, x]), p["pos"])
    if single:
        x = T.reshape(x, x.shape[1:])
    return TokenSequence(x, agg_count=0, has_class=True)


def mhsa(x: Tensor, p: dict, num_heads: int, record_attention: bool = False):
    """Multi-head self-attention over every token of ``x`` (``(..., T, D)``).

    Returns ``(out, attn)`` where ``attn`` is ``(..., h, T, T)`` softmax weights
    when ``record_attention`` is set, else ``None``.
    """
    D = x.shape[-1]
    if p["qkv.w"].shape != (D, 3 * D):
        raise DimensionError(f"token width {D} vs qkv weight {p['qkv.w'].shape}")
    d = D // num_heads
    lead, n = x.shape[:-2], x.shape[-2]
    nd = len(lead)
    heads_first = tuple(range(nd)) + (nd + 1, nd, nd + 2)
    qkv = T.linear(x, p["qkv.w"], p["qkv.b"])

    def split(j):
        part = T.take(qkv, j * D, (j + 1) * D, axis=-1)
        return T.permute(T.reshape(part, lead + (n, num_heads, d)), heads_first)

    q, k, v = split(0), split(1), split(2)
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d))
    attn = T.softmax(scores)
    ctx = T.matmul(attn, v)
    ctx = T.reshape(T.permute(ctx, heads_first), lead + (n, D))
    out = T.linear(ctx, p["proj.w"], p["proj.b"])
    return out, (attn.data.copy() if record_attention else None)


def mlp(x: Tensor, p: dict) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])


def encoder_block(seq: TokenSequence, vit: ViT, i: int, record_attention: bool = False):
    """One pre-norm block: attention residual then MLP residual.

    Runs under inference mode when neither the block nor its input needs a
    gradient, so a frozen prefix leaves the tape untouched.
    """
    cfg = vit.cfg
    p = vit.block(i)
    x = seq.tokens
    if x.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"token width {x.shape[-1]} != embed_dim {cfg.embed_dim}")
    frozen = vit.block_frozen(i) and not x.requires_grad
    ctx = T.inference_mode() if frozen else contextlib.nullcontext()
    with ctx, T.scope(f"block{i}"):
        h = T.layer_norm(x, p["ln1.w"], p["ln1.b"], cfg.ln_eps)
        a, attn = mhsa(h, p, cfg.num_heads, record_attention)
        x = T.add(x, a)
        m = mlp(T.layer_norm(x, p["ln2.w"], p["ln2.b"], cfg.ln_eps), p)
        x = T.add(x, m)
    return seq.with_tokens(x), attn


def final_norm(seq: TokenSequence, vit: ViT) -> TokenSequence:
    if not vit.cfg.final_norm:
        return seq
    p = vit.params
    with T.scope("norm"):
        return seq.with_tokens(T.layer_norm(seq.tokens, p["norm.w"], p["norm.b"], vit.cfg.ln_eps))


def embed(image, vit: ViT) -> TokenSequence:
    frozen = vit.embed_frozen()
    ctx = T.inference_mode() if frozen else contextlib.nullcontext()
    with ctx, T.scope("embed"):
        return patch_embed(image, vit)


def run_blocks(seq: TokenSequence, vit: ViT, start: int, stop: int, maps: Optional[list] = None):
    for i in range(start, stop):
        seq, attn = encoder_block(seq, vit, i, record_attention=maps is not None)
        if maps is not None:
            maps.append(attn)
    return seq


def forward_to_block(image, vit: ViT, stop_block: int, maps: Optional[list] = None) -> TokenSequence:
    """Embed then run blocks ``[0, stop_block)``; frozen blocks record nothing."""
    L = vit.cfg.num_blocks
    if not 0 <= stop_block <= L:
        raise ContractError(f"stop_block {stop_block} outside [0, {L}]")
    return run_blocks(embed(image, vit), vit, 0, stop_block, maps)
