"""Implicit aggregation: learnable agg tokens prepended mid-backbone.

The agg tokens join the sequence before one or more encoder blocks, interact
with class and patch tokens through ordinary self-attention, and their final
states, flattened and L2-normalized, form the global descriptor.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ContractError
from .pnm import write_pgm
from .tensor import Tensor
from .vit import (
    BackboneConfig,
    TokenSequence,
    ViT,
    embed,
    encoder_block,
    final_norm,
    forward_to_block,
)

log = logging.getLogger(__name__)

STRATEGIES = ("A_frozen", "A_hat_all_trainable", "B_junction", "C_deep", "D_progressive")
STRATEGY_ALIASES = {
    "a": "A_frozen",
    "ahat": "A_hat_all_trainable",
    "â": "A_hat_all_trainable",
    "b": "B_junction",
    "c": "C_deep",
    "d": "D_progressive",
}
INIT_METHODS = ("zero", "normal", "centers", "centers_l2n")
READOUTS = ("agg", "cls", "mean")


def resolve_strategy(name: str) -> str:
    if name in STRATEGIES:
        return name
    try:
        return STRATEGY_ALIASES[name.lower()]
    except KeyError:
        raise ContractError(f"unknown strategy {name!r}; expected one of {STRATEGIES}") from None


@dataclass
class AggConfig:
    num_tokens: int = 8
    strategy: str = "B_junction"
    init_method: str = "centers_l2n"
    readout: str = "agg"
    keep_class: bool = True
    agg_pos_embed: bool = False
    per_head_maps: bool = False

    def __post_init__(self):
        self.strategy = resolve_strategy(self.strategy)
        if self.init_method not in INIT_METHODS:
            raise ContractError(f"unknown init method {self.init_method!r}")
        if self.readout not in READOUTS:
            raise ContractError(f"unknown readout {self.readout!r}")
        if self.num_tokens < 0:
            raise ContractError("num_tokens must be >= 0")
        if self.readout == "agg" and self.num_tokens == 0:
            raise ContractError("readout 'agg' needs at least one agg token")

    def insertion_blocks(self, num_blocks: int, frozen_prefix: int) -> list:
        """``[(block_index, tokens_added), ...]`` in insertion order."""
        M = self.num_tokens
        if M == 0:
            return []
        s = self.strategy
        if s in ("A_frozen", "A_hat_all_trainable"):
            sched = [(0, M)]
        elif s == "B_junction":
            sched = [(frozen_prefix, M)]
        elif s == "C_deep":
            if num_blocks < 2:
                raise ContractError("C_deep needs at least 2 blocks")
            sched = [(num_blocks - 2, M)]
        else:
            if num_blocks < 4:
                raise ContractError("D_progressive needs at least 4 blocks")
            base, extra = divmod(M, 4)
            sched = [
                (num_blocks - 4 + j, base + (1 if j < extra else 0)) for j in range(4)
            ]
            sched = [(b, c) for b, c in sched if c > 0]
        assert sum(c for _, c in sched) == M
        return sched


@dataclass
class AggTokens:
    values: Tensor
    pos: Optional[Tensor] = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ContractError(f"agg tokens must be (M, D), got {self.values.shape}")
        self.values.requires_grad = True
        self.values.name = "agg"
        if self.pos is not None:
            self.pos.requires_grad = True
            self.pos.name = "agg_pos"

    @property
    def count(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, arr, with_pos: bool = False) -> "AggTokens":
        arr = np.asarray(arr, dtype=np.float64)
        pos = Tensor(np.zeros_like(arr), requires_grad=True) if with_pos else None
        return cls(Tensor(arr, requires_grad=True), pos)


class ImAge:
    """Backbone + agg tokens + the aggregation configuration that schedules them."""

    def __init__(self, vit: ViT, agg: Optional[AggTokens], cfg: AggConfig):
        if cfg.num_tokens and (agg is None or agg.count != cfg.num_tokens):
            raise ContractError(
                f"config wants {cfg.num_tokens} agg tokens, got "
                f"{None if agg is None else agg.count}"
            )
        if agg is not None and agg.width != vit.cfg.embed_dim:
            raise ContractError(f"agg width {agg.width} != embed_dim {vit.cfg.embed_dim}")
        self.vit = vit
        self.agg = agg if cfg.num_tokens else None
        self.cfg = cfg
        self.apply_strategy()

    @classmethod
    def build(cls, backbone: BackboneConfig, cfg: AggConfig, agg_values=None) -> "ImAge":
        vit = ViT(backbone)
        agg = None
        if cfg.num_tokens:
            if agg_values is None:
                agg_values = np.zeros((cfg.num_tokens, backbone.embed_dim))
            agg = AggTokens.from_array(agg_values, with_pos=cfg.agg_pos_embed)
        return cls(vit, agg, cfg)

    def apply_strategy(self) -> None:
        if self.cfg.strategy == "A_hat_all_trainable":
            self.vit.unfreeze_all()
        else:
            self.vit.freeze_prefix(self.vit.cfg.frozen_prefix)

    def parameters(self) -> dict:
        out = dict(self.vit.params)
        if self.agg is not None:
            out["agg"] = self.agg.values
            if self.agg.pos is not None:
                out["agg_pos"] = self.agg.pos
        return out

    def trainable(self) -> dict:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        self.vit.load_state_dict(state, strict=strict)
        if self.agg is not None:
            for key, t in (("agg", self.agg.values), ("agg_pos", self.agg.pos)):
                if t is None:
                    continue
                if key in state:
                    arr = np.asarray(state[key], dtype=np.float64)
                    if arr.shape != t.shape:
                        raise ContractError(f"{key}: shape {arr.shape} vs {t.shape}")
                    t.data = arr.copy()
                elif strict:
                    raise KeyError(f"checkpoint lacks {key!r}")

    def set_agg(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if self.agg is None or values.shape != self.agg.values.shape:
            raise ContractError(f"agg values of shape {values.shape} do not fit this model")
        self.agg.values.data = values.copy()


def insert_tokens(seq: TokenSequence, agg: AggTokens, count: int, keep_class: bool = True) -> TokenSequence:
    """Prepend the next ``count`` uninserted agg rows; existing tokens are untouched."""
    done = sum(seq.agg_groups)
    if count < 0 or done + count > agg.count:
        raise ContractError(
            f"cannot insert {count} tokens: {done} of {agg.count} already inserted"
        )
    if count == 0:
        return seq
    x = seq.tokens
    with T.scope("insert"):
        rows = T.take(agg.values, done, done + count, axis=0)
        if agg.pos is not None:
            rows = T.add(rows, T.take(agg.pos, done, done + count, axis=0))
        if x.ndim == 3:
            B, D = x.shape[0], x.shape[-1]
            rows = T.broadcast_to(T.reshape(rows, (1, count, D)), (B, count, D))
        has_class = seq.has_class
        if has_class and not keep_class:
            parts = [seq.agg_segment()] if seq.agg_count else []
            x = T.concat_rows(parts + [seq.patch_segment()])
            has_class = False
        tokens = T.concat_rows([rows, x])
    return TokenSequence(
        tokens,
        agg_count=seq.agg_count + count,
        has_class=has_class,
        agg_groups=seq.agg_groups + (count,),
    )


def segment_agg_rows(seq: TokenSequence) -> list:
    """Agg-tensor row index of each position in the agg segment."""
    starts = np.cumsum((0,) + seq.agg_groups[:-1])
    rows = []
    for start, size in reversed(list(zip(starts, seq.agg_groups))):
        rows.extend(range(int(start), int(start) + size))
    return rows


def forward_tokens(image, model: ImAge, cfg: Optional[AggConfig] = None, maps: Optional[list] = None) -> TokenSequence:
    """Run the insertion schedule end to end and apply the final norm."""
    cfg = cfg or model.cfg
    vit = model.vit
    L, L1 = vit.cfg.num_blocks, vit.cfg.frozen_prefix
    sched = dict(cfg.insertion_blocks(L, L1))
    seq = embed(image, vit)
    for i in range(L):
        if i in sched:
            seq = insert_tokens(seq, model.agg, sched[i], cfg.keep_class)
        seq, attn = encoder_block(seq, vit, i, record_attention=maps is not None)
        if maps is not None:
            maps.append(attn)
    return final_norm(seq, vit)


def readout(seq: TokenSequence, how: str = "agg") -> Tensor:
    """Global descriptor(s) from a final token sequence, L2-normalized."""
    x = seq.tokens
    lead = x.shape[:-2]
    D = x.shape[-1]
    if how == "agg":
        seg = seq.agg_segment()
        groups = seq.agg_groups or (seq.agg_count,)
        if len(groups) > 1:
            # segment holds newest group first; descriptor wants oldest first
            bounds = np.cumsum((0,) + tuple(reversed(groups)))
            pieces = [T.take(seg, int(bounds[j]), int(bounds[j + 1])) for j in range(len(groups))]
            seg = T.concat_rows(pieces[::-1])
        flat = T.reshape(seg, lead + (seq.agg_count * D,))
    elif how == "cls":
        flat = T.reshape(seq.class_segment(), lead + (D,))
    elif how == "mean":
        flat = T.mean(seq.patch_segment(), axis=-2)
    else:
        raise ContractError(f"unknown readout {how!r}")
    return T.l2_normalize(flat)


def forward_image(image, model: ImAge, cfg: Optional[AggConfig] = None):
    """``(descriptor, final TokenSequence)`` for one image or a batch."""
    cfg = cfg or model.cfg
    seq = forward_tokens(image, model, cfg)
    return readout(seq, cfg.readout), seq


def _plain_forward(image, vit: ViT) -> TokenSequence:
    seq = forward_to_block(image, vit, vit.cfg.num_blocks)
    return final_norm(seq, vit)


def class_token_descriptor(image, vit: ViT) -> Tensor:
    return readout(_plain_forward(image, vit), "cls")


def mean_pool_descriptor(image, vit: ViT) -> Tensor:
    return readout(_plain_forward(image, vit), "mean")


def extract_descriptors(model: ImAge, images, batch_size: int = 32, threads: int = 1) -> np.ndarray:
    """Inference-mode descriptors for ``images`` ``(n, C, H, W)``, rows in input order."""
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    chunks = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]

    def run(bounds):
        s, e = bounds
        with T.inference_mode():
            desc, _ = forward_image(images[s:e], model)
        return desc.data

    if threads > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    if not parts:
        return np.zeros((0, 0))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------- attention analysis


@dataclass
class DecompositionReport:
    """Agg-row split of the unnormalized product ``Q K^T V``."""

    joint_agg_rows: np.ndarray
    agg_agg: np.ndarray
    agg_patch: np.ndarray
    residual: float
    agg_agg_norm: float
    agg_patch_norm: float
    softmax_patch_mass: np.ndarray = field(repr=False)

    @property
    def exact(self) -> bool:
        return self.residual == 0.0


def decompose_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, agg_count: int, patch_start: Optional[int] = None) -> DecompositionReport:
    """Split the agg rows of ``(Q K^T) V`` into agg-agg and agg-other terms.

    Rows ``[0, agg_count)`` are agg tokens; the rest (class + patch) form the
    other block. No softmax or scaling is applied to the split terms. The
    softmax-normalized agg attention mass on columns ``[patch_start, T)`` is
    reported alongside, since softmax breaks the additive split.
    """
    M = agg_count
    n = q.shape[0]
    if M <= 0 or M >= n:
        raise ContractError(f"need agg and non-agg rows, got agg_count={M} of {n}")
    qa, ka, kz, va, vz = q[:M], k[:M], k[M:], v[:M], v[M:]
    joint = (qa @ k.T) @ v
    aa = (qa @ ka.T) @ va
    ap = (qa @ kz.T) @ vz
    residual = float(np.max(np.abs(joint - (aa + ap))))
    ps = M if patch_start is None else patch_start
    s = qa @ k.T / math.sqrt(q.shape[1])
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return DecompositionReport(
        joint_agg_rows=joint,
        agg_agg=aa,
        agg_patch=ap,
        residual=residual,
        agg_agg_norm=float(np.linalg.norm(aa)),
        agg_patch_norm=float(np.linalg.norm(ap)),
        softmax_patch_mass=w[:, ps:].sum(axis=1),
    )


def attention_decomposition(seq: TokenSequence, vit: ViT, block: int, head: int = 0) -> DecompositionReport:
    """Decompose one head of ``block`` applied to ``seq`` (first image if batched)."""
    if seq.agg_count == 0 or seq.num_patches == 0:
        raise ContractError("decomposition needs both agg and patch tokens")
    cfg = vit.cfg
    p = vit.block(block)
    x = seq.tokens.data
    if x.ndim == 3:
        x = x[0]
    with T.inference_mode():
        h = T.layer_norm(Tensor(x), p["ln1.w"], p["ln1.b"], cfg.ln_eps).data
    qkv = h @ p["qkv.w"].data + p["qkv.b"].data
    D, d = cfg.embed_dim, cfg.head_dim
    sl = slice(head * d, (head + 1) * d)
    q, k, v = qkv[:, :D][:, sl], qkv[:, D : 2 * D][:, sl], qkv[:, 2 * D :][:, sl]
    return decompose_attention(q, k, v, seq.agg_count, seq.patch_start)


def last_block_attention(image, model: ImAge, cfg: Optional[AggConfig] = None):
    """``(attn (h, T, T), final sequence)`` for a single image."""
    maps: list = []
    with T.inference_mode():
        seq = forward_tokens(image, model, cfg, maps=maps)
    attn = maps[-1]
    if attn.ndim == 4:
        attn = attn[0]
    return attn, seq


def dump_attention_maps(image, model: ImAge, out_dir, cfg: Optional[AggConfig] = None, per_head: Optional[bool] = None) -> dict:
    """Write last-block agg->patch attention as 16-bit PGM grids plus a CSV.

    Files: ``agg{k}.pgm`` per agg token (head-averaged), ``merged.pgm``
    (elementwise max over tokens), ``weights.csv``, and ``agg{k}_head{h}.pgm``
    when ``per_head`` is set. Grid values are ``round(weight * 65535)``.
    """
    cfg = cfg or model.cfg
    per_head = cfg.per_head_maps if per_head is None else per_head
    if cfg.num_tokens == 0:
        raise ContractError("attention maps need agg tokens")
    attn, seq = last_block_attention(image, model, cfg)
    gh, gw = model.vit.cfg.grid
    ps = seq.patch_start
    mean_rows = attn.mean(axis=0)
    seg_rows = segment_agg_rows(seq)
    order = np.argsort(seg_rows)
    rows = mean_rows[: seq.agg_count][order]
    maps = rows[:, ps:].reshape(-1, gh, gw)
    merged = maps.max(axis=0)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def to_pgm(m):
        return np.rint(np.clip(m, 0.0, 1.0) * 65535).astype(np.uint16)

    for k, m in enumerate(maps):
        write_pgm(out / f"agg{k:02d}.pgm", to_pgm(m))
        if per_head:
            for h in range(attn.shape[0]):
                hm = attn[h, seg_rows.index(k), ps:].reshape(gh, gw)
                write_pgm(out / f"agg{k:02d}_head{h}.pgm", to_pgm(hm))
    write_pgm(out / "merged.pgm", to_pgm(merged))
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["token_index", "patch_row", "patch_col", "weight"])
        for k, m in enumerate(maps):
            for r in range(gh):
                for c in range(gw):
                    w.writerow([k, r, c, repr(float(m[r, c]))])
    return {"maps": maps, "merged": merged, "rows": rows, "attention": attn}
