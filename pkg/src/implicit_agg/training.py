"""Metric-learning fine-tuning of the agg tokens and the trainable suffix."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .aggregation import ImAge, extract_descriptors, forward_image
from .archive import save_tensors
from .errors import ContractError, DataError, NumericError
from .retrieval import ImageStore, PlaceManifest, recall_at_n
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    places_per_batch: int = 120
    images_per_place: int = 4
    lr: float = 0.00005
    lr_halving_epochs: int = 3
    max_epochs: int = 20
    steps_per_epoch: int = 0  # 0: one pass over the places
    ms_alpha: float = 1.0
    ms_beta: float = 50.0
    ms_lambda: float = 0.5
    ms_margin: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.places_per_batch, self.lr_halving_epochs, self.max_epochs) < 1:
            raise ContractError("batch/schedule counts must be >= 1")
        if self.images_per_place < 2:
            raise ContractError("images_per_place must be >= 2 so positives exist")
        if self.lr <= 0:
            raise ContractError("lr must be positive")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: halve every ``lr_halving_epochs`` epochs."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_epochs)


# ---------------------------------------------------------------- batches


def eligible_places(manifest: PlaceManifest, cfg: TrainConfig) -> list:
    return [p for p in manifest.places() if len(p) >= cfg.images_per_place]


def steps_per_epoch(manifest: PlaceManifest, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(len(eligible_places(manifest, cfg)) / cfg.places_per_batch))


def sample_indices(manifest: PlaceManifest, cfg: TrainConfig, epoch: int, step: int) -> tuple:
    """Record indices and place labels for one batch.

    Each epoch walks a seeded permutation of the places in chunks of
    ``places_per_batch`` (wrapping at the end), so any epoch with
    ``ceil(P / places_per_batch)`` steps visits every place.
    """
    places = eligible_places(manifest, cfg)
    P = cfg.places_per_batch
    if len(places) < P:
        raise DataError(
            f"need {P} places with >= {cfg.images_per_place} images, have {len(places)}"
        )
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(places))
    start = (step * P) % len(places)
    chosen = [int(order[(start + j) % len(places)]) for j in range(P)]
    rng = np.random.default_rng([cfg.seed, epoch, step, 1])
    idx, labels = [], []
    for pl in chosen:
        members = places[pl]
        pick = rng.choice(len(members), size=cfg.images_per_place, replace=False)
        idx.extend(members[int(k)] for k in pick)
        labels.extend([pl] * cfg.images_per_place)
    return np.array(idx, dtype=int), np.array(labels, dtype=int)


def sample_batch(manifest: PlaceManifest, cfg: TrainConfig, epoch: int, step: int, store: Optional[ImageStore] = None) -> tuple:
    """``(images (B, C, H, W), labels (B,))`` deterministic in (seed, epoch, step)."""
    idx, labels = sample_indices(manifest, cfg, epoch, step)
    store = store or ImageStore(manifest)
    return store.load(idx), labels


# ---------------------------------------------------------------- loss


def ms_masks(sim: np.ndarray, labels: np.ndarray, margin: float) -> tuple:
    """Mined positive / negative masks from a similarity matrix.

    Positive ``p`` of anchor ``i`` is kept when ``S_ip < max_n S_in + margin``;
    negative ``n`` when ``S_in > min_p S_ip - margin``. An anchor without
    negatives keeps all its positives and vice versa.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1, keepdims=True)
    easiest_pos = np.where(pos, sim, np.inf).min(axis=1, keepdims=True)
    has_neg = neg.any(axis=1, keepdims=True)
    has_pos = pos.any(axis=1, keepdims=True)
    keep_pos = pos & ((sim < hardest_neg + margin) | ~has_neg)
    keep_neg = neg & ((sim > easiest_pos - margin) | ~has_pos)
    return keep_pos, keep_neg


def ms_loss(desc: Tensor, labels, cfg: TrainConfig) -> Tensor:
    """Multi-similarity loss averaged over all anchors of the batch."""
    B = desc.shape[0]
    if B < 2 or desc.ndim != 2:
        raise ContractError(f"ms_loss needs a (B>=2, D) batch, got {desc.shape}")
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    sim = T.matmul(desc, T.swap_last(desc))
    keep_pos, keep_neg = ms_masks(sim.data, labels, cfg.ms_margin)
    a, b, lam = cfg.ms_alpha, cfg.ms_beta, cfg.ms_lambda
    pos_terms = T.mul(T.exp(T.mul(T.sub(sim, lam), -a)), keep_pos.astype(np.float64))
    neg_terms = T.mul(T.exp(T.mul(T.sub(sim, lam), b)), keep_neg.astype(np.float64))
    pos_loss = T.mul(T.log(T.add(T.tsum(pos_terms, axis=1), 1.0)), 1.0 / a)
    neg_loss = T.mul(T.log(T.add(T.tsum(neg_terms, axis=1), 1.0)), 1.0 / b)
    return T.mean(T.add(pos_loss, neg_loss))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamState, lr_t: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One Adam update of every trainable tensor in ``params`` that has a gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError(f"{name}: grad shape {g.shape} vs param {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = g * (1 - beta1) if m is None else beta1 * m + (1 - beta1) * g
        v = g * g * (1 - beta2) if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- loop


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)  # (step, epoch, lr, loss)
    tape_nodes: list = field(default_factory=list)
    val_recall: list = field(default_factory=list)  # (epoch, R@1)
    best_epoch: int = -1
    wall_time: float = 0.0

    @property
    def losses(self) -> list:
        return [r[3] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "epoch", "lr", "loss"])
            for step, epoch, lr, loss in self.rows:
                w.writerow([step, epoch, repr(lr), repr(loss)])


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average; entry ``t`` averages ``values[max(0, t-window+1) : t+1]``."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def train_step(model: ImAge, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, state: AdamState, lr_t: float) -> tuple:
    """Forward, loss, backward and one optimizer update. Returns ``(loss, tape)``."""
    params = model.trainable()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        desc, _ = forward_image(images, model)
        loss = ms_loss(desc, labels, cfg)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericError(f"loss became {value}")
    tape.backward(loss)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    if cfg.grad_clip > 0:
        norm = T.parameters_grad_norm(params.values())
        if norm > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
    optimizer_step(
        params, grads, state, lr_t,
        cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay,
    )
    return value, tape


def evaluate(model: ImAge, manifest: PlaceManifest, store: Optional[ImageStore] = None, ns=(1, 5, 10), batch_size: int = 64, threads: int = 1):
    store = store or ImageStore(manifest)
    desc = extract_descriptors(model, store.all(), batch_size=batch_size, threads=threads)
    q = desc[manifest.role_indices("query")]
    d = desc[manifest.role_indices("database")]
    return recall_at_n(q, d, manifest, ns)


def train(model: ImAge, manifest: PlaceManifest, cfg: TrainConfig, val_manifest: Optional[PlaceManifest] = None, out_dir=None, max_steps: Optional[int] = None, store: Optional[ImageStore] = None, val_store: Optional[ImageStore] = None, keep_best: bool = True) -> TrainingLog:
    """Run ``max_epochs`` epochs (or ``max_steps`` steps) of MS-loss training.

    With a validation manifest, Recall@1 is measured after every epoch and the
    best epoch's weights are restored at the end when ``keep_best``.
    """
    t0 = time.perf_counter()
    store = store or ImageStore(manifest)
    if val_manifest is not None:
        val_store = val_store or ImageStore(val_manifest)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainingLog()
    state = AdamState()
    per_epoch = steps_per_epoch(manifest, cfg)
    best_r1, best_state = -1.0, None
    step = 0
    for epoch in range(cfg.max_epochs):
        if max_steps is not None and step >= max_steps:
            break
        lr_t = lr_schedule(cfg, epoch)
        for s in range(per_epoch):
            if max_steps is not None and step >= max_steps:
                break
            idx, labels = sample_indices(manifest, cfg, epoch, s)
            try:
                loss, tape = train_step(model, store.load(idx), labels, cfg, state, lr_t)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            step += 1
            tlog.rows.append((step, epoch, lr_t, loss))
            tlog.tape_nodes.append(len(tape))
            log.debug("epoch %d step %d lr %.3g loss %.5f", epoch, step, lr_t, loss)
        if val_manifest is not None:
            r1 = evaluate(model, val_manifest, val_store, ns=(1,)).recall_at[1]
            tlog.val_recall.append((epoch, r1))
            log.info("epoch %d: val R@1 %.3f", epoch, r1)
            if r1 > best_r1:
                best_r1, best_state, tlog.best_epoch = r1, model.state_dict(), epoch
        if out is not None:
            save_tensors(out / f"epoch{epoch:02d}.imgt", model.state_dict())
    if keep_best and best_state is not None:
        model.load_state_dict(best_state)
    if out is not None:
        save_tensors(out / "best.imgt", model.state_dict())
        tlog.write_csv(out / "train_log.csv")
    tlog.wall_time = time.perf_counter() - t0
    return tlog
