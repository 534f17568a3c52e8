"""Agg-token initialization: zero, Gaussian, k-means centers, normalized centers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .aggregation import AggConfig, AggTokens, ImAge
from .errors import DataError
from .vit import forward_to_block

log = logging.getLogger(__name__)

NORMAL_STD = 0.02


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences, not the expanded ||x||^2 - 2xc + ||c||^2 form, for exactness
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("skd,skd->sk", diff, diff)


def kmeans_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform picks when all distances vanish."""
    S = points.shape[0]
    idx = [int(rng.integers(S))]
    d2 = _sq_dists(points, points[idx]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(S, p=d2 / total))
        else:
            nxt = int(rng.integers(S))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[nxt : nxt + 1])[:, 0])
    return points[idx].copy()


def kmeans(points, k: int, max_iter: int = 100, tol: float = 1e-6, seed: int = 0, init_centers: Optional[np.ndarray] = None) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds (or ``init_centers``).

    An empty cluster is re-seeded at the point farthest from its assigned
    center. Stops once every center moves less than ``tol``.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"points must be (S, D), got {X.shape}")
    S = X.shape[0]
    if k <= 0 or S < k:
        raise DataError(f"k-means needs at least k={k} points, got {S}")
    if init_centers is None:
        centers = kmeans_plusplus(X, k, np.random.default_rng(seed))
    else:
        centers = np.array(init_centers, dtype=np.float64, copy=True)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centers)
        assign = d2.argmin(axis=1)
        point_cost = d2[np.arange(S), assign]
        history.append(float(point_cost.sum()))
        new = centers.copy()
        taken = set()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        for j in range(k):
            if not (assign == j).any():
                order = np.argsort(-point_cost, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new[j] = X[far]
                log.debug("k-means: re-seeded empty cluster %d at point %d", j, far)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(X, centers)
    assign = d2.argmin(axis=1)
    inertia = float(d2[np.arange(S), assign].sum())
    history.append(inertia)
    if np.isnan(centers).any():
        raise DataError("k-means produced NaN centers")
    return KMeansResult(centers, assign, inertia, it, history)


def l2_normalize_rows(x: np.ndarray, eps: float = T.L2_EPS) -> tuple:
    """Row-normalize; rows with norm <= eps stay as they are. Returns ``(rows, n_degenerate)``."""
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    tiny = (n <= eps)[:, 0]
    out = np.where(n <= eps, x, x / np.where(n <= eps, 1.0, n))
    return out, int(tiny.sum())


def collect_patch_tokens(images, model: ImAge, cfg: Optional[AggConfig] = None, sample_count: int = 64, seed: int = 0, batch_size: int = 32) -> np.ndarray:
    """Patch tokens entering the first insertion block, pooled over a seeded sample.

    ``images`` is an array ``(n, C, H, W)`` or an object with ``len()`` and
    ``load(indices)`` (see :class:`implicit_agg.training.ImageStore`).
    """
    cfg = cfg or model.cfg
    n = len(images)
    if n == 0:
        raise DataError("no images to sample patch tokens from")
    vit = model.vit
    sched = cfg.insertion_blocks(vit.cfg.num_blocks, vit.cfg.frozen_prefix)
    block = sched[0][0] if sched else vit.cfg.frozen_prefix
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(n, size=min(sample_count, n), replace=False))
    rows = []
    for s in range(0, len(picks), batch_size):
        ids = picks[s : s + batch_size]
        batch = images.load(ids) if hasattr(images, "load") else np.asarray(images)[ids]
        with T.inference_mode():
            seq = forward_to_block(batch, vit, block)
        rows.append(seq.patch_segment().data.reshape(-1, vit.cfg.embed_dim))
    return np.concatenate(rows, axis=0)


def init_agg_tokens(model: ImAge, cfg: Optional[AggConfig] = None, images=None, seed: int = 0, sample_count: int = 64, max_iter: int = 100, tol: float = 1e-6) -> AggTokens:
    cfg = cfg or model.cfg
    M, D = cfg.num_tokens, model.vit.cfg.embed_dim
    method = cfg.init_method
    if method == "zero":
        values = np.zeros((M, D))
    elif method == "normal":
        values = np.random.default_rng(seed).normal(0.0, NORMAL_STD, size=(M, D))
    else:
        if images is None:
            raise DataError(f"init method {method!r} needs training images")
        pts = collect_patch_tokens(images, model, cfg, sample_count=sample_count, seed=seed)
        values = kmeans(pts, M, max_iter=max_iter, tol=tol, seed=seed).centers
        if method == "centers_l2n":
            values, bad = l2_normalize_rows(values)
            if bad:
                log.warning("%d k-means center(s) have zero norm; left as zero rows", bad)
    return AggTokens.from_array(values, with_pos=cfg.agg_pos_embed)
