"""End-to-end runs and ablation sweeps built from a :class:`RunConfig`."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .aggregation import AggConfig, ImAge
from .config import RunConfig
from .retrieval import EvalReport, ImageStore, PlaceManifest
from .token_init import init_agg_tokens
from .training import TrainingLog, evaluate, train

log = logging.getLogger(__name__)

STRATEGY_SWEEP = (("a", "A_frozen"), ("ahat", "A_hat_all_trainable"), ("b", "B_junction"), ("c", "C_deep"), ("d", "D_progressive"))
INIT_SWEEP = ("zero", "normal", "centers", "centers_l2n")
TOKEN_SWEEP = ("cls", "1", "4", "8", "16", "32", "64")
ABLATION_FIELDS = ("variant", "R@1", "R@5", "R@10", "train_time")


def build_model(cfg: RunConfig, train_store: Optional[ImageStore] = None) -> ImAge:
    """Fresh backbone from ``model_seed`` with agg tokens initialized per config."""
    model = ImAge.build(cfg.backbone, cfg.agg)
    if cfg.agg.num_tokens:
        agg = init_agg_tokens(
            model, cfg.agg, train_store,
            seed=cfg.init.init_seed,
            sample_count=cfg.init.sample_count,
            max_iter=cfg.init.kmeans_max_iter,
            tol=cfg.init.kmeans_tol,
        )
        model.set_agg(agg.values.data)
    return model


@dataclass
class RunResult:
    before: EvalReport
    after: EvalReport
    log: TrainingLog
    model: ImAge
    train_time: float


def run(cfg: RunConfig, train_manifest: PlaceManifest, eval_manifest: PlaceManifest, val_manifest: Optional[PlaceManifest] = None, out_dir=None, ns=(1, 5, 10, 20), stores: Optional[dict] = None) -> RunResult:
    """Build, evaluate untrained, train, evaluate trained."""
    stores = stores if stores is not None else {}
    train_store = stores.setdefault("train", ImageStore(train_manifest))
    eval_store = stores.setdefault("eval", ImageStore(eval_manifest))
    val_store = None
    if val_manifest is not None:
        val_store = stores.setdefault("val", ImageStore(val_manifest))
    model = build_model(cfg, train_store)
    before = evaluate(model, eval_manifest, eval_store, ns)
    t0 = time.perf_counter()
    tlog = train(
        model, train_manifest, cfg.train, val_manifest,
        out_dir=out_dir, store=train_store, val_store=val_store,
    )
    train_time = time.perf_counter() - t0
    after = evaluate(model, eval_manifest, eval_store, ns)
    return RunResult(before, after, tlog, model, train_time)


def ablation_configs(cfg: RunConfig, sweep: str) -> list:
    """``[(variant_label, RunConfig), ...]`` for one sweep family."""
    agg = cfg.agg
    out = []
    if sweep == "strategy":
        for label, name in STRATEGY_SWEEP:
            out.append((label, dataclasses.replace(cfg, agg=dataclasses.replace(agg, strategy=name))))
    elif sweep == "init":
        for name in INIT_SWEEP:
            out.append((name, dataclasses.replace(cfg, agg=dataclasses.replace(agg, init_method=name))))
    elif sweep == "tokens":
        for label in TOKEN_SWEEP:
            if label == "cls":
                a = AggConfig(num_tokens=0, strategy=agg.strategy, init_method=agg.init_method, readout="cls", keep_class=True)
            else:
                a = dataclasses.replace(agg, num_tokens=int(label), readout="agg")
            out.append((label, dataclasses.replace(cfg, agg=a)))
    else:
        raise ValueError(f"unknown sweep {sweep!r}; expected strategy, init or tokens")
    return out


def ablate(cfg: RunConfig, sweep: str, train_manifest: PlaceManifest, eval_manifest: PlaceManifest, val_manifest: Optional[PlaceManifest] = None, csv_path=None) -> list:
    """Train and evaluate each variant with shared seeds; one row per variant."""
    stores: dict = {}
    rows = []
    for label, vcfg in ablation_configs(cfg, sweep):
        res = run(vcfg, train_manifest, eval_manifest, val_manifest, ns=(1, 5, 10), stores=stores)
        r = res.after.recall_at
        rows.append({
            "variant": label,
            "R@1": r[1], "R@5": r[5], "R@10": r[10],
            "train_time": res.train_time,
        })
        log.info("ablation %s/%s: R@1 %.3f", sweep, label, r[1])
    if csv_path is not None:
        write_ablation_csv(csv_path, rows)
    return rows


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for row in rows:
            w.writerow([
                row["variant"],
                f"{row['R@1']:.4f}", f"{row['R@5']:.4f}", f"{row['R@10']:.4f}",
                f"{row['train_time']:.2f}",
            ])


def directional_claims(sweep: str, rows: list) -> list:
    """Expected-direction comparisons as ``(claim, holds)``; informational only."""
    r1 = {row["variant"]: row["R@1"] for row in rows}
    if sweep == "strategy":
        return [("b >= a", r1["b"] >= r1["a"]), ("b >= c", r1["b"] >= r1["c"]), ("b >= d", r1["b"] >= r1["d"])]
    if sweep == "init":
        return [("centers_l2n >= zero", r1["centers_l2n"] >= r1["zero"]), ("centers_l2n >= centers", r1["centers_l2n"] >= r1["centers"])]
    return [("1 >= cls", r1["1"] >= r1["cls"]), ("8 >= 1", r1["8"] >= r1["1"])]
