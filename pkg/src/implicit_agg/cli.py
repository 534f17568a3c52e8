"""Command-line entry point: ``implicit-agg <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .aggregation import dump_attention_maps, extract_descriptors
from .archive import load_descriptors, load_tensors, save_descriptors, save_tensors
from .config import RunConfig
from .errors import ContractError, DataError, ParseError, SchemaError
from .experiment import ablate, build_model, directional_claims
from .pnm import read_pnm
from .retrieval import ImageStore, load_manifest, recall_at_n, to_chw
from .synth import SynthSpec, generate
from .token_init import init_agg_tokens
from .training import train

log = logging.getLogger("implicit_agg")


def _pairs(items) -> list:
    out = []
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ParseError(f"--set expects key=value, got {item!r}")
        out.append((key.strip(), val))
    return out


def _run_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = _pairs(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        s = str(args.seed)
        over = [("model_seed", s), ("init_seed", s), ("seed", s)] + over
    return cfg.with_overrides(over) if over else cfg


def _model(cfg: RunConfig, checkpoint=None, train_manifest=None):
    if checkpoint:
        model = build_model_plain(cfg)
        model.load_state_dict(load_tensors(checkpoint), strict=True)
        return model
    store = ImageStore(load_manifest(train_manifest)) if train_manifest else None
    return build_model(cfg, store)


def build_model_plain(cfg: RunConfig):
    from .aggregation import ImAge

    return ImAge.build(cfg.backbone, cfg.agg)


def cmd_synth(args) -> int:
    spec = config_mod.load_dataclass(SynthSpec, args.spec, _pairs(args.set))
    if args.seed is not None:
        spec.seed = args.seed
    man = generate(spec, args.out)
    Path(args.out, "synth.cfg").write_text(config_mod.dump_dataclass(spec), encoding="utf-8")
    print(f"wrote {len(man)} eval records ({len(man.queries)} queries) to {args.out}")
    return 0


def cmd_init_tokens(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.manifest or cfg.paths.train_manifest)
    model = build_model_plain(cfg)
    if args.checkpoint:
        model.load_state_dict(load_tensors(args.checkpoint), strict=False)
    agg = init_agg_tokens(
        model, cfg.agg, ImageStore(manifest), seed=cfg.init.init_seed,
        sample_count=cfg.init.sample_count, max_iter=cfg.init.kmeans_max_iter,
        tol=cfg.init.kmeans_tol,
    )
    save_tensors(args.out, {"agg": agg.values.data})
    print(f"wrote agg tokens {agg.values.shape} to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.manifest or cfg.paths.train_manifest)
    val_path = args.val_manifest or cfg.paths.val_manifest
    val = load_manifest(val_path) if val_path else None
    out = Path(args.out or cfg.paths.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    store = ImageStore(manifest)
    model = build_model_plain(cfg)
    if args.tokens:
        model.set_agg(load_tensors(args.tokens)["agg"])
    else:
        model = build_model(cfg, store)
    cfg.save(out / "run.cfg")
    tlog = train(model, manifest, cfg.train, val, out_dir=out, store=store)
    last = tlog.rows[-1][3] if tlog.rows else float("nan")
    print(f"trained {len(tlog.rows)} steps, final loss {last:.4f}, best epoch {tlog.best_epoch}")
    return 0


def cmd_extract(args) -> int:
    cfg = _run_config(args)
    manifest = load_manifest(args.manifest or cfg.paths.eval_manifest)
    model = _model(cfg, args.checkpoint, args.train_manifest)
    desc = extract_descriptors(model, ImageStore(manifest).all(), args.batch_size, args.threads)
    save_descriptors(args.out, desc)
    print(f"wrote {desc.shape[0]} descriptors of dim {desc.shape[1]} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    desc = load_descriptors(args.descriptors)
    if desc.shape[0] != len(manifest):
        raise ContractError(f"{desc.shape[0]} descriptors for {len(manifest)} manifest records")
    report = recall_at_n(
        desc[manifest.role_indices("query")],
        desc[manifest.role_indices("database")],
        manifest,
        args.n,
        exclude_no_positive=not args.count_unmatched,
    )
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_json(), indent=1) + "\n", encoding="utf-8")
    print(report.table())
    return 0


def cmd_attn_map(args) -> int:
    cfg = _run_config(args)
    model = _model(cfg, args.checkpoint, args.train_manifest)
    image = to_chw(read_pnm(args.image))
    res = dump_attention_maps(image, model, args.out, per_head=args.per_head or None)
    print(f"wrote {len(res['maps'])} attention maps + merged map to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    train_m = load_manifest(args.train_manifest or cfg.paths.train_manifest)
    eval_m = load_manifest(args.eval_manifest or cfg.paths.eval_manifest)
    val_path = args.val_manifest or cfg.paths.val_manifest
    val_m = load_manifest(val_path) if val_path else None
    rows = ablate(cfg, args.sweep, train_m, eval_m, val_m, csv_path=args.out)
    for row in rows:
        print(f"{row['variant']:>12}  R@1 {row['R@1']:.3f}  R@5 {row['R@5']:.3f}  R@10 {row['R@10']:.3f}")
    for claim, ok in directional_claims(args.sweep, rows):
        print(f"  {claim}: {'yes' if ok else 'no'}")
    return 0


def _add_run_args(p, seed=True):
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    if seed:
        p.add_argument("--seed", type=int, help="sets model_seed, init_seed and seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="implicit-agg", description=__doc__)
    ap.add_argument("--version", action="version", version=f"implicit-agg {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--threads", type=int, default=1, help="worker cap for descriptor extraction")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec", help="key=value SynthSpec file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("init-tokens", help="k-means initialization of agg tokens")
    _add_run_args(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_tokens)

    p = sub.add_parser("train", help="metric-learning training")
    _add_run_args(p)
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--tokens", help="IMGT archive with initialized agg tokens")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write IMGD descriptors for a manifest")
    _add_run_args(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--train-manifest", help="initialize tokens from here when no checkpoint")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="Recall@N from IMGD descriptors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--n", type=int, nargs="+", default=[1, 5, 10, 20])
    p.add_argument("--count-unmatched", action="store_true", help="queries without a true match count as misses")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-map", help="dump last-block agg attention maps")
    _add_run_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--train-manifest")
    p.add_argument("--per-head", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_map)

    p = sub.add_parser("ablate", help="strategy / init / token-count sweeps")
    _add_run_args(p)
    p.add_argument("--sweep", required=True, choices=["strategy", "init", "tokens"])
    p.add_argument("--train-manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--eval-manifest")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ContractError, DataError, ParseError, SchemaError, KeyError, OSError) as exc:
        print(f"implicit-agg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
