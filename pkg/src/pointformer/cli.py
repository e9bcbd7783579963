"""Command-line entry point.

Verbs: ``forward`` (run a configured backbone over a cloud file and write
per-stage clouds plus a manifest), ``attn-dump`` (top-k attention rows as
JSON), ``grad-check`` (the finite-difference suite), ``bench`` (full vs
low-rank attention timing/memory), and ``overfit`` (the gradient-descent
demonstration on the bundled scene). Global flags: ``--seed``,
``--threads``, ``--precision {32,64}``; log level via ``PF_LOG``.

All commands are deterministic given identical flags, files and seed in a
single-threaded run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("pointformer")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("PF_LOG", "error").lower(), logging.ERROR
    )
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _limit_threads(n) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(n))
    except ImportError:
        log.info("threadpoolctl unavailable; thread limit set via env only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointformer", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread cap (1 = deterministic mode)")
    parser.add_argument("--precision", type=int, choices=(32, 64), default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forward", help="run a backbone forward pass over a cloud file")
    p.add_argument("--config", required=True, help="config JSON path or preset name")
    p.add_argument("--input", required=True, help="cloud file (binary PFPC or CSV)")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--retain-attn", action="store_true", help="keep attention records (reported in manifest)")

    p = sub.add_parser("attn-dump", help="dump top-k attention weights for one query point")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--module", choices=("gt", "lgt"), default="gt")
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", required=True, help="head index or 'mean'")
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--topk", type=int, default=50)
    p.add_argument("--output", default=None, help="write JSON here instead of stdout")

    p = sub.add_parser("grad-check", help="finite-difference verification suite")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--scope", choices=("op", "block", "backbone", "all"), default="all")

    p = sub.add_parser("bench", help="attention kernel latency and memory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--mode", choices=("full", "linformer", "both"), default="both")

    p = sub.add_parser("overfit", help="gradient-descent demonstration on the bundled scene")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", default="auto", help="'auto' or a fixed float")
    return parser


def cmd_forward(args) -> int:
    from .backbone import build, load_config
    from .io import dump_json, payload_checksum, read_cloud, write_cloud
    from .points import PointCloud
    from .tensor import Tensor, no_grad

    cfg = load_config(args.config)
    if args.precision:
        cfg.precision = args.precision
    if args.seed is not None:
        cfg.seed = args.seed
    coords, feats, _ = read_cloud(args.input)
    cloud = PointCloud(Tensor(coords.astype(cfg.dtype)), Tensor(feats.astype(cfg.dtype)))

    model, _ = build(cfg)
    log.info("running forward over %d points", cloud.n_points)
    with no_grad():
        result = model.forward(cloud, retain_records=args.retain_attn)

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = []
    for s in result.stages:
        fname = f"stage_{s.name}.pfpc"
        c = s.coords.data.astype(cfg.dtype)
        f = s.feats.data.astype(cfg.dtype)
        write_cloud(out_dir / fname, c, f, precision=cfg.precision)
        stages.append(
            {
                "name": s.name,
                "n_points": s.n_points,
                "channels": int(f.shape[1]),
                "file": fname,
                "checksum": payload_checksum(c, f, precision=cfg.precision),
            }
        )
    manifest = {
        "input": str(args.input),
        "config": cfg.to_dict(),
        "retained_attention": bool(args.retain_attn),
        "stages": stages,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        dump_json(manifest, fh)
    print(f"wrote {len(stages)} stages to {out_dir}")
    return 0


def _record_for_dump(result, cloud, args, cfg):
    blocks_records = result.records
    if not 0 <= args.block < len(blocks_records):
        raise ValueError(f"--block out of range; valid: 0..{len(blocks_records) - 1}")
    records = blocks_records[args.block][args.module]
    if not records:
        raise ValueError(f"block {args.block} has no {args.module} records (module disabled?)")
    if not 0 <= args.layer < len(records):
        raise ValueError(f"--layer out of range; valid: 0..{len(records) - 1}")
    record = records[args.layer]

    query_coords = result.stage(f"down{args.block}").coords.data
    if args.module == "gt":
        key_coords = query_coords
    else:  # lgt keys are the block's input set
        if args.block == 0:
            key_coords = cloud.coords.data
        else:
            key_coords = result.stage(f"down{args.block - 1}").coords.data
    return record, query_coords, key_coords


def cmd_attn_dump(args) -> int:
    import numpy as np

    from .backbone import build, load_config
    from .io import dump_json, read_cloud
    from .points import PointCloud
    from .tensor import Tensor, no_grad

    cfg = load_config(args.config)
    if args.precision:
        cfg.precision = args.precision
    if args.seed is not None:
        cfg.seed = args.seed
    coords, feats, _ = read_cloud(args.input)
    cloud = PointCloud(Tensor(coords.astype(cfg.dtype)), Tensor(feats.astype(cfg.dtype)))
    model, _ = build(cfg)
    with no_grad():
        result = model.forward(cloud, retain_records=True)

    record, query_coords, key_coords = _record_for_dump(result, cloud, args, cfg)
    weights = record.weights.data  # [M, n_q, n_k]
    heads, n_q, n_k = weights.shape
    if args.head == "mean":
        head_label = "mean"
        w_all = weights.mean(axis=0)
    else:
        try:
            h = int(args.head)
        except ValueError:
            raise ValueError(f"--head must be an index or 'mean', got {args.head!r}") from None
        if not 0 <= h < heads:
            raise ValueError(f"--head out of range; valid: 0..{heads - 1} or 'mean'")
        head_label = h
        w_all = weights[h]
    if not 0 <= args.query < n_q:
        raise ValueError(f"--query out of range; valid: 0..{n_q - 1}")
    row = w_all[args.query]
    order = np.argsort(-row, kind="stable")[: min(args.topk, n_k)]
    dump = {
        "block": args.block,
        "module": args.module,
        "layer": args.layer,
        "head": head_label,
        "query": {"index": args.query, "coords": query_coords[args.query]},
        "weight_sum": float(row.sum()),
        "entries": [
            {"index": int(i), "coords": key_coords[i], "weight": float(row[i])}
            for i in order
        ],
    }
    text = dump_json(dump)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(scope=args.scope, tolerance=args.tolerance, eps=args.eps)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.max_rel_error:.3e} (tolerance {r.tolerance:g})")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"FAILED components: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args) -> int:
    from .bench import attention_bench
    from .io import dump_json

    seed = args.seed if args.seed is not None else 0
    out = attention_bench(
        n=args.n, r=args.r, heads=args.heads, dim=args.dim,
        repeat=args.repeat, mode=args.mode, seed=seed,
    )
    for report in out["reports"]:
        print(dump_json(report.to_dict(), indent=None))
    if out["max_abs_diff"] is not None:
        print(dump_json({"max_abs_diff": out["max_abs_diff"]}, indent=None))
    return 0


def cmd_overfit(args) -> int:
    from .backbone import OverfitDivergence, build, overfit, overfit_config
    from .io import round9

    seed = args.seed if args.seed is not None else 0
    precision = args.precision if args.precision else 64
    cfg = overfit_config(seed=seed, precision=precision)
    model, store = build(cfg)
    lr = args.lr if args.lr == "auto" else float(args.lr)
    try:
        losses = overfit(model, store, steps=args.steps, lr=lr)
    except OverfitDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 1
    for i, loss in enumerate(losses):
        print(f"step {i} loss {round9(loss):.9g}")
    initial, final = losses[0], losses[-1]
    reduction = initial / final if final > 0 else float("inf")
    print(f"initial {round9(initial):.9g} final {round9(final):.9g} reduction {round9(reduction):.9g}x")
    if final <= initial / 100.0:
        return 0
    print("insufficient loss reduction (need 100x)", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    handlers = {
        "forward": cmd_forward,
        "attn-dump": cmd_attn_dump,
        "grad-check": cmd_grad_check,
        "bench": cmd_bench,
        "overfit": cmd_overfit,
    }
    try:
        return handlers[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
