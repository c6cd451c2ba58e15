"""Command-line entry point: ``spreid <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 runtime error, 4 a check failed.
Outputs are staged next to their destination and moved into place only after
the whole command succeeded, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import gradcheck
from .backbone import ConfigError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, substream_seed
from .experiments import parse_maps, predict_masks
from .head import SPReIDModel
from .parsing import CoarseGrouping, ParsingNet, parsing_metrics
from .retrieval import combine_descriptors, evaluate, k_reciprocal_rerank, pairwise_distance
from .synth import generate, load_dataset
from .tensor import bilinear_resize, load_tensor, save_tensor
from .trainer import History, train_parser, train_reid

log = logging.getLogger("spreid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4


class CheckFailed(RuntimeError):
    pass


# -- output staging ---------------------------------------------------------------

@contextlib.contextmanager
def staged(*targets):
    """Yield temporary paths for ``targets``; rename them into place on success."""
    tmpdir = Path(tempfile.mkdtemp(prefix=".spreid-", dir=Path(targets[0]).parent or "."))
    tmp = [tmpdir / f"{i}" for i in range(len(targets))]
    try:
        yield tmp
        for src, dst in zip(tmp, targets):
            if not src.exists():
                continue
            dst = Path(dst)
            if dst.is_dir():
                shutil.rmtree(dst)
            os.replace(src, dst)
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)


def _ensure_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- descriptor files -------------------------------------------------------------

def save_descriptors(path, desc, identities, cameras, variant, sidecar=None) -> None:
    """``path`` holds the N x D matrix; ``sidecar`` (default ``path + '.jsonl'``) one record per row."""
    path = Path(path)
    save_tensor(path, np.asarray(desc))
    with open(sidecar or f"{path}.jsonl", "w") as fh:
        for pid, cam in zip(identities, cameras):
            fh.write(json.dumps({"identity": int(pid), "camera": int(cam), "variant": variant},
                                sort_keys=True) + "\n")


def load_descriptors(path):
    desc = load_tensor(path).astype(np.float64)
    with open(f"{path}.jsonl") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if desc.ndim != 2 or len(rows) != desc.shape[0]:
        raise ValueError(f"{path}: descriptor matrix {desc.shape} does not match {len(rows)} sidecar rows")
    ids = np.array([r["identity"] for r in rows])
    cams = np.array([r["camera"] for r in rows])
    return desc, ids, cams, rows[0]["variant"] if rows else None


# -- subcommands ---------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig):
    d = cfg.data
    data = generate(substream_seed(cfg.run.seed, "dataset"), d.n_ids, d.imgs_per_id, d.n_cams,
                    size=(d.height, d.width), clutter=d.clutter, occlusion=d.occlusion,
                    jitter=d.jitter, noise=d.noise, train_fraction=d.train_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with staged(out) as (tmp,):
        data.save(tmp)
        (tmp / "config.ini").write_text(cfg.dumps())
    print(f"wrote {len(data.images)} images to {out / 'manifest.jsonl'}")


def build_parser_net(cfg: RunConfig) -> ParsingNet:
    p = cfg.parser
    return ParsingNet(cfg.parser_backbone_config(), aspp_channels=p.aspp_channels, merge=p.merge,
                      seed=substream_seed(cfg.run.seed, "init:parse"), input_scale=p.input_scale)


def cmd_train_parser(args, cfg: RunConfig):
    data = load_dataset(args.data)
    train, held = np.flatnonzero(data.splits == "train"), np.flatnonzero(data.splits != "train")
    net = build_parser_net(cfg)
    p, t = cfg.parser, cfg.train
    history = History()
    ckpt = train_parser(net, data.images[train], data.masks[train], iters=p.iters, base_lr=p.base_lr,
                        head_lr_scale=p.head_lr_scale, batch_size=p.batch_size, opt_cfg=cfg.optimizer(),
                        seed=cfg.run.seed, history=history, n_decays=t.n_decays,
                        decay_rate=t.decay_rate, label_stride=p.label_stride)
    acc, mean_acc, miou = parsing_metrics(predict_masks(net, data.images[held]), data.masks[held])
    report = {"overall_acc": acc, "mean_acc": mean_acc, "mean_iou": miou, "held_out_images": int(len(held))}
    out = _ensure_parent(args.out)
    with staged(out, f"{out}.metrics.json", f"{out}.loss.csv", f"{out}.config.ini") as (c, m, l, e):
        save_checkpoint(c, ckpt)
        _write_json(m, report)
        history.write_csv(l)
        e.write_text(cfg.dumps())
    print(json.dumps(report, sort_keys=True))


def _load_parser(path) -> ParsingNet:
    ckpt = load_checkpoint(path)
    net = ParsingNet.from_architecture(ckpt.architecture)
    ckpt.apply_to(net.named_params())
    return net


def cmd_train_reid(args, cfg: RunConfig):
    agg = cfg.aggregation()
    train = load_dataset(args.data, "train")
    maps = None
    if agg.uses_maps:
        if not args.parser:
            raise ConfigError(f"variant {agg.variant} needs --parser")
        maps = parse_maps(_load_parser(args.parser), train.images, cfg.grouping_config())
    ids = np.unique(train.identities)
    labels = np.searchsorted(ids, train.identities)
    model = SPReIDModel(cfg.backbone_config(), agg, len(ids), seed=substream_seed(cfg.run.seed, "init:reid"),
                        grouping=cfg.grouping_config().to_dict())
    history = History()
    ckpts = train_reid(model, train.images, labels, maps, cfg.schedule(), cfg.optimizer(),
                       seed=cfg.run.seed, history=history)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with staged(out) as (tmp,):
        tmp.mkdir()
        for ck in ckpts:
            save_checkpoint(tmp / f"phase{ck.provenance['phase']}.ckpt", ck)
        history.write_csv(tmp / "loss.csv")
        (tmp / "config.ini").write_text(cfg.dumps())
    print(f"wrote {len(ckpts)} checkpoint(s) to {out}")


def _reid_descriptors(model_path, data, parser, cfg):
    ckpt = load_checkpoint(model_path)
    model = SPReIDModel.from_architecture(ckpt.architecture)
    ckpt.apply_to(model.named_params())
    size = tuple(ckpt.provenance.get("input_size", data.images.shape[2:]))
    maps = None
    if model.agg.uses_maps:
        if parser is None:
            raise ConfigError(f"model variant {model.agg.variant} needs --parser")
        # the grouping the model was trained with wins over the current config
        grouping = cfg.grouping_config()
        if model.grouping is not None:
            grouping = CoarseGrouping({k: tuple(v) for k, v in model.grouping.items()})
        maps = parse_maps(parser, data.images, grouping)
    out = []
    for i in range(0, len(data.images), 50):
        xb = bilinear_resize(data.images[i:i + 50], *size)
        out.append(model.descriptors(xb, None if maps is None else maps[i:i + 50]))
    return np.concatenate(out), model.agg.variant


def cmd_extract(args, cfg: RunConfig):
    if len(args.model) > 2:
        raise ConfigError("extract combines at most two models")
    data = load_dataset(args.data, args.split)
    parser = _load_parser(args.parser) if args.parser else None
    results = [_reid_descriptors(m, data, parser, cfg) for m in args.model]
    if len(results) == 2:
        desc, variant = combine_descriptors(results[0][0], results[1][0]), "spreid_combined"
    else:
        desc, variant = results[0]
    out = _ensure_parent(args.out)
    with staged(out, f"{out}.jsonl") as (d, side):
        save_descriptors(d, desc, data.identities, data.cameras, variant, sidecar=side)
    print(f"wrote {desc.shape[0]} x {desc.shape[1]} descriptors ({variant}) to {out}")


def _write_report(args, report, extra=None):
    body = report.to_dict()
    body.update(extra or {})
    out = _ensure_parent(args.out)
    targets = [out] + ([_ensure_parent(args.cmc_csv)] if args.cmc_csv else [])
    with staged(*targets) as tmp:
        _write_json(tmp[0], body)
        if args.cmc_csv:
            with open(tmp[1], "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["rank", "cmc"])
                for k, v in enumerate(report.cmc, start=1):
                    w.writerow([k, repr(v)])
    print(json.dumps({"mAP": report.mAP, "rank1": report.cmc[0] if report.cmc else None}))


def cmd_evaluate(args, cfg: RunConfig):
    q, qi, qc, _ = load_descriptors(args.queries)
    g, gi, gc, _ = load_descriptors(args.gallery)
    metric = args.metric or cfg.retrieval.metric
    report = evaluate(pairwise_distance(q, g, metric), qi, gi, qc, gc)
    report.settings.update({"metric": metric, "rerank": False})
    _write_report(args, report)


def cmd_rerank(args, cfg: RunConfig):
    q, qi, qc, _ = load_descriptors(args.queries)
    g, gi, gc, _ = load_descriptors(args.gallery)
    r = cfg.rerank
    k1 = args.k1 if args.k1 is not None else r.k1
    k2 = args.k2 if args.k2 is not None else r.k2
    lam = args.lam if args.lam is not None else r.lam
    metric = args.metric or cfg.retrieval.metric
    dist = k_reciprocal_rerank(q, g, k1=k1, k2=k2, lam=lam, metric=metric)
    report = evaluate(dist, qi, gi, qc, gc)
    report.settings.update({"metric": metric, "rerank": True, "k1": k1, "k2": k2, "lambda": lam})
    _write_report(args, report)


def cmd_gradcheck(args, cfg: RunConfig):
    results = gradcheck.run_all(seed=args.seed, include_model=not args.layers_only)
    suites: dict[str, list] = {}
    for r in results:
        suites.setdefault(r.suite, []).append(r)
    print(f"{'suite':<24}{'configs':>8}{'max rel err':>14}  result")
    for name, rs in suites.items():
        worst = max(r.max_error for r in rs)
        ok = all(r.passed for r in rs)
        print(f"{name:<24}{len(rs):>8}{worst:>14.3e}  {'PASS' if ok else 'FAIL'}")
    if not all(r.passed for r in results):
        raise CheckFailed("finite-difference check failed")


# -- argument parsing ------------------------------------------------------------------

def build_arg_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="spreid", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-parser", parents=[common], help="train the parsing network")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_parser)

    p = sub.add_parser("train-reid", parents=[common], help="two-phase re-id training")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--parser", help="parser checkpoint (semantic variants)")
    p.add_argument("--out", required=True, help="output directory for per-phase checkpoints")
    p.set_defaults(func=cmd_train_reid)

    p = sub.add_parser("extract", parents=[common], help="write descriptors for a split")
    p.add_argument("--data", required=True, help="manifest.jsonl")
    p.add_argument("--split", required=True, choices=("train", "query", "gallery"))
    p.add_argument("--model", required=True, action="append",
                   help="re-id checkpoint; give two to combine them")
    p.add_argument("--parser", help="parser checkpoint (semantic variants)")
    p.add_argument("--out", required=True, help=".desc output path")
    p.set_defaults(func=cmd_extract)

    for name, func, helptext in (("evaluate", cmd_evaluate, "single-query CMC/mAP"),
                                 ("rerank", cmd_rerank, "k-reciprocal re-ranking then CMC/mAP")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--queries", required=True)
        p.add_argument("--gallery", required=True)
        p.add_argument("--metric", choices=("cosine", "euclidean"))
        p.add_argument("--out", required=True, help="report JSON path")
        p.add_argument("--cmc-csv", help="optional CMC curve CSV")
        if name == "rerank":
            p.add_argument("--k1", type=int)
            p.add_argument("--k2", type=int)
            p.add_argument("--lambda", dest="lam", type=float)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers-only", action="store_true", help="skip the whole-model suite")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
