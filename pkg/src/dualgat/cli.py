"""Command-line entry point: ``dualgat <command> [options]``.

Diagnostics go to stderr.  Artifacts are written atomically and each one
gets a ``<artifact>.provenance.json`` sidecar with the resolved config.
"""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, fileio
from .config import ENV_CONFIG, ConfigError, PipelineConfig, parse_config, validate
from .data import (
    LabelVolume,
    TumorSpec,
    embed_patches,
    extract_patches,
    generate_phantom,
    load_labels,
    load_volume,
    center_crop,
    save_labels,
    save_volume,
    znorm,
)
from .efficiency import HeadEnergyReport, HeadMask, derive_student, prune_heads
from .gat import init_model, load_model, model_forward, save_model
from .graphbuild import GraphConfig, build_graph, dump_edges
from .seghead import PatchLayout, evaluate_regions, node_seg_loss_and_grad, predict_labels
from .trainer import (
    benchmark,
    benchmark_graph,
    distill_student,
    make_suite,
    run_pruning_pass,
    train_teacher,
)

log = logging.getLogger("dualgat")


class CommandError(RuntimeError):
    pass


def _load_config(args) -> PipelineConfig:
    path = args.config or os.environ.get(ENV_CONFIG)
    if not path:
        return PipelineConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CommandError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _provenance(path, args, cfg: PipelineConfig, **extra) -> None:
    skip = {"func", "config", "threads"}
    record = {
        "command": args.command,
        "version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
        "config": cfg.to_dict(),
        **extra,
    }
    fileio.write_json(f"{path}.provenance.json", record)


def _need(path, what: str):
    if not Path(path).exists():
        raise CommandError(f"{what} not found: {path}")
    return path


def _suite(cfg: PipelineConfig):
    d = cfg.data
    return make_suite(d.seed, d.n_train, d.n_val, d.side, cfg.tumor_spec(), d.patch_side)


def _new_model(cfg: PipelineConfig, in_dim: int, seed: int | None = None):
    m = cfg.model
    return init_model(m.seed if seed is None else seed, in_dim, m.embed_dim, m.hidden_dim, m.layers, m.heads,
                      leaky_slope=m.leaky_slope)


# --- commands ------------------------------------------------------------------------

def cmd_phantom(args, cfg):
    radii = tuple(float(r) for r in args.radii.split(",")) if args.radii else tuple(cfg.data.radii)
    if len(radii) != 3:
        raise CommandError("--radii needs three comma-separated values")
    noise = cfg.data.noise if args.noise is None else args.noise
    seed = cfg.data.seed if args.seed is None else args.seed
    side = cfg.data.side if args.side is None else args.side
    tumor = TumorSpec(radii, tuple(cfg.data.center_range), tuple(cfg.data.anisotropy), noise)
    vol, lab = generate_phantom(seed, side, tumor, cfg.data.patch_side)
    save_volume(args.out_volume, vol)
    save_labels(args.out_labels, lab)
    _provenance(args.out_volume, args, cfg, seed=seed)
    counts = np.bincount(lab.labels.ravel(), minlength=4)
    log.info("phantom seed=%d side=%d class voxels=%s", seed, side, counts.tolist())


def _volume_patches(path, cfg: PipelineConfig, crop: bool):
    vol = load_volume(_need(path, "volume"))
    if crop:
        vol = center_crop(vol, cfg.data.patch_side)
    return vol, extract_patches(znorm(vol), cfg.data.patch_side)


def cmd_graph(args, cfg):
    gcfg = GraphConfig(args.k_spatial or cfg.graph.k_spatial, args.k_semantic or cfg.graph.k_semantic)
    _, ps = _volume_patches(args.volume, cfg, args.crop)
    model = load_model(_need(args.model, "model")) if args.model else _new_model(cfg, ps.patches.shape[1])
    graph = build_graph(ps.centers, embed_patches(ps, model.embedder), gcfg)
    fileio.atomic_write(args.dump_edges, dump_edges(graph).encode())
    _provenance(args.dump_edges, args, cfg, seed=model.seed)
    log.info("graph: %d nodes, %d spatial + %d semantic edges", graph.node_count,
             graph.edge_count("s"), graph.edge_count("m"))


def _train_one(cfg, suite, seed, out, log_path, args):
    model = _new_model(cfg, suite.train[0].patches.patches.shape[1], seed)
    tcfg = cfg.train_config()
    every = cfg.train.checkpoint_every

    def checkpoint(epoch, m):
        if every and (epoch + 1) % every == 0:
            save_model(f"{out}.epoch{epoch + 1}", m)

    model, tlog = train_teacher(suite, model, tcfg, cfg.graph_config(), cfg.seg_loss_config(), on_epoch=checkpoint)
    save_model(out, model, extra={"role": "teacher"})
    if log_path:
        fileio.atomic_write(log_path, tlog.to_jsonl().encode())
    _provenance(out, args, cfg, seed=seed)
    final = tlog.epochs[-1]["val_mean_dsc"] if tlog.epochs else float("nan")
    log.info("teacher seed=%d: L_seg %.4f -> %.4f, held-out mean DSC %.4f", seed,
             tlog.steps[0]["l_seg"], tlog.steps[-1]["l_seg"], final)
    return final


def cmd_train_teacher(args, cfg):
    suite = _suite(cfg)
    if not args.seeds:
        _train_one(cfg, suite, cfg.model.seed, args.out, args.log, args)
        return
    seeds = [int(s) for s in args.seeds.split(",")]
    scores = {}
    for seed in seeds:
        out = f"{args.out}.seed{seed}"
        logp = f"{args.log}.seed{seed}" if args.log else None
        scores[seed] = _train_one(cfg, suite, seed, out, logp, args)
    vals = np.array(list(scores.values()))
    summary = {"seeds": seeds, "val_mean_dsc": {str(k): v for k, v in scores.items()},
               "mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    fileio.write_json(f"{args.out}.seeds.json", summary)


def cmd_prune(args, cfg):
    percent = cfg.prune.percent if args.percent is None else args.percent
    if args.energies:
        report = HeadEnergyReport.from_json(fileio.read_json(_need(args.energies, "energies file")))
        mask = prune_heads(report, percent)
    elif args.teacher:
        teacher = load_model(_need(args.teacher, "teacher"))
        report, mask = run_pruning_pass(teacher, _suite(cfg).train, percent, cfg.graph_config())
        if args.out_energies:
            fileio.write_json(args.out_energies, report.to_json())
    else:
        raise CommandError("prune needs --energies or --teacher")
    fileio.write_json(args.out, mask.to_json(report))
    _provenance(args.out, args, cfg, percent=percent)
    log.info("prune p=%s: retained heads per layer %s", percent, mask.retained_counts)


def cmd_distill(args, cfg):
    teacher = load_model(_need(args.teacher, "teacher"))
    mask = HeadMask.from_json(fileio.read_json(_need(args.mask, "mask")))
    d = cfg.distill
    if args.tau is not None:
        d.temperature = args.tau
    if args.kd_weight is not None:
        d.kd_weight = args.kd_weight
    validate(cfg)
    student, slog = distill_student(teacher, mask, _suite(cfg), cfg.distill_train_config(), cfg.distill_config(),
                                    cfg.graph_config(), cfg.seg_loss_config())
    save_model(args.out, student, extra={"role": "student"})
    if args.log:
        fileio.atomic_write(args.log, slog.to_jsonl().encode())
    _provenance(args.out, args, cfg, seed=cfg.train.seed)
    final = slog.epochs[-1]["val_mean_dsc"] if slog.epochs else float("nan")
    log.info("student heads %s: held-out mean DSC %.4f", student.head_counts, final)


def cmd_eval(args, cfg):
    lab = load_labels(_need(args.labels, "labels"))
    losses = {}
    if args.pred:
        pred = load_labels(_need(args.pred, "prediction")).labels
    elif args.model:
        if not args.volume:
            raise CommandError("eval --model needs --volume")
        vol, ps = _volume_patches(args.volume, cfg, crop=False)
        model = load_model(_need(args.model, "model"))
        feats = embed_patches(ps, model.embedder)
        graph = build_graph(ps.centers, feats, cfg.graph_config())
        logits = model_forward(ps, graph, model)
        layout = PatchLayout.of(ps)
        seg, parts, _ = node_seg_loss_and_grad(logits, lab.labels, layout, cfg.seg_loss_config())
        losses = {"dice": parts["dice"], "ce": parts["ce"], "seg": seg, "kd": 0.0, "total": seg}
        pred = predict_labels(logits, layout)
        if args.out_pred:
            save_labels(args.out_pred, LabelVolume(pred, lab.spacing))
    else:
        raise CommandError("eval needs --pred or --model")
    if pred.shape != lab.labels.shape:
        raise CommandError(f"prediction shape {pred.shape} differs from labels {lab.labels.shape}")
    report = evaluate_regions(pred, lab.labels, lab.spacing)
    report.losses = losses
    fileio.write_json(args.report, report.to_json())
    _provenance(args.report, args, cfg)
    log.info("eval: DSC %s", {k: round(v, 4) for k, v in report.dsc.items()})


def cmd_bench(args, cfg):
    b = cfg.bench
    nodes = args.nodes or b.nodes
    repeats = args.repeats or b.repeats
    teacher = load_model(_need(args.teacher, "teacher"))
    models = {"teacher": teacher}
    if args.student:
        models["student"] = load_model(_need(args.student, "student"))
    elif args.mask:
        models["student"] = derive_student(teacher, HeadMask.from_json(fileio.read_json(_need(args.mask, "mask"))))
    graph, feats = benchmark_graph(nodes, teacher.embedder.dim, b.seed, cfg.graph_config(), cfg.data.patch_side)
    costs, timings = {}, {}
    for name, model in models.items():
        res = benchmark(model, graph, repeats, feats, threads=b.threads)
        timings[name] = {"median_seconds": res.pop("median_seconds"), "repeats": repeats, "threads": b.threads}
        costs[name] = res
    if "student" in costs:
        costs["gat_mac_ratio"] = costs["student"]["macs"]["gat_total"] / costs["teacher"]["macs"]["gat_total"]
        timings["latency_ratio"] = timings["student"]["median_seconds"] / timings["teacher"]["median_seconds"]
    fileio.write_json(args.out, costs)
    _provenance(args.out, args, cfg)
    if args.timings:
        # wall-clock numbers are not reproducible, so they live in their own file
        fileio.write_json(args.timings, timings)
    for name, t in timings.items():
        log.info("bench %s: %s", name, t)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualgat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"dualgat {__version__} (python {platform.python_version()}, numpy {np.__version__})")
    p.add_argument("--config", help=f"JSON config file (default: ${ENV_CONFIG})")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="cap on BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic phantom")
    s.add_argument("--seed", type=int)
    s.add_argument("--side", type=int)
    s.add_argument("--radii", help="edema,core,enhancing radii in voxels")
    s.add_argument("--noise", type=float)
    s.add_argument("--out-volume", required=True)
    s.add_argument("--out-labels", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("graph", help="build and dump the dual-edge graph of a volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--model", help="weights whose embedder produces node features (default: fresh init)")
    s.add_argument("--k-spatial", type=int)
    s.add_argument("--k-semantic", type=int)
    s.add_argument("--crop", action="store_true", help="center-crop to a multiple of the patch side")
    s.add_argument("--dump-edges", required=True)
    s.set_defaults(func=cmd_graph)

    s = sub.add_parser("train-teacher", help="train the unpruned teacher on the phantom suite")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seeds", help="comma-separated model seeds; reports mean/std of held-out DSC")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("prune", help="compute a head mask from activation energies")
    s.add_argument("--energies")
    s.add_argument("--teacher")
    s.add_argument("--percent", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--out-energies")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("distill", help="derive and distill the pruned student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--lambda", dest="kd_weight", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", help="score a prediction or a model against labels")
    s.add_argument("--model")
    s.add_argument("--pred")
    s.add_argument("--volume")
    s.add_argument("--labels", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--out-pred")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="parameter/MAC counts and latency of teacher vs student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student")
    s.add_argument("--mask")
    s.add_argument("--nodes", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--timings")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        log.debug("resolved config:\n%s", cfg.to_json())
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args, cfg)
    except (CommandError, ConfigError, fileio.FormatError, ValueError, OSError) as exc:
        print(f"dualgat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
