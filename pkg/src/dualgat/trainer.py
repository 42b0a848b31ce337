"""Teacher training, pruning pass, distillation and benchmarking on phantom suites."""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .data import PatchSet, TumorSpec, embed_patches, extract_patches, generate_phantom, znorm
from .efficiency import (
    DistillConfig,
    HeadEnergyReport,
    HeadMask,
    derive_student,
    head_outputs_from_tape,
    kd_loss_and_grad,
    mac_counts,
    prune_heads,
)
from .gat import GatModel, GradientTape, model_backward, model_forward
from .graphbuild import DualEdgeGraph, GraphConfig, build_graph
from .seghead import PatchLayout, SegLossConfig, SegReport, evaluate_regions, node_seg_loss_and_grad, predict_labels


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class Sample:
    patches: PatchSet
    labels: np.ndarray  # (D, H, W) exclusive class labels
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int | None = None

    @property
    def layout(self) -> PatchLayout:
        return PatchLayout.of(self.patches)


@dataclass
class PhantomSuite:
    train: list[Sample]
    val: list[Sample]


def make_sample(volume, labels, patch_side: int = 8, seed=None) -> Sample:
    normed = znorm(volume)
    return Sample(extract_patches(normed, patch_side), np.asarray(labels.labels), tuple(volume.spacing), seed)


def make_suite(seed: int, n_train: int = 8, n_val: int = 2, side: int = 64, tumor: TumorSpec | None = None,
               patch_side: int = 8) -> PhantomSuite:
    """Phantom ``k`` of the suite uses seed ``seed * 1000 + k``; train first, then held-out."""
    samples = []
    for k in range(n_train + n_val):
        s = seed * 1000 + k
        vol, lab = generate_phantom(s, side, tumor, patch_side)
        samples.append(make_sample(vol, lab, patch_side, s))
    return PhantomSuite(samples[:n_train], samples[n_train:])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 20
    seed: int = 0
    cosine: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


def _decays(name: str) -> bool:
    return name.endswith(("W_s", "W_m", "a_s", "a_m", "projection", "classifier.weight"))


class AdamW:
    """Adam with decoupled weight decay, updating the model's arrays in place."""

    def __init__(self, model: GatModel, cfg: TrainConfig, total_steps: int = 1):
        self.model = model
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.t = 0
        params = model.named_parameters()
        self.m = {n: np.zeros_like(p) for n, p in params}
        self.v = {n: np.zeros_like(p) for n, p in params}

    def lr(self) -> float:
        lr = self.cfg.learning_rate
        if self.cfg.cosine:
            lr *= 0.5 * (1.0 + math.cos(math.pi * min(self.t, self.total_steps) / self.total_steps))
        return lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        lr = self.lr()
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.model.named_parameters():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay and _decays(name):
                p -= lr * cfg.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        self.model.bump()


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    snapshots: dict[int, GatModel] = field(default_factory=dict, repr=False)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"record": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"record": "epoch", **r}, sort_keys=True) for r in self.epochs]
        return "\n".join(lines) + "\n"


def sample_graph(model: GatModel, sample: Sample, graph_cfg: GraphConfig) -> DualEdgeGraph:
    """The dual-edge graph a model sees for one volume (semantic edges from its own embeddings)."""
    feats = embed_patches(sample.patches, model.embedder)
    return build_graph(sample.patches.centers, feats, graph_cfg)


def step_loss(model: GatModel, sample: Sample, graph: DualEdgeGraph, seg_cfg: SegLossConfig,
              teacher_logits: np.ndarray | None = None, distill: DistillConfig | None = None,
              want_grads: bool = True, mask: HeadMask | None = None):
    """Forward (and backward) for one volume.  Returns (record, grads)."""
    tape = GradientTape() if want_grads else None
    logits = model_forward(sample.patches, graph, model, tape=tape, mask=mask)
    seg, parts, d_logits = node_seg_loss_and_grad(logits, sample.labels, sample.layout, seg_cfg)
    kd = 0.0
    total = seg
    if teacher_logits is not None:
        kd, d_kd = kd_loss_and_grad(teacher_logits, logits, distill.temperature)
        total = seg + distill.kd_weight * kd
        if distill.kd_weight:
            d_logits = d_logits + distill.kd_weight * d_kd
    record = {"l_seg": seg, "l_dice": parts["dice"], "l_ce": parts["ce"], "l_kd": kd, "l_total": total}
    grads = model_backward(tape, d_logits) if want_grads else None
    return record, grads


def _grad_norm(grads: dict, model: GatModel) -> float:
    return float(math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n, _ in model.named_parameters())))


def evaluate_model(model: GatModel, samples: list[Sample], graph_cfg: GraphConfig,
                   seg_cfg: SegLossConfig = SegLossConfig()) -> list[SegReport]:
    reports = []
    for sample in samples:
        graph = sample_graph(model, sample, graph_cfg)
        logits = model_forward(sample.patches, graph, model)
        seg, parts, _ = node_seg_loss_and_grad(logits, sample.labels, sample.layout, seg_cfg)
        rep = evaluate_regions(predict_labels(logits, sample.layout), sample.labels, sample.spacing)
        rep.losses = {"dice": parts["dice"], "ce": parts["ce"], "seg": seg}
        reports.append(rep)
    return reports


def mean_dsc(reports: list[SegReport]) -> float:
    return float(np.mean([r.mean_dsc for r in reports]))


def _fit(model: GatModel, train: list[Sample], val: list[Sample], cfg: TrainConfig, graph_cfg: GraphConfig,
         seg_cfg: SegLossConfig, teacher: GatModel | None = None, distill: DistillConfig | None = None,
         snapshot_steps=(), log_every_epoch: bool = True, on_epoch=None) -> TrainLog:
    if not train:
        raise ValueError("empty training set")
    log = TrainLog()
    opt = AdamW(model, cfg, total_steps=cfg.epochs * len(train))
    rng = np.random.default_rng(cfg.seed)
    teacher_logits = None
    if teacher is not None:
        teacher_logits = [model_forward(s.patches, sample_graph(teacher, s, graph_cfg), teacher) for s in train]
    snapshot_steps = set(snapshot_steps)
    step = 0
    for epoch in range(cfg.epochs):
        for idx in rng.permutation(len(train)):
            sample = train[idx]
            if step in snapshot_steps:
                log.snapshots[step] = model.copy()
            graph = sample_graph(model, sample, graph_cfg)
            rec, grads = step_loss(model, sample, graph, seg_cfg,
                                   None if teacher_logits is None else teacher_logits[idx], distill)
            if not all(math.isfinite(v) for v in rec.values()):
                raise TrainingDiverged(f"non-finite loss at step {step}: {rec}")
            rec.update(step=step, epoch=epoch, sample=int(idx), grad_norm=_grad_norm(grads, model), lr=opt.lr())
            log.steps.append(rec)
            opt.step(grads)
            step += 1
        if log_every_epoch and val:
            reports = evaluate_model(model, val, graph_cfg, seg_cfg)
            log.epochs.append({"epoch": epoch, "val_mean_dsc": mean_dsc(reports),
                               "val_reports": [r.to_json() for r in reports]})
        if on_epoch is not None:
            on_epoch(epoch, model)
    return log


def train_teacher(suite: PhantomSuite, model: GatModel, cfg: TrainConfig = TrainConfig(),
                  graph_cfg: GraphConfig = GraphConfig(), seg_cfg: SegLossConfig = SegLossConfig(),
                  snapshot_steps=(), log_every_epoch: bool = True, on_epoch=None) -> tuple[GatModel, TrainLog]:
    """Minimize the segmentation loss.  ``model`` is updated in place and returned."""
    log = _fit(model, suite.train, suite.val, cfg, graph_cfg, seg_cfg, snapshot_steps=snapshot_steps,
               log_every_epoch=log_every_epoch, on_epoch=on_epoch)
    return model, log


def run_pruning_pass(teacher: GatModel, samples: list[Sample], percent: float,
                     graph_cfg: GraphConfig = GraphConfig()) -> tuple[HeadEnergyReport, HeadMask]:
    if not samples:
        raise ValueError("empty dataset")
    report = HeadEnergyReport()
    for sample in samples:
        tape = GradientTape()
        model_forward(sample.patches, sample_graph(teacher, sample, graph_cfg), teacher, tape=tape)
        report.add(head_outputs_from_tape(tape))
    return report, prune_heads(report, percent)


def distill_student(teacher: GatModel, mask: HeadMask, suite: PhantomSuite, cfg: TrainConfig,
                    distill: DistillConfig = DistillConfig(), graph_cfg: GraphConfig = GraphConfig(),
                    seg_cfg: SegLossConfig = SegLossConfig(), snapshot_steps=(),
                    log_every_epoch: bool = True, on_epoch=None) -> tuple[GatModel, TrainLog]:
    """Derive the pruned student and train it on seg + kd_weight * KD with the teacher frozen."""
    student = derive_student(teacher, mask)
    log = _fit(student, suite.train, suite.val, cfg, graph_cfg, seg_cfg, teacher=teacher, distill=distill,
               snapshot_steps=snapshot_steps, log_every_epoch=log_every_epoch, on_epoch=on_epoch)
    return student, log


def benchmark_graph(n_nodes: int = 10_000, embed_dim: int = 32, seed: int = 0,
                    graph_cfg: GraphConfig = GraphConfig(), patch_side: int = 8):
    """Random patch-like centers and features for latency runs."""
    rng = np.random.default_rng(seed)
    extent = patch_side * n_nodes ** (1.0 / 3.0)
    centers = rng.uniform(0.0, extent, size=(n_nodes, 3))
    features = rng.standard_normal((n_nodes, embed_dim))
    return build_graph(centers, features, graph_cfg), features


def benchmark(model: GatModel, graph: DualEdgeGraph, repeats: int = 20, features: np.ndarray | None = None,
              threads: int = 1, warmup: int = 2, seed: int = 0) -> dict:
    """Parameter count, MAC counts and median latency of graph reasoning plus classifier.

    Timing starts from node features; the embedder is shared by teacher and
    student and is reported only through the MAC model.
    """
    if features is None:
        features = np.random.default_rng(seed).standard_normal((graph.node_count, model.embedder.dim))
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            model_forward(features, graph, model)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model_forward(features, graph, model)
            times.append(time.perf_counter() - t0)
    return {
        "parameter_count": model.parameter_count(),
        "macs": mac_counts(model, graph),
        "median_seconds": statistics.median(times) if times else float("nan"),
        "repeats": repeats,
        "threads": threads,
        "node_count": graph.node_count,
        "edge_count": graph.edge_count(),
        "heads": model.head_counts,
    }


def with_epochs(cfg: TrainConfig, epochs: int, learning_rate: float | None = None) -> TrainConfig:
    return replace(cfg, epochs=epochs, learning_rate=cfg.learning_rate if learning_rate is None else learning_rate)
