"""Instance builders and the finite-difference gradient checker shared by the tests."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dualgat.cli import main
from dualgat.data import Volume, embed_patches, extract_patches
from dualgat.efficiency import HeadMask, kd_loss_and_grad
from dualgat.gat import GatModel, forward_with_tape, init_model, model_backward
from dualgat.graphbuild import GraphConfig, build_graph
from dualgat.seghead import PatchLayout, node_seg_loss_and_grad

from oracles import FD_STEP, central_difference, relative_error


@dataclass
class Instance:
    model: GatModel
    patches: object
    graph: object
    labels: np.ndarray
    teacher_logits: np.ndarray
    temperature: float
    kd_weight: float
    mask: HeadMask | None = None

    @property
    def layout(self):
        return PatchLayout.of(self.patches)


def random_instance(seed: int, n_layers: int = 2, n_heads: int = 4, dim: int | None = None,
                    max_nodes: int = 30, patch_side: int = 2, with_mask: bool = False,
                    grid: tuple[int, int, int] | None = None) -> Instance:
    """A small volume, model, fixed graph, labels and teacher logits for gradient checks."""
    rng = np.random.default_rng(seed)
    while grid is None:
        grid = tuple(int(g) for g in rng.integers(1, 5, size=3))
        if not 2 <= np.prod(grid) <= max_nodes:
            grid = None
    shape = tuple(g * patch_side for g in grid)
    vol = Volume(rng.standard_normal((4,) + shape))
    ps = extract_patches(vol, patch_side)
    dim = int(rng.integers(4, 17)) if dim is None else dim
    model = init_model(int(rng.integers(1 << 30)), ps.patches.shape[1], embed_dim=dim, hidden_dim=dim,
                       n_layers=n_layers, n_heads=n_heads)
    # unit-scale random parameters so every path carries signal
    for _, p in model.named_parameters():
        p[...] = rng.standard_normal(p.shape) * 0.5
    N = ps.node_count
    k_s, k_m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    graph = build_graph(ps.centers, embed_patches(ps, model.embedder), GraphConfig(k_s, k_m))
    labels = rng.integers(0, 4, size=shape).astype(np.uint8)
    teacher = rng.standard_normal((N, 4)) * 2.0
    mask = None
    if with_mask and n_layers:
        retain = []
        for _ in range(n_layers):
            row = rng.random(n_heads) < 0.5
            row[rng.integers(n_heads)] = True
            retain.append(row)
        mask = HeadMask(retain)
    return Instance(model, ps, graph, labels, teacher, float(rng.uniform(1.5, 4.0)), float(rng.uniform(0.1, 1.0)),
                    mask)


def total_loss_and_tape(inst: Instance):
    logits, tape = forward_with_tape(inst.patches, inst.graph, inst.model, mask=inst.mask)
    seg, _, d_seg = node_seg_loss_and_grad(logits, inst.labels, inst.layout)
    kd, d_kd = kd_loss_and_grad(inst.teacher_logits, logits, inst.temperature)
    return seg + inst.kd_weight * kd, d_seg + inst.kd_weight * d_kd, tape


def gradient_check(inst: Instance, per_class: int = 8, seed: int = 0, step: float = FD_STEP):
    """Relative error of analytic vs central-difference gradients per parameter class.

    Coordinates whose perturbation flips a ReLU/LeakyReLU sign are not
    differentiable there and are skipped; the number skipped is reported.
    """
    rng = np.random.default_rng(seed)
    _, d_logits, tape = total_loss_and_tape(inst)
    grads = model_backward(tape, d_logits)
    pattern = tape.activation_pattern()

    def f():
        loss, _, t = total_loss_and_tape(inst)
        return loss, t.activation_pattern()

    errors, skipped = {}, 0
    for name, param in inst.model.named_parameters():
        n = param.size
        idx = rng.choice(n, size=min(per_class, n), replace=False)
        analytic, numeric = [], []
        for i in idx:
            num, pat_p, pat_m = central_difference(f, param, int(i), step)
            if not (np.array_equal(pat_p, pattern) and np.array_equal(pat_m, pattern)):
                skipped += 1
                continue
            analytic.append(grads[name].reshape(-1)[i])
            numeric.append(num)
        errors[name] = relative_error(analytic, numeric, grads[name])
    return errors, skipped, grads


# --- command-line pipeline ----------------------------------------------------------

TINY = {
    "data": {"side": 32, "patch_side": 8, "n_train": 2, "n_val": 1, "radii": [12, 8, 4]},
    "model": {"embed_dim": 8, "hidden_dim": 8, "heads": 2},
    "train": {"epochs": 2, "learning_rate": 0.01},
    "distill": {"epochs": 1},
    "bench": {"nodes": 500, "repeats": 2},
}

PIPELINE = [
    ["phantom", "--seed", "5", "--out-volume", "vol.bin", "--out-labels", "lab.bin"],
    ["graph", "--volume", "vol.bin", "--dump-edges", "edges.txt"],
    ["train-teacher", "--out", "teacher.weights", "--log", "teacher.jsonl"],
    ["graph", "--volume", "vol.bin", "--model", "teacher.weights", "--dump-edges", "edges_t.txt"],
    ["prune", "--teacher", "teacher.weights", "--out", "mask.json", "--out-energies", "energies.json"],
    ["prune", "--energies", "energies.json", "--percent", "50", "--out", "mask2.json"],
    ["distill", "--teacher", "teacher.weights", "--mask", "mask.json", "--out", "student.weights", "--log", "student.jsonl"],
    ["eval", "--model", "student.weights", "--volume", "vol.bin", "--labels", "lab.bin", "--report", "report.json",
     "--out-pred", "pred.bin"],
    ["train-teacher", "--out", "multi.weights", "--seeds", "1,2"],
    ["eval", "--pred", "pred.bin", "--labels", "lab.bin", "--report", "report2.json"],
    ["bench", "--teacher", "teacher.weights", "--mask", "mask.json", "--out", "bench.json",
     "--timings", "timings.json"],
]


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(directory: Path, monkeypatch) -> dict[str, bytes]:
    """Run every CLI command with relative paths in ``directory``.

    Returns the bytes of every artifact except the wall-clock timings file.
    """
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "cfg.json").write_text(json.dumps(TINY))
    monkeypatch.chdir(directory)
    for argv in PIPELINE:
        inputs = {p: digest(p) for p in directory.iterdir() if p.is_file()}
        assert main(["--config", "cfg.json", "--threads", "1", *argv]) == 0, argv
        # nothing a command reads is rewritten
        for p, h in inputs.items():
            if p.name not in argv:
                continue
            flag = argv[argv.index(p.name) - 1]
            if not flag.startswith("--out") and flag not in ("--dump-edges", "--log", "--report", "--timings"):
                assert digest(p) == h, (argv, p.name)
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.is_file() and p.name != "timings.json"}
