"""Head pruning by activation energy and teacher-to-student distillation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gat import GatModel, GradientTape, head_mean
from .graphbuild import EDGE_TYPES, DualEdgeGraph

PROB_FLOOR = 1e-12


@dataclass
class HeadEnergyReport:
    """Per-(layer, head) sums of squared head-output norms.

    ``chunks`` keeps one ``(L, H)`` sum array per accumulated batch of nodes
    so merging reports reproduces the single-pass result bit for bit.
    """

    chunks: list[np.ndarray] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return int(sum(self.counts))

    @property
    def layer_count(self) -> int:
        return self.chunks[0].shape[0] if self.chunks else 0

    @property
    def head_count(self) -> int:
        return self.chunks[0].shape[1] if self.chunks else 0

    @property
    def energies(self) -> np.ndarray:
        if not self.chunks or self.sample_count == 0:
            raise ValueError("no samples accumulated")
        total = np.zeros_like(self.chunks[0])
        for c in self.chunks:
            total = total + c
        return total / self.sample_count

    def add(self, head_outputs: list[np.ndarray]) -> "HeadEnergyReport":
        """Accumulate one batch: ``head_outputs[l]`` is ``(H, N, d')`` post-activation."""
        sums = np.stack([np.sum(out * out, axis=(1, 2)) for out in head_outputs])
        n = head_outputs[0].shape[1]
        if any(out.shape[1] != n for out in head_outputs):
            raise ValueError("all layers must report the same nodes")
        if self.chunks and sums.shape != self.chunks[0].shape:
            raise ValueError("layer/head layout differs from earlier batches")
        self.chunks.append(sums)
        self.counts.append(n)
        return self

    def merge(self, other: "HeadEnergyReport") -> "HeadEnergyReport":
        return HeadEnergyReport(self.chunks + other.chunks, self.counts + other.counts)

    def to_records(self, mask: "HeadMask | None" = None) -> list[dict]:
        E = self.energies
        return [{"layer": l, "head": h, "energy": float(E[l, h]),
                 "retained": bool(mask.retain[l][h]) if mask is not None else True}
                for l in range(E.shape[0]) for h in range(E.shape[1])]

    def to_json(self, mask: "HeadMask | None" = None) -> dict:
        return {"sample_count": self.sample_count, "heads": self.to_records(mask)}

    @classmethod
    def from_json(cls, obj: dict) -> "HeadEnergyReport":
        recs = obj["heads"]
        L = max(r["layer"] for r in recs) + 1
        H = max(r["head"] for r in recs) + 1
        E = np.zeros((L, H))
        for r in recs:
            E[r["layer"], r["head"]] = r["energy"]
        n = int(obj.get("sample_count", 1))
        return cls([E * n], [n])


def accumulate_head_energy(head_outputs: list[np.ndarray]) -> HeadEnergyReport:
    if not head_outputs or head_outputs[0].shape[1] == 0:
        raise ValueError("no samples to accumulate")
    return HeadEnergyReport().add(head_outputs)


def head_outputs_from_tape(tape: GradientTape) -> list[np.ndarray]:
    return [np.maximum(rec.msg, 0.0) for rec in tape.layers]


@dataclass
class HeadMask:
    retain: list[np.ndarray]

    def __post_init__(self):
        self.retain = [np.asarray(r, dtype=bool) for r in self.retain]
        for l, r in enumerate(self.retain):
            if not r.any():
                raise ValueError(f"layer {l} retains no heads")

    @classmethod
    def full(cls, head_counts) -> "HeadMask":
        return cls([np.ones(h, dtype=bool) for h in head_counts])

    @property
    def retained_counts(self) -> list[int]:
        return [int(r.sum()) for r in self.retain]

    def to_json(self, report: HeadEnergyReport | None = None) -> dict:
        if report is not None:
            return {"heads": report.to_records(self)}
        return {"heads": [{"layer": l, "head": h, "retained": bool(v)}
                          for l, r in enumerate(self.retain) for h, v in enumerate(r)]}

    @classmethod
    def from_json(cls, obj: dict) -> "HeadMask":
        recs = obj["heads"]
        L = max(r["layer"] for r in recs) + 1
        rows = [[] for _ in range(L)]
        for r in sorted(recs, key=lambda r: (r["layer"], r["head"])):
            rows[r["layer"]].append(bool(r["retained"]))
        return cls(rows)


def prune_heads(report: HeadEnergyReport, percent: float) -> HeadMask:
    """Per layer, drop the floor(p * H / 100) lowest-energy heads (ties: lower index first)."""
    if not 0 <= percent < 100:
        raise ValueError(f"percent must lie in [0, 100), got {percent}")
    E = report.energies
    retain = []
    for row in E:
        H = len(row)
        n_drop = min(int(np.floor(percent * H / 100.0)), H - 1)
        order = np.lexsort((np.arange(H), row))
        keep = np.ones(H, dtype=bool)
        keep[order[:n_drop]] = False
        retain.append(keep)
    return HeadMask(retain)


def masked_aggregate(head_outputs: np.ndarray, retain) -> np.ndarray:
    retain = np.asarray(retain, dtype=bool)
    if not retain.any():
        raise ValueError("mask retains no heads")
    return head_mean(head_outputs[retain])


# --- distillation ----------------------------------------------------------------

@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    kd_weight: float = 0.5

    def __post_init__(self):
        if not self.temperature > 1:
            raise ValueError(f"temperature must be > 1, got {self.temperature}")
        if not (np.isfinite(self.kd_weight) and self.kd_weight >= 0):
            raise ValueError(f"kd_weight must be finite and >= 0, got {self.kd_weight}")


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    ex = np.exp(z - z.max(axis=axis, keepdims=True))
    return ex / ex.sum(axis=axis, keepdims=True)


def _check_pair(teacher, student):
    teacher = np.asarray(teacher, dtype=float)
    student = np.asarray(student, dtype=float)
    if teacher.shape != student.shape or teacher.ndim != 2:
        raise ValueError(f"logit shapes differ or are not (N, C): {teacher.shape} vs {student.shape}")
    return teacher, student


def kd_loss(teacher_logits, student_logits, temperature: float) -> float:
    """Mean over nodes of KL(softmax(z_T / tau) || softmax(z_S / tau))."""
    return kd_loss_and_grad(teacher_logits, student_logits, temperature)[0]


def kd_loss_and_grad(teacher_logits, student_logits, temperature: float) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the student logits; the teacher is a constant."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    zt, zs = _check_pair(teacher_logits, student_logits)
    N = zt.shape[0]
    p = softmax(zt / temperature)
    q = softmax(zs / temperature)
    p_safe = np.maximum(p, PROB_FLOOR)
    q_safe = np.maximum(q, PROB_FLOOR)
    loss = float(np.sum(p * (np.log(p_safe) - np.log(q_safe))) / N)
    # d/dq of -p ln max(q, floor); zero where the floor is active
    g_q = np.where(q > PROB_FLOOR, -p / q_safe, 0.0)
    g_z = q * (g_q - np.sum(q * g_q, axis=1, keepdims=True))
    return loss, g_z / (temperature * N)


def total_loss(seg_loss: float, kd: float, kd_weight: float) -> float:
    return seg_loss + kd_weight * kd


# --- student derivation and cost model -----------------------------------------------

def derive_student(teacher: GatModel, mask: HeadMask) -> GatModel:
    if len(mask.retain) != len(teacher.layers):
        raise ValueError(f"mask covers {len(mask.retain)} layers, teacher has {len(teacher.layers)}")
    layers = []
    for l, (layer, row) in enumerate(zip(teacher.layers, mask.retain)):
        if row.shape != (layer.n_heads,):
            raise ValueError(f"mask row {l} has {row.size} entries, layer has {layer.n_heads} heads")
        layers.append(layer.select(row))
    return GatModel(teacher.embedder.copy(), layers, teacher.cls_weight.copy(), teacher.cls_bias.copy(),
                    teacher.seed)


def head_parameter_count(in_dim: int, out_dim: int) -> int:
    return 2 * out_dim * in_dim + 2 * 2 * out_dim


def head_macs(node_count: int, in_dim: int, out_dim: int, edge_counts: dict[str, int]) -> int:
    """Multiply-accumulates for one head: per edge type, projection, attention halves, weighted messages."""
    total = 0
    for t in EDGE_TYPES:
        total += node_count * in_dim * out_dim + 2 * node_count * out_dim + edge_counts[t] * out_dim
    return total


def mac_counts(model: GatModel, graph: DualEdgeGraph, mask: HeadMask | None = None) -> dict:
    N = graph.node_count
    edges = {t: graph.edge_count(t) for t in EDGE_TYPES}
    per_layer = []
    for l, layer in enumerate(model.layers):
        heads = layer.n_heads if mask is None else int(mask.retain[l].sum())
        per_layer.append(heads * head_macs(N, layer.in_dim, layer.out_dim, edges))
    e = model.embedder
    embed = N * e.projection.shape[0] * e.projection.shape[1]
    classifier = N * model.cls_weight.shape[0] * model.cls_weight.shape[1]
    return {"embedder": embed, "gat_layers": per_layer, "gat_total": int(sum(per_layer)),
            "classifier": classifier, "total": int(embed + sum(per_layer) + classifier)}
