"""Edge-type-aware multi-head graph attention with hand-written reverse mode.

Each head owns a projection ``W_t`` (d' x d) and attention vector ``a_t``
(2d') for every edge type ``t`` in (spatial, semantic).  For a destination
node ``i`` and neighbor ``j`` in ``N_t(i)``::

    e_ij = LeakyReLU(a_t . [W_t h_i || W_t h_j])
    alpha_ij = softmax of e_ij over N_t(i)
    head_i = ReLU(sum_t sum_j alpha_ij W_t h_j)

and the layer output is the mean over (retained) heads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import fileio
from .data import EmbedderParams, PatchSet, embed_backward, embed_patches, init_embedder
from .graphbuild import EDGE_TYPES, DualEdgeGraph

N_CLASSES = 4
WEIGHTS_FORMAT = "dualgat-weights"


class TapeError(RuntimeError):
    """Raised when backward is asked to use a missing or stale tape."""


def leaky_relu(x, slope: float):
    return np.where(x > 0, x, slope * x)


@dataclass
class GatHeadParams:
    W_s: np.ndarray
    W_m: np.ndarray
    a_s: np.ndarray
    a_m: np.ndarray
    leaky_slope: float = 0.2

    def W(self, edge_type: str) -> np.ndarray:
        return self.W_s if edge_type == "s" else self.W_m

    def a(self, edge_type: str) -> np.ndarray:
        return self.a_s if edge_type == "s" else self.a_m


@dataclass
class GatLayer:
    """Stacked per-head parameters; arrays carry a leading head axis."""

    W_s: np.ndarray  # (H, d', d)
    W_m: np.ndarray
    a_s: np.ndarray  # (H, 2d')
    a_m: np.ndarray
    leaky_slope: float = 0.2
    head_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.head_ids is None:
            self.head_ids = tuple(range(self.W_s.shape[0]))
        H, dp, d = self.W_s.shape
        if H < 1:
            raise ValueError("a layer needs at least one head")
        if self.W_m.shape != (H, dp, d) or self.a_s.shape != (H, 2 * dp) or self.a_m.shape != (H, 2 * dp):
            raise ValueError("inconsistent head parameter shapes")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def n_heads(self) -> int:
        return self.W_s.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W_s.shape[2]

    @property
    def out_dim(self) -> int:
        return self.W_s.shape[1]

    def W(self, edge_type: str) -> np.ndarray:
        return self.W_s if edge_type == "s" else self.W_m

    def a(self, edge_type: str) -> np.ndarray:
        return self.a_s if edge_type == "s" else self.a_m

    def head(self, k: int) -> GatHeadParams:
        return GatHeadParams(self.W_s[k], self.W_m[k], self.a_s[k], self.a_m[k], self.leaky_slope)

    def select(self, keep) -> "GatLayer":
        keep = np.flatnonzero(np.asarray(keep)) if np.asarray(keep).dtype == bool else np.asarray(keep)
        return GatLayer(self.W_s[keep].copy(), self.W_m[keep].copy(), self.a_s[keep].copy(),
                        self.a_m[keep].copy(), self.leaky_slope, tuple(self.head_ids[k] for k in keep))

    @classmethod
    def from_heads(cls, heads: list[GatHeadParams], head_ids=None) -> "GatLayer":
        stack = lambda name: np.stack([getattr(h, name) for h in heads])  # noqa: E731
        return cls(stack("W_s"), stack("W_m"), stack("a_s"), stack("a_m"), heads[0].leaky_slope,
                   None if head_ids is None else tuple(head_ids))

    def copy(self) -> "GatLayer":
        return self.select(np.arange(self.n_heads))


@dataclass
class GatModel:
    embedder: EmbedderParams
    layers: list[GatLayer]
    cls_weight: np.ndarray  # (d_last, C)
    cls_bias: np.ndarray  # (C,)
    seed: int | None = None
    # bumped by every in-place update so stale tapes can be detected
    generation: int = field(default=0, compare=False)

    def __post_init__(self):
        dim = self.embedder.dim
        for l, layer in enumerate(self.layers):
            if layer.in_dim != dim:
                raise ValueError(f"layer {l} expects input dim {layer.in_dim}, previous stage gives {dim}")
            dim = layer.out_dim
        if self.cls_weight.shape[0] != dim:
            raise ValueError(f"classifier expects dim {self.cls_weight.shape[0]}, got {dim}")

    @property
    def n_classes(self) -> int:
        return self.cls_weight.shape[1]

    @property
    def head_counts(self) -> list[int]:
        return [layer.n_heads for layer in self.layers]

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        items = [("embedder.projection", self.embedder.projection),
                 ("embedder.bias", self.embedder.bias),
                 ("embedder.pos_scale", self.embedder.pos_scale)]
        for l, layer in enumerate(self.layers):
            for name in ("W_s", "a_s", "W_m", "a_m"):
                items.append((f"layers.{l}.{name}", getattr(layer, name)))
        items += [("classifier.weight", self.cls_weight), ("classifier.bias", self.cls_bias)]
        return items

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))

    def copy(self) -> "GatModel":
        return GatModel(self.embedder.copy(), [layer.copy() for layer in self.layers],
                        self.cls_weight.copy(), self.cls_bias.copy(), self.seed)

    def bump(self) -> None:
        self.generation += 1


def init_model(seed: int, in_dim: int, embed_dim: int = 32, hidden_dim: int = 32, n_layers: int = 2,
               n_heads: int = 4, n_classes: int = N_CLASSES, leaky_slope: float = 0.2) -> GatModel:
    """Glorot-uniform initialization, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)

    def glorot(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    embedder = init_embedder(rng, in_dim, embed_dim)
    layers = []
    d = embed_dim
    for _ in range(n_layers):
        heads = []
        for _ in range(n_heads):
            W_s = glorot((hidden_dim, d), d, hidden_dim)
            a_s = glorot((2 * hidden_dim,), 2 * hidden_dim, 1)
            W_m = glorot((hidden_dim, d), d, hidden_dim)
            a_m = glorot((2 * hidden_dim,), 2 * hidden_dim, 1)
            heads.append(GatHeadParams(W_s, W_m, a_s, a_m, leaky_slope))
        layers.append(GatLayer.from_heads(heads))
        d = hidden_dim
    cls_weight = glorot((d, n_classes), d, n_classes)
    return GatModel(embedder, layers, cls_weight, np.zeros(n_classes), seed)


# --- single-edge reference operations ------------------------------------------

def attention_logit(h_i, h_j, head: GatHeadParams, edge_type: str) -> float:
    W, a = head.W(edge_type), head.a(edge_type)
    z = np.concatenate([W @ np.asarray(h_i, float), W @ np.asarray(h_j, float)])
    return float(leaky_relu(a @ z, head.leaky_slope))


def normalize_attention(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0:
        return logits.copy()
    ex = np.exp(logits - logits.max())
    return ex / ex.sum()


def head_mean(outputs: np.ndarray) -> np.ndarray:
    """Mean over the leading axis as a running mean, so identical heads average to themselves exactly."""
    m = np.array(outputs[0], dtype=float, copy=True)
    for k in range(1, len(outputs)):
        m += (outputs[k] - m) / (k + 1)
    return m


# --- batched layer -------------------------------------------------------------

@dataclass
class _TypeRecord:
    Wh: np.ndarray  # (H, N, d')
    pre: np.ndarray  # (H, E) attention pre-activations
    alpha: np.ndarray  # (H, E)
    rows: np.ndarray
    starts: np.ndarray  # CSR starts of non-empty rows
    nz_rows: np.ndarray
    nz_deg: np.ndarray


@dataclass
class _LayerRecord:
    layer: GatLayer  # the (possibly head-sliced) layer actually evaluated
    keep: np.ndarray  # indices of evaluated heads within the full layer
    full_heads: int
    h_in: np.ndarray
    types: dict
    msg: np.ndarray  # (H, N, d') pre-ReLU messages


@dataclass
class GradientTape:
    """Forward cache consumed by :func:`model_backward`."""

    layers: list = field(default_factory=list)
    features: np.ndarray | None = None
    patchset: PatchSet | None = None
    hidden: np.ndarray | None = None
    graph: DualEdgeGraph | None = None
    model: GatModel | None = None
    generation: int = -1

    def activation_pattern(self) -> np.ndarray:
        """Signs of every kinked pre-activation; a change flags a non-smooth point for FD checks."""
        parts = []
        for rec in self.layers:
            parts.append((rec.msg > 0).ravel())
            for t in EDGE_TYPES:
                parts.append((rec.types[t].pre > 0).ravel())
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    def attention(self, layer: int, edge_type: str) -> np.ndarray:
        return self.layers[layer].types[edge_type].alpha


def _csr_apply(values: np.ndarray, graph_csr, dense: np.ndarray, N: int, transpose: bool = False) -> np.ndarray:
    offsets, nbrs = graph_csr
    A = sparse.csr_matrix((values, nbrs, offsets), shape=(N, N))
    return (A.T @ dense) if transpose else (A @ dense)


def _type_forward(h, graph: DualEdgeGraph, edge_type: str, W, a, slope):
    H, dp, _ = W.shape
    N = h.shape[0]
    offsets, nbrs = graph.csr(edge_type)
    Wh = np.matmul(h, W.transpose(0, 2, 1))
    s_dst = np.matmul(Wh, a[:, :dp, None])[..., 0]
    s_src = np.matmul(Wh, a[:, dp:, None])[..., 0]
    deg = np.diff(offsets)
    nz = deg > 0
    rows = np.repeat(np.arange(N), deg)
    msg = np.zeros((H, N, dp))
    if len(nbrs) == 0:
        empty = np.zeros((H, 0))
        return msg, _TypeRecord(Wh, empty, empty, rows, offsets[:-1][nz], np.flatnonzero(nz), deg[nz])
    starts = offsets[:-1][nz]
    nz_deg = deg[nz]
    pre = s_dst[:, rows] + s_src[:, nbrs]
    e = leaky_relu(pre, slope)
    emax = np.maximum.reduceat(e, starts, axis=1)
    ex = np.exp(e - np.repeat(emax, nz_deg, axis=1))
    den = np.add.reduceat(ex, starts, axis=1)
    alpha = ex / np.repeat(den, nz_deg, axis=1)
    csr = (offsets, nbrs)
    for k in range(H):
        msg[k] = _csr_apply(alpha[k], csr, Wh[k], N)
    return msg, _TypeRecord(Wh, pre, alpha, rows, starts, np.flatnonzero(nz), nz_deg)


def layer_forward(h: np.ndarray, graph: DualEdgeGraph, layer: GatLayer, tape: GradientTape | None = None,
                  keep: np.ndarray | None = None) -> np.ndarray:
    """One attention layer.  ``keep`` selects retained heads (all by default)."""
    if h.ndim != 2 or h.shape[1] != layer.in_dim:
        raise ValueError(f"layer expects features of width {layer.in_dim}, got shape {h.shape}")
    if graph.node_count != h.shape[0]:
        raise ValueError(f"graph has {graph.node_count} nodes, features have {h.shape[0]} rows")
    full_heads = layer.n_heads
    if keep is None:
        keep = np.arange(full_heads)
        active = layer
    else:
        keep = np.asarray(keep, dtype=np.int64)
        if len(keep) == 0:
            raise ValueError("at least one head must be retained")
        active = layer if len(keep) == full_heads else layer.select(keep)
    msg = None
    types = {}
    for t in EDGE_TYPES:
        m, rec = _type_forward(h, graph, t, active.W(t), active.a(t), active.leaky_slope)
        msg = m if msg is None else msg + m
        types[t] = rec
    heads_out = np.maximum(msg, 0.0)
    out = head_mean(heads_out)
    if tape is not None:
        tape.layers.append(_LayerRecord(active, keep, full_heads, h, types, msg))
    return out


def _type_backward(h, graph, edge_type, W, a, slope, rec: _TypeRecord, dmsg):
    H, dp, _ = W.shape
    N = h.shape[0]
    offsets, nbrs = graph.csr(edge_type)
    dWh = np.zeros_like(rec.Wh)
    if len(nbrs):
        csr = (offsets, nbrs)
        for k in range(H):
            dWh[k] = _csr_apply(rec.alpha[k], csr, dmsg[k], N, transpose=True)
        dalpha = np.einsum("hec,hec->he", dmsg[:, rec.rows], rec.Wh[:, nbrs])
        weighted = np.add.reduceat(rec.alpha * dalpha, rec.starts, axis=1)
        de = rec.alpha * (dalpha - np.repeat(weighted, rec.nz_deg, axis=1))
        dpre = np.where(rec.pre > 0, de, slope * de)
        ds_dst = np.zeros((H, N))
        ds_dst[:, rec.nz_rows] = np.add.reduceat(dpre, rec.starts, axis=1)
        ds_src = np.stack([np.bincount(nbrs, weights=dpre[k], minlength=N) for k in range(H)])
        dWh += ds_dst[..., None] * a[:, None, :dp] + ds_src[..., None] * a[:, None, dp:]
        da = np.concatenate([np.einsum("hn,hnc->hc", ds_dst, rec.Wh),
                             np.einsum("hn,hnc->hc", ds_src, rec.Wh)], axis=1)
    else:
        da = np.zeros_like(a)
    dW = np.matmul(dWh.transpose(0, 2, 1), h)
    dh = np.matmul(dWh, W).sum(axis=0)
    return dW, da, dh


def layer_backward(rec: _LayerRecord, graph: DualEdgeGraph, d_out: np.ndarray):
    """Returns (grads keyed by W_s/a_s/W_m/a_m at full head count, d_input)."""
    layer = rec.layer
    H = layer.n_heads
    dmsg = (d_out / H)[None, :, :] * (rec.msg > 0)
    grads = {}
    dh = np.zeros_like(rec.h_in)
    for t in EDGE_TYPES:
        dW, da, dh_t = _type_backward(rec.h_in, graph, t, layer.W(t), layer.a(t), layer.leaky_slope,
                                      rec.types[t], dmsg)
        dh += dh_t
        full_W = np.zeros((rec.full_heads,) + dW.shape[1:])
        full_a = np.zeros((rec.full_heads,) + da.shape[1:])
        full_W[rec.keep] = dW
        full_a[rec.keep] = da
        grads[f"W_{t}"] = full_W
        grads[f"a_{t}"] = full_a
    return grads, dh


def _retained(mask, l: int, n_heads: int):
    if mask is None:
        return None
    row = np.asarray(mask.retain[l], dtype=bool)
    if row.shape != (n_heads,):
        raise ValueError(f"mask row {l} has {row.size} entries, layer has {n_heads} heads")
    return np.flatnonzero(row)


def model_forward(x, graph: DualEdgeGraph, model: GatModel, tape: GradientTape | None = None,
                  mask=None) -> np.ndarray:
    """Node logits ``(N, C)``.  ``x`` is a :class:`PatchSet` (embedded here) or a feature matrix."""
    if mask is not None and len(mask.retain) != len(model.layers):
        raise ValueError(f"mask covers {len(mask.retain)} layers, model has {len(model.layers)}")
    patchset = x if isinstance(x, PatchSet) else None
    h = embed_patches(x, model.embedder) if patchset is not None else np.asarray(x, dtype=float)
    if tape is not None:
        tape.layers.clear()
        tape.features, tape.patchset, tape.graph = h, patchset, graph
        tape.model, tape.generation = model, model.generation
    for l, layer in enumerate(model.layers):
        h = layer_forward(h, graph, layer, tape, keep=_retained(mask, l, layer.n_heads))
    if tape is not None:
        tape.hidden = h
    return h @ model.cls_weight + model.cls_bias


def model_backward(tape: GradientTape | None, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every named parameter plus ``"features"`` (dL/d node features)."""
    if tape is None or tape.model is None or tape.hidden is None:
        raise TapeError("backward needs a tape filled by model_forward")
    model = tape.model
    if tape.generation != model.generation:
        raise TapeError("tape is stale: the model was updated after the forward pass")
    graph = tape.graph
    grads = {"classifier.weight": tape.hidden.T @ d_logits, "classifier.bias": d_logits.sum(axis=0)}
    dh = d_logits @ model.cls_weight.T
    for l in range(len(tape.layers) - 1, -1, -1):
        layer_grads, dh = layer_backward(tape.layers[l], graph, dh)
        for name, g in layer_grads.items():
            grads[f"layers.{l}.{name}"] = g
    grads["features"] = dh
    if tape.patchset is not None:
        for name, g in embed_backward(tape.patchset, model.embedder, dh).items():
            grads[f"embedder.{name}"] = g
    else:
        grads["embedder.projection"] = np.zeros_like(model.embedder.projection)
        grads["embedder.bias"] = np.zeros_like(model.embedder.bias)
        grads["embedder.pos_scale"] = np.zeros_like(model.embedder.pos_scale)
    return grads


def forward_with_tape(x, graph, model, mask=None) -> tuple[np.ndarray, GradientTape]:
    tape = GradientTape()
    logits = model_forward(x, graph, model, tape=tape, mask=mask)
    return logits, tape


# --- serialization -------------------------------------------------------------

def _flat_params(model: GatModel) -> np.ndarray:
    e = model.embedder
    chunks = [e.projection.ravel(), e.bias.ravel(), np.atleast_1d(e.pos_scale).ravel()]
    for layer in model.layers:
        for k in range(layer.n_heads):
            chunks += [layer.W_s[k].ravel(), layer.a_s[k], layer.W_m[k].ravel(), layer.a_m[k]]
    chunks += [model.cls_weight.ravel(), model.cls_bias.ravel()]
    return np.concatenate(chunks)


def manifest(model: GatModel, extra: dict | None = None) -> dict:
    out = {
        "format": WEIGHTS_FORMAT,
        "version": 1,
        "seed": model.seed,
        "in_dim": int(model.embedder.projection.shape[1]),
        "embed_dim": int(model.embedder.dim),
        "n_classes": int(model.n_classes),
        "layers": [{"heads": layer.n_heads, "in_dim": layer.in_dim, "out_dim": layer.out_dim,
                    "leaky_slope": layer.leaky_slope, "head_ids": list(layer.head_ids)}
                   for layer in model.layers],
        "parameter_count": model.parameter_count(),
        "param_order": "embedder(projection,bias,pos_scale); per layer, per head: W_s,a_s,W_m,a_m; "
                       "classifier(weight,bias); row-major",
    }
    if extra:
        out["extra"] = extra
    return out


def encode_model(model: GatModel, extra: dict | None = None) -> bytes:
    header = manifest(model, extra)
    header["kind"] = "gat-weights"
    header["dtype"] = "float64"
    return fileio.encode_array(header, _flat_params(model))


def decode_model(blob: bytes) -> GatModel:
    header, flat = fileio.decode_array(blob)
    if header.get("format") != WEIGHTS_FORMAT:
        raise fileio.FormatError("not a weights file")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        if pos + n > flat.size:
            raise fileio.FormatError("weights payload too short for manifest")
        out = flat[pos:pos + n].reshape(shape).copy()
        pos += n
        return out

    in_dim, d, C = header["in_dim"], header["embed_dim"], header["n_classes"]
    embedder = EmbedderParams(take((d, in_dim)), take((d,)), take((1,)).reshape(()))
    layers = []
    for spec in header["layers"]:
        dp, di = spec["out_dim"], spec["in_dim"]
        heads = []
        for _ in range(spec["heads"]):
            W_s, a_s = take((dp, di)), take((2 * dp,))
            W_m, a_m = take((dp, di)), take((2 * dp,))
            heads.append(GatHeadParams(W_s, W_m, a_s, a_m, spec["leaky_slope"]))
        layers.append(GatLayer.from_heads(heads, spec["head_ids"]))
    d_last = layers[-1].out_dim if layers else d
    cls_w, cls_b = take((d_last, C)), take((C,))
    if pos != flat.size:
        raise fileio.FormatError("weights payload longer than manifest")
    return GatModel(embedder, layers, cls_w, cls_b, header.get("seed"))


def save_model(path, model: GatModel, extra: dict | None = None) -> None:
    fileio.atomic_write(path, encode_model(model, extra))


def load_model(path) -> GatModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        return json.loads(fh.readline())
