"""Synthetic multimodal phantoms, normalization, patch tiling and the patch embedder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio

MODALITIES = ("T1", "T1Gd", "T2", "FLAIR")
N_MODALITIES = len(MODALITIES)
CLASS_NAMES = ("background", "edema", "non_enhancing_core", "enhancing")

# Rows are classes (background, edema, core, enhancing); columns follow MODALITIES.
DEFAULT_CLASS_MEANS = np.array([
    [1.00, 1.00, 1.00, 1.00],
    [0.90, 1.05, 1.60, 1.80],
    [0.70, 0.80, 1.30, 1.20],
    [0.80, 2.00, 1.20, 1.35],
])

ZNORM_EPS = 1e-8


@dataclass
class Volume:
    data: np.ndarray  # (M, D, H, W)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != N_MODALITIES:
            raise ValueError(f"volume must be ({N_MODALITIES}, D, H, W), got {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])


@dataclass
class LabelVolume:
    labels: np.ndarray  # (D, H, W) uint8 in {0, 1, 2, 3}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass
class PatchSet:
    """Non-overlapping cubic patches, one row per graph node.

    ``patches[i]`` is the patch's voxel block flattened in (modality, z, y, x)
    order.  Nodes are numbered z-major, then y, then x.
    """

    patches: np.ndarray  # (N, M * s**3)
    centers: np.ndarray  # (N, 3), voxel units
    grid_dims: tuple[int, int, int]
    patch_side: int
    volume_shape: tuple[int, int, int]

    @property
    def node_count(self) -> int:
        return int(np.prod(self.grid_dims))


@dataclass
class EmbedderParams:
    projection: np.ndarray  # (d, M * s**3)
    bias: np.ndarray  # (d,)
    pos_scale: np.ndarray = field(default_factory=lambda: np.array(1.0))

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def copy(self) -> "EmbedderParams":
        return EmbedderParams(self.projection.copy(), self.bias.copy(), np.array(self.pos_scale, dtype=float))


@dataclass(frozen=True)
class TumorSpec:
    """Nested ellipsoid geometry; radii are (edema, core, enhancing) in voxels."""

    radii: tuple[float, float, float] = (12.0, 8.0, 4.0)
    center_range: tuple[float, float] = (0.4, 0.6)  # fraction of the side
    anisotropy: tuple[float, float] = (0.85, 1.15)  # per-axis semi-axis scale
    noise: float = 0.1

    def validate(self) -> None:
        a, b, c = self.radii
        if not (a > b > c > 0):
            raise ValueError(f"radii must satisfy edema > core > enhancing > 0, got {self.radii}")
        lo, hi = self.center_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"center_range must lie in [0, 1], got {self.center_range}")
        lo, hi = self.anisotropy
        if not (0.0 < lo <= hi):
            raise ValueError(f"anisotropy must be positive and ordered, got {self.anisotropy}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def generate_phantom(seed: int, side: int = 64, tumor: TumorSpec | None = None,
                     patch_side: int = 8, class_means: np.ndarray | None = None,
                     ) -> tuple[Volume, LabelVolume]:
    """Concentric nested ellipsoids with per-class modality means plus Gaussian noise.

    Intensities are returned in float32 precision so the binary file format
    round-trips them exactly.
    """
    tumor = tumor or TumorSpec()
    tumor.validate()
    if side <= 0 or patch_side <= 0 or side % patch_side:
        raise ValueError(f"side {side} must be a positive multiple of patch side {patch_side}")
    means = DEFAULT_CLASS_MEANS if class_means is None else np.asarray(class_means, dtype=float)

    rng = np.random.default_rng(seed)
    center = rng.uniform(tumor.center_range[0] * side, tumor.center_range[1] * side, size=3)
    scale = rng.uniform(tumor.anisotropy[0], tumor.anisotropy[1], size=3)

    axis = np.arange(side, dtype=float)
    z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
    # ellipsoidal radius; the same axes for all three shells keeps them nested
    rho = np.sqrt(((z - center[0]) / scale[0]) ** 2
                  + ((y - center[1]) / scale[1]) ** 2
                  + ((x - center[2]) / scale[2]) ** 2)
    labels = np.zeros((side, side, side), dtype=np.uint8)
    for cls, radius in zip((1, 2, 3), tumor.radii):
        labels[rho <= radius] = cls

    data = means[labels].transpose(3, 0, 1, 2)
    noise = rng.standard_normal(data.shape)
    data = (data + tumor.noise * noise).astype(np.float32)
    return Volume(data), LabelVolume(labels)


def znorm(volume: Volume, eps: float = ZNORM_EPS) -> Volume:
    """Per-modality zero-mean, unit-variance scaling (float64 output)."""
    data = np.asarray(volume.data, dtype=np.float64)
    out = np.empty_like(data)
    for m in range(data.shape[0]):
        chan = data[m]
        centered = chan - chan.mean()
        std = np.sqrt(np.mean(centered ** 2))
        out[m] = centered / std if std > eps else 0.0
    return Volume(out, volume.spacing)


def patch_centers(grid_dims, patch_side: int) -> np.ndarray:
    gz, gy, gx = grid_dims
    iz, iy, ix = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    idx = np.stack([iz.ravel(), iy.ravel(), ix.ravel()], axis=1).astype(float)
    return (idx + 0.5) * patch_side - 0.5


def extract_patches(volume: Volume, patch_side: int = 8) -> PatchSet:
    s = int(patch_side)
    M, D, H, W = volume.data.shape
    for name, n in zip("DHW", (D, H, W)):
        if s <= 0 or n % s:
            raise ValueError(f"dimension {name}={n} is not divisible by patch side {s}")
    gz, gy, gx = D // s, H // s, W // s
    blocks = volume.data.reshape(M, gz, s, gy, s, gx, s).transpose(1, 3, 5, 0, 2, 4, 6)
    patches = np.ascontiguousarray(blocks).reshape(gz * gy * gx, M * s ** 3)
    return PatchSet(patches, patch_centers((gz, gy, gx), s), (gz, gy, gx), s, (D, H, W))


def scatter_patches(patchset: PatchSet) -> np.ndarray:
    """Inverse of :func:`extract_patches`: rebuild the (M, D, H, W) array."""
    s = patchset.patch_side
    gz, gy, gx = patchset.grid_dims
    M = patchset.patches.shape[1] // s ** 3
    blocks = patchset.patches.reshape(gz, gy, gx, M, s, s, s).transpose(3, 0, 4, 1, 5, 2, 6)
    return blocks.reshape(M, gz * s, gy * s, gx * s)


def positional_encoding(centers: np.ndarray, volume_shape, dim: int) -> np.ndarray:
    """Sinusoids of normalized center coordinates.

    Feature ``k`` reads axis ``k % 3``; with ``j = k // 3`` it is
    ``sin`` for even ``j`` and ``cos`` for odd ``j`` at frequency ``pi * 2**(j // 2)``.
    """
    extent = np.asarray(volume_shape, dtype=float)
    u = (np.asarray(centers, dtype=float) + 0.5) / extent
    k = np.arange(dim)
    j = k // 3
    phase = u[:, k % 3] * (np.pi * 2.0 ** (j // 2))
    return np.where(j % 2 == 0, np.sin(phase), np.cos(phase))


def init_embedder(rng: np.random.Generator, in_dim: int, dim: int, pos_scale: float = 0.5) -> EmbedderParams:
    bound = np.sqrt(6.0 / (in_dim + dim))
    return EmbedderParams(rng.uniform(-bound, bound, size=(dim, in_dim)), np.zeros(dim), np.array(float(pos_scale)))


def embed_patches(patchset: PatchSet, params: EmbedderParams) -> np.ndarray:
    if params.projection.shape[1] != patchset.patches.shape[1]:
        raise ValueError(f"projection expects patches of length {params.projection.shape[1]}, "
                         f"got {patchset.patches.shape[1]}")
    pe = positional_encoding(patchset.centers, patchset.volume_shape, params.dim)
    return patchset.patches @ params.projection.T + params.bias + params.pos_scale * pe


def embed_backward(patchset: PatchSet, params: EmbedderParams, d_features: np.ndarray) -> dict[str, np.ndarray]:
    pe = positional_encoding(patchset.centers, patchset.volume_shape, params.dim)
    return {
        "projection": d_features.T @ patchset.patches,
        "bias": d_features.sum(axis=0),
        "pos_scale": np.array(np.sum(d_features * pe)),
    }


# --- file format --------------------------------------------------------------

def save_volume(path, volume: Volume) -> None:
    fileio.write_array(path, {"kind": "volume", "spacing": list(volume.spacing), "dtype": "float32"},
                       volume.data)


def save_labels(path, labels: LabelVolume) -> None:
    fileio.write_array(path, {"kind": "labels", "spacing": list(labels.spacing), "dtype": "uint8"},
                       labels.labels)


def load_volume(path) -> Volume:
    header, arr = fileio.read_array(path)
    if header["kind"] != "volume":
        raise fileio.FormatError(f"{path}: expected kind 'volume', got {header['kind']!r}")
    return Volume(arr, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def load_labels(path) -> LabelVolume:
    header, arr = fileio.read_array(path)
    if header["kind"] != "labels":
        raise fileio.FormatError(f"{path}: expected kind 'labels', got {header['kind']!r}")
    return LabelVolume(arr, tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def center_crop(volume: Volume, patch_side: int) -> Volume:
    """Crop each spatial axis to the largest multiple of ``patch_side``."""
    slices = [slice(None)]
    for n in volume.spatial_shape:
        keep = n - n % patch_side
        start = (n - keep) // 2
        slices.append(slice(start, start + keep))
    return Volume(volume.data[tuple(slices)], volume.spacing)
