import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualgat.data import (
    DEFAULT_CLASS_MEANS,
    EmbedderParams,
    PatchSet,
    TumorSpec,
    Volume,
    center_crop,
    embed_backward,
    embed_patches,
    extract_patches,
    generate_phantom,
    init_embedder,
    load_labels,
    load_volume,
    positional_encoding,
    save_labels,
    save_volume,
    scatter_patches,
    znorm,
)
from dualgat.fileio import FormatError

from oracles import central_difference, relative_error


# --- phantoms --------------------------------------------------------------------

def test_phantom_is_deterministic():
    v1, l1 = generate_phantom(7, side=32)
    v2, l2 = generate_phantom(7, side=32)
    assert v1.data.tobytes() == v2.data.tobytes()
    assert l1.labels.tobytes() == l2.labels.tobytes()


def test_phantom_seed_changes_output():
    assert not np.array_equal(generate_phantom(1, side=16)[0].data, generate_phantom(2, side=16)[0].data)


def test_phantom_class_counts_match_ellipsoid_shells():
    radii = (12.0, 8.0, 4.0)
    _, lab = generate_phantom(3, side=64, tumor=TumorSpec(radii=radii))
    counts = np.bincount(lab.labels.ravel(), minlength=4)
    assert (counts > 0).all()
    # the axes scales multiply to roughly 1, so shell volumes follow 4/3 pi (r_out^3 - r_in^3)
    ball = lambda r: 4.0 / 3.0 * np.pi * r ** 3
    expected = [ball(radii[0]) - ball(radii[1]), ball(radii[1]) - ball(radii[2]), ball(radii[2])]
    for got, want in zip(counts[1:], expected):
        assert 0.5 * want < got < 1.7 * want


def test_phantom_noise_free_intensities_equal_class_means():
    vol, lab = generate_phantom(5, side=32, tumor=TumorSpec(noise=0.0))
    for c in range(4):
        sel = lab.labels == c
        for m in range(4):
            assert np.all(vol.data[m][sel] == np.float32(DEFAULT_CLASS_MEANS[c, m]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_phantom_labels_are_nested(seed):
    _, lab = generate_phantom(seed, side=32, tumor=TumorSpec(radii=(10, 6, 3)))
    lbl = lab.labels
    et, tc, wt = lbl == 3, np.isin(lbl, (2, 3)), lbl > 0
    assert np.all(tc[et]) and np.all(wt[tc])


@pytest.mark.parametrize("radii", [(4, 8, 2), (8, 8, 2), (8, 4, 0)])
def test_phantom_rejects_bad_radii(radii):
    with pytest.raises(ValueError):
        generate_phantom(0, side=16, tumor=TumorSpec(radii=radii))


def test_phantom_rejects_side_not_multiple_of_patch():
    with pytest.raises(ValueError):
        generate_phantom(0, side=20, patch_side=8)


# --- znorm -----------------------------------------------------------------------

def test_znorm_two_values():
    data = np.zeros((4, 2, 2, 2))
    data[0].flat[::2] = 2.0
    out = znorm(Volume(data)).data[0]
    assert sorted(set(out.ravel())) == [-1.0, 1.0]


def test_znorm_constant_modality_is_zero():
    data = np.full((4, 3, 3, 3), 7.5)
    assert np.all(znorm(Volume(data)).data == 0.0)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3, 4, 2), elements=finite))
def test_znorm_moments_and_idempotence(data):
    out = znorm(Volume(data)).data
    for m in range(4):
        assert abs(out[m].mean()) < 1e-9
        if data[m].std() > 1e-6 * max(1.0, np.abs(data[m]).max()):
            assert abs(out[m].var() - 1.0) < 1e-9
            again = znorm(Volume(out)).data
            assert np.max(np.abs(again[m] - out[m])) < 1e-9


# --- patches ---------------------------------------------------------------------

def test_extract_sixteen_cube():
    ps = extract_patches(Volume(np.zeros((4, 16, 16, 16))), 8)
    assert ps.node_count == 8 and ps.grid_dims == (2, 2, 2)


def test_extract_single_patch_center():
    ps = extract_patches(Volume(np.zeros((4, 8, 8, 8))), 8)
    assert ps.node_count == 1
    np.testing.assert_array_equal(ps.centers[0], [3.5, 3.5, 3.5])


def test_extract_rejects_non_divisible():
    with pytest.raises(ValueError):
        extract_patches(Volume(np.zeros((4, 12, 12, 12))), 8)


def test_patch_order_is_z_major():
    data = np.zeros((4, 4, 4, 4))
    data[:, :2, :2, 2:] = 1.0  # z block 0, y block 0, x block 1
    data[:, 2:, :2, :2] = 2.0  # z block 1
    ps = extract_patches(Volume(data), 2)
    assert ps.grid_dims == (2, 2, 2)
    assert np.all(ps.patches[1] == 1.0) and np.all(ps.patches[4] == 2.0)
    np.testing.assert_array_equal(ps.centers[1], [0.5, 0.5, 2.5])
    np.testing.assert_array_equal(ps.centers[4], [2.5, 0.5, 0.5])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 3]), st.integers(0, 999))
def test_patch_tiling_is_a_bijection(gz, gy, gx, s, seed):
    data = znorm(Volume(np.random.default_rng(seed).standard_normal((4, gz * s, gy * s, gx * s)))).data
    ps = extract_patches(Volume(data), s)
    assert ps.node_count == gz * gy * gx
    back = scatter_patches(ps)
    assert back.tobytes() == data.tobytes()
    assert np.all((ps.centers >= 0) & (ps.centers < np.array(data.shape[1:])))


def test_center_crop_makes_divisible():
    vol = Volume(np.arange(4 * 10 * 17 * 8, dtype=float).reshape(4, 10, 17, 8))
    out = center_crop(vol, 8)
    assert out.spatial_shape == (8, 16, 8)
    np.testing.assert_array_equal(out.data, vol.data[:, 1:9, 0:16, :])


# --- embedder --------------------------------------------------------------------

def _patchset(seed=0, s=2, grid=(2, 2, 2)):
    data = np.random.default_rng(seed).standard_normal((4,) + tuple(g * s for g in grid))
    return extract_patches(Volume(data), s)


def test_embed_zero_everything_is_zero():
    ps = extract_patches(Volume(np.zeros((4, 16, 16, 8))), 8)
    rng = np.random.default_rng(0)
    params = EmbedderParams(rng.standard_normal((32, ps.patches.shape[1])), np.zeros(32), np.array(0.0))
    assert np.all(embed_patches(ps, params) == 0.0)


def test_embed_zero_projection_gives_positional_encoding():
    ps = _patchset()
    params = EmbedderParams(np.zeros((12, ps.patches.shape[1])), np.zeros(12), np.array(1.0))
    pe = positional_encoding(ps.centers, ps.volume_shape, 12)
    assert np.array_equal(embed_patches(ps, params), pe)


def test_embed_shape_contract():
    ps = extract_patches(Volume(np.zeros((4, 16, 16, 16))), 8)
    params = init_embedder(np.random.default_rng(0), 4 * 8 ** 3, 32)
    assert embed_patches(ps, params).shape == (8, 32)


def test_embed_dimension_mismatch():
    ps = _patchset()
    params = init_embedder(np.random.default_rng(0), 7, 4)
    with pytest.raises(ValueError):
        embed_patches(ps, params)


def test_positional_encoding_is_bounded_and_distinct():
    ps = _patchset(grid=(3, 3, 3))
    pe = positional_encoding(ps.centers, ps.volume_shape, 12)
    assert np.all(np.abs(pe) <= 1.0)
    assert len({row.tobytes() for row in pe}) == ps.node_count


def test_embed_gradient_matches_finite_differences():
    ps = _patchset(seed=3)
    rng = np.random.default_rng(4)
    params = init_embedder(rng, ps.patches.shape[1], 6)
    params.bias[:] = rng.standard_normal(6)
    weights = rng.standard_normal((ps.node_count, 6))

    def f():
        return float(np.sum(weights * embed_patches(ps, params) ** 2)), None

    grad = embed_backward(ps, params, 2.0 * weights * embed_patches(ps, params))
    for name in ("projection", "bias", "pos_scale"):
        arr = getattr(params, name)
        numeric = [central_difference(f, arr, i)[0] for i in range(arr.size)]
        assert relative_error(grad[name].ravel(), numeric) < 1e-4


# --- files -----------------------------------------------------------------------

def test_volume_and_label_files_round_trip(tmp_path):
    vol, lab = generate_phantom(11, side=16)
    save_volume(tmp_path / "v.bin", vol)
    save_labels(tmp_path / "l.bin", lab)
    v2, l2 = load_volume(tmp_path / "v.bin"), load_labels(tmp_path / "l.bin")
    assert v2.data.tobytes() == vol.data.tobytes()
    assert l2.labels.tobytes() == lab.labels.tobytes()
    assert v2.spacing == vol.spacing


def test_volume_file_layout(tmp_path):
    vol = Volume(np.arange(4 * 8, dtype=np.float32).reshape(4, 2, 2, 2))
    save_volume(tmp_path / "v.bin", vol)
    raw = (tmp_path / "v.bin").read_bytes()
    header, payload = raw.split(b"\n", 1)
    meta = json.loads(header)
    assert meta["kind"] == "volume" and meta["dtype"] == "float32"
    assert meta["shape"] == [4, 2, 2, 2] and meta["spacing"] == [1.0, 1.0, 1.0]
    assert payload == vol.data.astype("<f4").tobytes()


def test_truncated_file_is_rejected(tmp_path):
    vol, _ = generate_phantom(0, side=8)
    save_volume(tmp_path / "v.bin", vol)
    raw = (tmp_path / "v.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_volume(tmp_path / "t.bin")


def test_wrong_kind_is_rejected(tmp_path):
    _, lab = generate_phantom(0, side=8)
    save_labels(tmp_path / "l.bin", lab)
    with pytest.raises(FormatError):
        load_volume(tmp_path / "l.bin")


def test_patchset_node_count():
    ps = PatchSet(np.zeros((6, 4)), np.zeros((6, 3)), (1, 2, 3), 1, (1, 2, 3))
    assert ps.node_count == 6
