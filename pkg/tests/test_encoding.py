import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occuflow.encoding import (
    EgoEncoder,
    OccupancyEncoder,
    PatchConfig,
    collapse_height,
    embed_classes,
    encode_ego,
    encode_history,
    patchify,
    split_height,
    unpatchify,
)
from occuflow.geometry import GridGeometry, PoseSE2, SemanticOccupancyGrid, compose
from occuflow.tensor import ShapeError, Tensor, gradcheck


def test_all_free_grid_embeds_row_zero():
    table = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    emb = embed_classes(np.zeros((2, 3, 2), np.uint8), table)
    assert emb.shape == (2, 3, 2, 3)
    np.testing.assert_array_equal(emb.data, np.broadcast_to(table.data[0], emb.shape))


def test_identity_table_gives_one_hot():
    labels = np.random.default_rng(1).integers(0, 4, (3, 3, 2))
    emb = embed_classes(labels, Tensor(np.eye(4)))
    np.testing.assert_array_equal(emb.data, np.eye(4)[labels])


def test_embed_rejects_unknown_class():
    with pytest.raises(ValueError):
        embed_classes(np.array([[[5]]]), Tensor(np.eye(4)))


def test_embed_gradcheck():
    labels = np.random.default_rng(2).integers(0, 4, (2, 2, 3))
    table = Tensor(np.random.default_rng(3).standard_normal((4, 2)), requires_grad=True)
    assert gradcheck(lambda t: embed_classes(labels, t) ** 2, [table]) <= 1e-4


def test_collapse_height_index_map_exhaustive():
    x = np.arange(16.0).reshape(2, 2, 2, 2)
    bev = collapse_height(Tensor(x)).data
    for y in range(2):
        for xx in range(2):
            for z in range(2):
                for c in range(2):
                    assert bev[y, xx, z * 2 + c] == x[y, xx, z, c]
    np.testing.assert_array_equal(split_height(Tensor(bev), 2).data, x)


def test_collapse_single_layer_is_copy():
    x = np.random.default_rng(4).standard_normal((3, 3, 1, 5))
    np.testing.assert_array_equal(collapse_height(Tensor(x)).data, x[:, :, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 999))
def test_patchify_roundtrip(p, h, w, k, seed):
    x = np.random.default_rng(seed).standard_normal((2, h * p, w * p, k))
    y = patchify(Tensor(x), p)
    assert y.shape == (2, h, w, p * p * k)
    np.testing.assert_array_equal(unpatchify(y, p).data, x)


def test_patch_one_is_identity():
    x = np.random.default_rng(5).standard_normal((4, 4, 3))
    np.testing.assert_array_equal(patchify(Tensor(x), 1).data, x)


def test_patch_zero_holds_top_left_block():
    x = np.arange(16.0).reshape(4, 4, 1)
    y = patchify(Tensor(x), 2).data
    assert sorted(y[0, 0]) == sorted(x[:2, :2].ravel())
    for i in range(2):
        for j in range(2):
            assert set(y[i, j]) == set(x[2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel())


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((5, 4, 1))), 2)
    with pytest.raises(ShapeError):
        PatchConfig(3, 8).grid_shape(64, 64)


def make_encoder(seed=0, channels=16, patch=4, depth=8):
    return OccupancyEncoder(np.random.default_rng(seed), 4, depth, 4, channels, patch, 4)


def test_history_token_shape():
    geo = GridGeometry((64, 64, 8), (-12.8, -12.8, 0, 12.8, 12.8, 3.2))
    grids = [SemanticOccupancyGrid.empty(geo) for _ in range(4)]
    enc = OccupancyEncoder(np.random.default_rng(0), 4, 8, 8, 64, 4, 4)
    assert encode_history(grids, enc).shape == (4, 16, 16, 64)


def test_history_rejects_mixed_geometry():
    a = SemanticOccupancyGrid.empty(GridGeometry((8, 8, 2), (0, 0, 0, 8, 8, 2)))
    b = SemanticOccupancyGrid.empty(GridGeometry((8, 8, 2), (0, 0, 0, 8, 8, 4)))
    with pytest.raises(ValueError):
        encode_history([a, b], make_encoder(depth=2))


def test_uniform_grid_gives_constant_interior_tokens():
    labels = np.full((1, 32, 32, 8), 2, np.uint8)
    tok = make_encoder()(labels).data[0]
    interior = tok[2:-2, 2:-2]
    np.testing.assert_allclose(interior, np.broadcast_to(interior[0, 0], interior.shape), atol=1e-12)


def test_tokens_shift_equivariant_on_interior():
    rng = np.random.default_rng(6)
    # keep content away from the borders: group norm pools over the whole map
    labels = np.zeros((1, 64, 64, 8), np.uint8)
    labels[0, 24:40, 24:40] = rng.integers(0, 4, (16, 16, 8))
    shifted = np.roll(labels, 4, axis=2)
    enc = make_encoder()
    a, b = enc(labels).data[0], enc(shifted).data[0]
    np.testing.assert_allclose(b[2:-2, 3:-2], a[2:-2, 2:-3], atol=1e-10)


def test_class_table_gradient_end_to_end():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 4, (1, 8, 8, 2)).astype(np.uint8)
    enc = OccupancyEncoder(rng, 4, 2, 2, 4, 2, 2)
    assert gradcheck(lambda t: enc(labels), [enc.class_table], max_entries=8) <= 1e-4


def test_stationary_ego_rows_equal():
    enc = EgoEncoder(np.random.default_rng(0), 8)
    e = encode_ego([PoseSE2(1, 2, 0.3)] * 4, enc).data
    np.testing.assert_array_equal(e, np.broadcast_to(e[0], e.shape))


def test_constant_velocity_rows_identical():
    step = PoseSE2(0.7, 0.1, 0.05)
    poses = [PoseSE2(3, -1, 1.0)]
    for _ in range(4):
        poses.append(compose(poses[-1], step))
    e = encode_ego(poses, EgoEncoder(np.random.default_rng(1), 8)).data
    np.testing.assert_allclose(e[2:], np.broadcast_to(e[1], e[2:].shape), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi))
def test_ego_invariant_to_global_transform(x, y, yaw):
    rng = np.random.default_rng(2)
    poses = [PoseSE2(*rng.uniform(-5, 5, 3)) for _ in range(4)]
    g = PoseSE2(x, y, yaw)
    enc = EgoEncoder(np.random.default_rng(3), 8)
    a = encode_ego(poses, enc).data
    b = encode_ego([compose(g, p) for p in poses], enc).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_ego_encoder_gradcheck():
    enc = EgoEncoder(np.random.default_rng(4), 6)
    disp = np.random.default_rng(5).standard_normal((4, 3))
    params = enc.parameters()
    assert gradcheck(lambda *ps: enc(disp), params) <= 1e-4
