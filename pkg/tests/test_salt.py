import numpy as np
import pytest

from occuflow.salt import FlowDecoder, OccupancyHead, SaltBlock, SpatialTemporalEncoder, VanillaDecoder, decode_occupancy, salt_block
from occuflow.tensor import ShapeError, Tensor
from occuflow.tensor import functional as F

from gradient_cases import randomize


def rng(seed=0):
    return np.random.default_rng(seed)


def test_block_preserves_shape_and_starts_as_identity():
    block = SaltBlock(rng(), 8, 2, 16, 2)
    x = Tensor(rng(1).standard_normal((3, 4, 5, 8)))
    y = salt_block(x, block)
    assert y.shape == x.shape
    np.testing.assert_array_equal(y.data, x.data)


def test_block_rejects_bad_heads():
    with pytest.raises(ShapeError):
        SaltBlock(rng(), 6, 4, 8, 2)


def test_single_frame_attention_is_value_projection():
    r = rng(2)
    block = randomize(SaltBlock(r, 8, 2, 8, 2), r)
    x = Tensor(r.standard_normal((1, 3, 3, 8)))
    _, _, v = block.qkv(x)
    v_proj = F.linear(v, block.out_weight, block.out_bias)
    after_attn = x.data + v_proj.data
    expected = after_attn + block.feed_forward(Tensor(after_attn)).data
    np.testing.assert_allclose(block(x).data, expected, atol=1e-12)


def test_constant_sequence_gives_uniform_weights():
    r = rng(3)
    block = randomize(SaltBlock(r, 8, 2, 8, 2), r)
    frame = r.standard_normal((1, 3, 3, 8))
    x = Tensor(np.repeat(frame, 4, axis=0))
    _, w = block.attention(x, return_weights=True)
    np.testing.assert_allclose(w.data, 0.25, atol=1e-12)


def test_attention_weights_are_distributions():
    r = rng(4)
    block = randomize(SaltBlock(r, 8, 4, 8, 2), r)
    _, w = block.attention(Tensor(r.standard_normal((5, 2, 3, 8))), return_weights=True)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_fresh_encoder_with_zero_ego_is_identity():
    enc = SpatialTemporalEncoder(rng(), 8, 2, 16, 2, 2)
    for p in enc.ego_proj.parameters():
        p.data = np.zeros_like(p.data)
    tok = Tensor(rng(5).standard_normal((4, 3, 3, 8)))
    out = enc(tok, Tensor(np.zeros((4, 8))))
    np.testing.assert_array_equal(out.data, tok.data)


def test_encoder_is_order_sensitive():
    r = rng(6)
    enc = randomize(SpatialTemporalEncoder(r, 8, 2, 8, 2, 1), r)
    tok, ego = r.standard_normal((4, 2, 2, 8)), r.standard_normal((4, 8))
    a = enc(Tensor(tok), Tensor(ego)).data
    perm = [1, 0, 3, 2]
    b = enc(Tensor(tok[perm]), Tensor(ego[perm])).data
    assert not np.allclose(a[perm], b)


def test_flow_decoder_zero_head_and_shapes():
    dec = FlowDecoder(rng(), 16, 4, 32, 4, 2, 6, 4, 0.4)
    h = Tensor(rng(7).standard_normal((4, 16, 16, 16)))
    flow, poses, last = dec(h)
    assert flow.shape == (6, 64, 64, 2)
    assert poses.shape == (6, 3)
    assert last.shape == (16, 16, 16)
    np.testing.assert_array_equal(flow.data, 0.0)


def test_flow_is_in_meters():
    r = rng(8)
    dec = FlowDecoder(r, 4, 2, 4, 2, 0, 1, 2, 0.4)
    dec.flow_head.bias.data = np.array([1.0, -2.0])
    flow, _, _ = dec(Tensor(r.standard_normal((2, 3, 3, 4))))
    np.testing.assert_allclose(flow.data[0, ..., 0], 0.4)
    np.testing.assert_allclose(flow.data[0, ..., 1], -0.8)


def test_vanilla_decoder_shape_and_zero_output():
    dec = VanillaDecoder(rng(), 8, 2, 8, 2, 2, 6, (4, 4))
    out = dec(Tensor(rng(9).standard_normal((4, 4, 4, 8))))
    assert out.shape == (6, 4, 4, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_occupancy_head_shape_and_zero():
    head = OccupancyHead(rng(), 64, 8, 4, (64, 64), zero=True)
    out = decode_occupancy(Tensor(rng(10).standard_normal((16, 16, 64))), head)
    assert out.shape == (64, 64, 8)
    np.testing.assert_array_equal(out.data, 0.0)


def test_occupancy_head_rearrangement_exhaustive():
    # H=W=2, P=2, D0=2: feature channel (py, px, z) of patch (i, j) lands on voxel (2i+py, 2j+px, z)
    head = OccupancyHead(rng(), 8, 2, 2, (4, 4))
    head.linear.weight.data = np.eye(8)
    head.linear.bias.data = np.zeros(8)
    feat = np.arange(32.0).reshape(2, 2, 8)
    out = head(Tensor(feat)).data
    for i in range(2):
        for j in range(2):
            for py in range(2):
                for px in range(2):
                    for z in range(2):
                        assert out[2 * i + py, 2 * j + px, z] == feat[i, j, (py * 2 + px) * 2 + z]


def test_variants_share_encoder_activations():
    from occuflow.geometry import GridGeometry, PoseSE2, SemanticOccupancyGrid
    from occuflow.pipeline.config import RunConfig
    from occuflow.pipeline.model import WorldModel

    geo = GridGeometry((16, 16, 4), (-3.2, -3.2, 0, 3.2, 3.2, 1.6))
    labels = rng(11).integers(0, 4, (16, 16, 4)).astype(np.uint8)
    grids = [SemanticOccupancyGrid(geo, labels)] * 4
    poses = [PoseSE2(0.1 * t, 0, 0) for t in range(4)]
    acts = []
    for variant in ("flow", "vanilla"):
        m = WorldModel(RunConfig(variant=variant, channels=8, warp_channels=8, heads=2, patch=4), geo, 4)
        tok = m.occ_encoder(np.stack([g.labels for g in grids]))
        from occuflow.encoding import ego_displacements

        h = m.encoder(tok, m.ego_encoder(ego_displacements(poses)))
        acts.append(h.data.tobytes())
    assert acts[0] == acts[1]
