import numpy as np
import pytest

from attnpose.gradcheck import check_gradients
from attnpose.geometry import LossWeights, combined_loss, orientation_loss, position_loss
from attnpose.model import (
    Backbone,
    Branch,
    ConfigError,
    ModelConfig,
    TransPoseNet,
    extract_token_attention,
    load_checkpoint,
    save_checkpoint,
)
from attnpose.tensor import ShapeError, Tensor

TINY = ModelConfig(
    input_size=16, backbone_widths=(4, 6, 8, 10), embed_dim=8, n_blocks=2,
    n_heads=2, dropout=0.0, head_hidden=16,
)


def tiny_model(**overrides):
    import dataclasses

    return TransPoseNet(dataclasses.replace(TINY, **overrides))


def rand_image(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((cfg.in_channels, cfg.input_size, cfg.input_size))


# ---- config ------------------------------------------------------------------


def test_config_rejects_indivisible_input():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=100).validate()


def test_config_rejects_bad_routing_and_heads():
    with pytest.raises(ConfigError):
        ModelConfig(position_map="rdct5").validate()
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=256, n_heads=3).validate()


def test_config_json_roundtrip():
    cfg = ModelConfig(input_size=64, embed_dim=32)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def test_config_json_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_json('{"input_size": 64, "bogus": 1}')


# ---- backbone ------------------------------------------------------------------


def test_backbone_shapes_at_224():
    cfg = ModelConfig()
    bb = Backbone(3, cfg.backbone_widths, np.random.default_rng(0))
    m3, m4 = bb(Tensor(np.zeros((3, 224, 224))))
    assert m3.shape == (40, 28, 28)
    assert m4.shape == (112, 14, 14)


def test_backbone_shapes_at_64():
    bb = Backbone(3, (4, 6, 8, 10), np.random.default_rng(1))
    m3, m4 = bb(Tensor(np.zeros((3, 64, 64))))
    assert m3.shape == (8, 8, 8)
    assert m4.shape == (10, 4, 4)


def test_backbone_gradcheck_single_channel():
    bb = Backbone(1, (2, 3, 3, 4), np.random.default_rng(2))
    img = Tensor(np.random.default_rng(3).random((1, 16, 16)), requires_grad=True)
    params = list(bb.named_parameters().values())

    def loss(img, *ps):
        m3, m4 = bb(img)
        return (m3**2).sum() + (m4**2).sum()

    assert check_gradients(loss, [img, *params]) < 1e-4


# ---- sequence conversion ---------------------------------------------------------


def test_sequence_length_and_flat_index():
    cfg = TINY
    branch = Branch((2, 3, 5), cfg, np.random.default_rng(4), out_dim=3)
    m = Tensor(np.random.default_rng(5).random((5, 2, 3)))
    seq, pos = branch.to_sequence(m)
    assert seq.shape == (7, 8) and pos.shape == (7, 8)
    # flat index of cell (i=1, j=0) in a 2x3 map is 1 + 1*3 + 0 = 4
    assert branch._x_index[4] == 0 + 1 and branch._y_index[4] == 1 + 1


def test_sequence_2x2_map_length_five():
    branch = Branch((2, 2, 5), TINY, np.random.default_rng(6), out_dim=3)
    seq, _ = branch.to_sequence(Tensor(np.zeros((5, 2, 2))))
    assert seq.shape[0] == 5


def test_identity_projection_passes_cells_through():
    cfg = TINY  # embed_dim 8
    branch = Branch((2, 2, 8), cfg, np.random.default_rng(7), out_dim=3)
    branch.proj_kernel.data[...] = np.eye(8).reshape(8, 8, 1, 1)
    branch.proj_bias.data[...] = 0.0
    m = np.random.default_rng(8).random((8, 2, 2))
    seq, _ = branch.to_sequence(Tensor(m))
    # cell (i, j) at flat 1 + i*2 + j carries the channel vector of that pixel
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(seq.data[1 + i * 2 + j], m[:, i, j])


def test_positional_encoding_is_bitwise_table_concat():
    branch = Branch((3, 2, 5), TINY, np.random.default_rng(9), out_dim=3)
    _, pos = branch.to_sequence(Tensor(np.zeros((5, 3, 2))))
    half = TINY.embed_dim // 2
    np.testing.assert_array_equal(pos.data[0, :half], branch.table_x.data[0])
    np.testing.assert_array_equal(pos.data[0, half:], branch.table_y.data[0])
    for i in range(3):
        for j in range(2):
            row = pos.data[1 + i * 2 + j]
            np.testing.assert_array_equal(row[:half], branch.table_x.data[j + 1])
            np.testing.assert_array_equal(row[half:], branch.table_y.data[i + 1])
            assert row.shape == (TINY.embed_dim,)


def test_positional_parameter_count_invariant():
    for h, w in [(2, 3), (4, 4), (1, 1)]:
        branch = Branch((h, w, 5), TINY, np.random.default_rng(10), out_dim=3)
        total = branch.table_x.size + branch.table_y.size
        assert total == (h + w + 2) * TINY.embed_dim // 2


# ---- full forward -------------------------------------------------------------------


def test_forward_output_shapes():
    model = tiny_model()
    x, q, attn_x, attn_q = model.forward(rand_image(TINY))
    assert x.shape == (1, 3) and q.shape == (1, 4)
    assert len(attn_x) == TINY.n_blocks and len(attn_q) == TINY.n_blocks


def test_forward_eval_determinism():
    model = tiny_model()
    img = rand_image(TINY, seed=1)
    a = model.forward(img)
    b = model.forward(img)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_forward_rejects_wrong_image_shape():
    model = tiny_model()
    with pytest.raises(ShapeError):
        model.forward(np.zeros((3, 32, 32)))


def test_routing_swap_changes_sequences_not_outputs():
    base = tiny_model()
    swapped = tiny_model(position_map="rdct3", orientation_map="rdct4")
    img = rand_image(TINY, seed=2)
    xb, qb, ab_x, ab_q = base.forward(img)
    xs, qs, as_x, as_q = swapped.forward(img)
    assert xb.shape == xs.shape and qb.shape == qs.shape
    # 16x16 input: rdct3 grid 2x2 (len 5), rdct4 grid 1x1 (len 2)
    assert ab_x[0].shape[-1] == 2 and as_x[0].shape[-1] == 5
    assert ab_q[0].shape[-1] == 5 and as_q[0].shape[-1] == 2


def test_translation_sensitivity():
    model = tiny_model()
    img = rand_image(TINY, seed=3)
    shifted = np.roll(img, 8, axis=-1)  # one rdct3 stride
    x0, q0, *_ = model.forward(img)
    x1, q1, *_ = model.forward(shifted)
    assert np.abs(x0.data - x1.data).max() > 0 or np.abs(q0.data - q1.data).max() > 0


def test_orientation_prior_concats_position_token():
    model = tiny_model(orientation_prior=True)
    assert model.orientation_branch.head.d_in == 2 * TINY.embed_dim
    x, q, *_ = model.forward(rand_image(TINY, seed=4))
    assert q.shape == (1, 4)


def test_end_to_end_gradcheck_subset():
    model = tiny_model()
    img = rand_image(TINY, seed=5)
    weights = LossWeights.from_values(0.2, -1.0)
    gt_x, gt_q = np.array([0.3, -0.2, 0.5]), np.array([0.9486832980505138, 0.0, 0.31622776601683794, 0.0])

    def loss(*ps):
        x, q, *_ = model.forward(img)
        return combined_loss(position_loss(x[0], gt_x), orientation_loss(q[0], gt_q), weights)

    params = model.named_parameters()
    subset = [
        params["position.token"],
        params["orientation.pos_x"],
        params["backbone.stage0.kernel"],
        params["position.head.fc2.bias"],
        params["orientation.encoder.block1.mha.wq.weight"],
        weights.s_x,
        weights.s_q,
    ]
    assert check_gradients(loss, subset) < 1e-4


def test_default_param_count_guard():
    model = TransPoseNet(ModelConfig())
    assert model.param_count == TransPoseNet.DEFAULT_PARAM_COUNT


# ---- token attention extraction --------------------------------------------------------


def test_extract_token_attention_uniform():
    h, w = 3, 4
    length = h * w + 1
    attn = [np.full((2, length, length), 1.0 / length)]
    heat = extract_token_attention(attn, h, w)
    np.testing.assert_allclose(heat, np.full((h, w), 1.0 / (h * w)))


def test_extract_token_attention_normalized_and_shaped():
    rng = np.random.default_rng(11)
    h, w = 14, 14
    length = h * w + 1
    raw = rng.random((4, length, length))
    raw /= raw.sum(axis=-1, keepdims=True)
    heat = extract_token_attention([raw], h, w)
    assert heat.shape == (14, 14)
    assert (heat >= 0).all()
    assert abs(heat.sum() - 1.0) < 1e-9


def test_extract_token_attention_requires_retained_maps():
    with pytest.raises(ValueError):
        extract_token_attention([], 2, 2)


def test_extract_token_attention_picks_layer():
    h = w = 2
    length = 5
    first = np.full((1, length, length), 1.0 / length)
    last = np.zeros((1, length, length))
    last[0, 0] = [0.2, 0.8, 0.0, 0.0, 0.0]
    heat = extract_token_attention([first, last], h, w, layer=-1)
    np.testing.assert_allclose(heat, [[1.0, 0.0], [0.0, 0.0]])


# ---- checkpoints --------------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = tiny_model()
    path = tmp_path / "m.ckpt"
    model.save(path, extra={"loss.s_x": np.array(0.5), "loss.s_q": np.array(-2.0)})
    again, extras = TransPoseNet.load(path)
    for name, t in model.named_parameters().items():
        np.testing.assert_array_equal(t.data, again.named_parameters()[name].data)
    assert extras["loss.s_x"] == 0.5 and extras["loss.s_q"] == -2.0
    # byte-identical on re-save
    path2 = tmp_path / "m2.ckpt"
    again.save(path2, extra=extras)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_preserves_config(tmp_path):
    model = tiny_model(orientation_prior=True)
    path = tmp_path / "m.ckpt"
    model.save(path)
    cfg, _ = load_checkpoint(path)
    assert cfg == model.config
    loaded, _ = TransPoseNet.load(path)
    assert loaded.orientation_branch.head.d_in == 2 * TINY.embed_dim


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


def test_checkpoint_missing_tensor_rejected(tmp_path):
    model = tiny_model()
    tensors = model.state_dict()
    tensors.pop("position.token")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.config, tensors)
    with pytest.raises(ConfigError):
        TransPoseNet.load(path)
