import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from virtualstain.engine import ShapeError, Tensor
from virtualstain.nets import (
    CheckpointFormatError,
    ConditionError,
    DiscriminatorConfig,
    GeneratorConfig,
    build_conditional_virtual_stainer,
    build_cycle_pair,
    build_discriminator,
    build_generator,
    dumps_networks,
    loads_networks,
    load_network,
    make_condition_matrix,
    save_network,
)


def down_widths(net):
    return [net.params[f"down{k}.conv2.weight"].data.shape[0] for k in range(net.config.depth)]


def test_paper_generator_widths():
    net = build_generator(GeneratorConfig())
    assert down_widths(net) == [32, 64, 128, 256]
    assert net.params["final.weight"].data.shape[0] == 3


def test_desk_generator_widths():
    assert down_widths(build_generator(GeneratorConfig(base_width=8))) == [8, 16, 32, 64]


@given(st.integers(1, 6), st.integers(1, 40))
def test_channel_schedule_doubles(depth, base):
    cfg = GeneratorConfig(depth=depth, base_width=base)
    assert cfg.widths == [base * 2 ** (k - 1) for k in range(1, depth + 1)]


def test_condition_channels_widen_first_layer():
    net = build_generator(GeneratorConfig(base_width=4, in_channels=2, condition_classes=2))
    assert net.params["down0.conv0.weight"].data.shape[1] == 4


def test_generator_layers_have_three_convs_per_block():
    net = build_generator(GeneratorConfig(depth=4, base_width=4))
    for side in ("down", "up"):
        for k in range(4):
            assert [f"{side}{k}.conv{j}.weight" in net.params for j in range(4)] == [True, True, True, False]


def test_paper_generator_parameter_count():
    # closed form, written independently of the layout code
    b, depth, cin, cout = 32, 4, 3, 3
    w = [b * 2**k for k in range(depth)]
    conv = lambda i, o: 9 * i * o + o
    down = sum(conv(cin if k == 0 else w[k - 1], w[k]) + 2 * conv(w[k], w[k]) for k in range(depth))
    up = sum(conv(w[min(k + 1, depth - 1)] + w[k], w[k]) + 2 * conv(w[k], w[k]) for k in range(depth))
    expected = down + up + conv(w[0], cout)
    assert build_generator(GeneratorConfig()).num_parameters() == expected == 5_285_379


def test_paper_generator_preserves_size():
    net = build_generator(GeneratorConfig())
    x = np.random.default_rng(0).uniform(size=(1, 3, 256, 256)).astype(np.float32)
    assert net(x).shape == (1, 3, 256, 256)


def test_desk_conditional_forward_shape():
    g, _ = build_conditional_virtual_stainer(GeneratorConfig(base_width=4, in_channels=2, condition_classes=2))
    x = np.zeros((1, 2, 64, 64), np.float32)
    assert g(x, make_condition_matrix(1, 2, 64, 64)).shape == (1, 3, 64, 64)


def test_generator_rejects_indivisible_input():
    net = build_generator(GeneratorConfig(base_width=2))
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 100, 100), np.float32))


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_shape_round_trip(depth, mh, mw):
    net = build_generator(GeneratorConfig(depth=depth, base_width=2))
    d = 2**depth
    x = np.zeros((2, 3, d * mh, d * mw), np.float32)
    assert net(x).shape == (2, 3, d * mh, d * mw)


def test_condition_errors():
    net = build_generator(GeneratorConfig(depth=1, base_width=2, condition_classes=2))
    x = np.zeros((1, 3, 4, 4), np.float32)
    with pytest.raises(ConditionError):
        net(x)
    with pytest.raises(ConditionError):
        net(x, make_condition_matrix(0, 2, 8, 8))
    plain = build_generator(GeneratorConfig(depth=1, base_width=2))
    with pytest.raises(ConditionError):
        plain(x, make_condition_matrix(0, 2, 4, 4))


# ---------------------------------------------------------------- discriminator


def test_paper_discriminator_reduces_to_8():
    cfg = DiscriminatorConfig(blocks=5, input_size=(256, 256))
    assert cfg.feature_size == (8, 8)
    net = build_discriminator(cfg)
    assert net.params["dense0.weight"].data.shape == (128, 512 * 8 * 8)
    assert net.params["dense1.weight"].data.shape == (1, 128)


def test_four_block_discriminator_on_64():
    assert DiscriminatorConfig(blocks=4, input_size=(64, 64)).feature_size == (4, 4)


def test_discriminator_input_divisibility():
    # 96 = 3 * 32 is a valid five-block input; 100 is not
    assert DiscriminatorConfig(blocks=5, input_size=(96, 96)).feature_size == (3, 3)
    with pytest.raises(ValueError):
        DiscriminatorConfig(blocks=5, input_size=(100, 100))


def test_discriminator_probabilities():
    net = build_discriminator(DiscriminatorConfig(blocks=4, base_width=4, input_size=(32, 32)))
    x = np.random.default_rng(0).uniform(size=(6, 3, 32, 32)).astype(np.float32)
    p = net(x).data
    assert p.shape == (6,)
    assert np.all((p > 0) & (p < 1))
    np.testing.assert_array_equal(net(x).data, p)
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 64, 64), np.float32))


def test_conditional_discriminator_takes_condition():
    _, d = build_conditional_virtual_stainer(
        GeneratorConfig(base_width=2, condition_classes=2),
        DiscriminatorConfig(blocks=2, base_width=2, input_size=(8, 8)),
    )
    assert d.params["block0.conv0.weight"].data.shape[1] == 5
    assert d(np.zeros((1, 3, 8, 8), np.float32), make_condition_matrix(0, 2, 8, 8)).shape == (1,)


# ---------------------------------------------------------------- conditional and cycle


def test_conditional_width_doubling():
    g, _ = build_conditional_virtual_stainer(GeneratorConfig(condition_classes=2))
    assert down_widths(g) == [64, 128, 256, 512]
    g, _ = build_conditional_virtual_stainer(GeneratorConfig(base_width=4, condition_classes=2))
    assert down_widths(g) == [8, 16, 32, 64]


def test_conditional_needs_two_classes():
    with pytest.raises(ConditionError):
        build_conditional_virtual_stainer(GeneratorConfig(condition_classes=3))


def test_two_classes_give_two_images():
    g, _ = build_conditional_virtual_stainer(GeneratorConfig(depth=2, base_width=2, in_channels=2, condition_classes=2))
    x = np.random.default_rng(0).uniform(size=(1, 2, 8, 8)).astype(np.float32)
    a = g(x, make_condition_matrix(0, 2, 8, 8)).data
    b = g(x, make_condition_matrix(1, 2, 8, 8)).data
    assert np.abs(a - b).mean() > 0


def test_cycle_pair_shapes():
    G, F, DX, DY = build_cycle_pair()
    assert down_widths(G) == [32, 64, 128] == down_widths(F)
    assert G.config.divisor == 8
    for d in (DX, DY):
        assert d.config.blocks == 4
    _, _, dx, _ = build_cycle_pair(base_width=2, input_size=(64, 64))
    assert dx.config.feature_size == (4, 4)


# ---------------------------------------------------------------- condition matrix


def test_condition_matrix():
    c = make_condition_matrix(0, 2, 4, 4)
    assert c.shape == (1, 2, 4, 4)
    np.testing.assert_array_equal(c[0, 0], 1)
    np.testing.assert_array_equal(c[0, 1], 0)
    with pytest.raises(ConditionError):
        make_condition_matrix(2, 2, 4, 4)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=5), st.integers(1, 6), st.integers(1, 6))
def test_condition_matrix_is_one_hot(classes, h, w):
    c = make_condition_matrix(classes, 4, h, w)
    assert set(np.unique(c)) <= {0.0, 1.0}
    np.testing.assert_array_equal(c.sum(axis=1), 1)
    for i, k in enumerate(classes):
        np.testing.assert_array_equal(c[i, k], 1)


# ---------------------------------------------------------------- checkpoints


def test_serialization_round_trip_is_bit_exact(tmp_path):
    g = build_generator(GeneratorConfig(depth=2, base_width=3), seed=5)
    d = build_discriminator(DiscriminatorConfig(blocks=2, base_width=2, input_size=(8, 8)), seed=6)
    for p in g.parameters():
        p.m1 += 0.5
        p.step_count = 7
    nets, meta = loads_networks(dumps_networks({"G": g, "D": d}, {"note": "x"}))
    assert meta == {"note": "x"}
    x = np.random.default_rng(0).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    assert nets["G"](x).data.tobytes() == g(x).data.tobytes()
    assert nets["D"](x).data.tobytes() == d(x).data.tobytes()
    for k, p in g.params.items():
        q = nets["G"].params[k]
        assert q.m1.tobytes() == p.m1.tobytes() and q.step_count == 7
    save_network(tmp_path / "g.ckpt", g)
    assert load_network(tmp_path / "g.ckpt")(x).data.tobytes() == g(x).data.tobytes()


def test_checkpoint_validation():
    blob = dumps_networks({"G": build_generator(GeneratorConfig(depth=1, base_width=2))})
    with pytest.raises(CheckpointFormatError):
        loads_networks(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointFormatError):
        loads_networks(blob[:-4])
    with pytest.raises(CheckpointFormatError):
        loads_networks(blob + b"\0")
    tampered = blob.replace(b'"base_width": 2', b'"base_width": 3')
    with pytest.raises(CheckpointFormatError):
        loads_networks(tampered)


def test_tensors_are_not_mutated_by_forward():
    net = build_generator(GeneratorConfig(depth=2, base_width=2))
    x = np.random.default_rng(1).uniform(size=(1, 3, 8, 8)).astype(np.float32)
    before = x.copy()
    net(Tensor(x))
    np.testing.assert_array_equal(x, before)
