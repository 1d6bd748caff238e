import numpy as np
import pytest

from sketchpatch import nets
from sketchpatch import tensor as T
from sketchpatch.nets import DiscriminatorSpec, GeneratorSpec
from sketchpatch.tensor import Tensor


def zeroed(params):
    for t in params.tensors():
        t.data = np.zeros_like(t.data)
    return params


def op_chain(out: Tensor):
    """Op names from input to output following the first parent of each node."""
    names = []
    node = out
    while node.parents:
        names.append(node.op)
        node = node.parents[0]
    return names[::-1]


@pytest.fixture(scope="module")
def params():
    return nets.init_params(seed=0)


# ---------------------------------------------------------------- generator


def test_generator_shape_contract(params):
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 1, 64, 64)))
    with T.no_grad():
        y = nets.generator_forward(params, x)
    assert y.shape == (2, 1, 64, 64)
    assert np.all(np.abs(y.data) < 1)


def test_generator_zero_params_give_zero_map():
    p = zeroed(nets.init_params(seed=1))
    with T.no_grad():
        y = nets.generator_forward(p, Tensor(np.random.default_rng(1).uniform(-1, 1, (1, 1, 32, 32))))
    assert not y.data.any()


def test_generator_deterministic(params):
    x = Tensor(np.random.default_rng(2).uniform(-1, 1, (1, 1, 32, 32)))
    with T.no_grad():
        a = nets.generator_forward(params, x).data
        b = nets.generator_forward(params, x).data
    np.testing.assert_array_equal(a, b)


def test_generator_is_fully_convolutional(params):
    with T.no_grad():
        y = nets.generator_forward(params, Tensor(np.zeros((1, 1, 128, 128))))
    assert y.shape == (1, 1, 128, 128)


def test_generator_divisibility(params):
    with pytest.raises(T.DimensionError):
        nets.generator_forward(params, Tensor(np.zeros((1, 1, 30, 30))))
    with pytest.raises(T.DimensionError):
        nets.generator_forward(params, Tensor(np.zeros((1, 2, 32, 32))))


def test_generator_layout_matches_desk_spec(params):
    shapes = dict(nets.iter_slot_shapes(params))
    assert shapes["G.in.w"] == (16, 1, 7, 7)
    assert shapes["G.down0.w"] == (32, 16, 3, 3)
    assert shapes["G.down1.w"] == (64, 32, 3, 3)
    assert sum(1 for n in shapes if n.startswith("G.res")) == 6
    assert shapes["G.up0.w"] == (64, 32, 3, 3)
    assert shapes["G.up1.w"] == (32, 16, 3, 3)
    assert shapes["G.out.w"] == (1, 16, 7, 7)


def test_generator_ends_in_tanh_after_reflect_padded_conv(params):
    y = nets.generator_forward(params, Tensor(np.zeros((1, 1, 16, 16)), requires_grad=True))
    chain = op_chain(y)
    assert chain[:2] == ["pad_reflect", "conv2d"]
    assert chain[-3:] == ["pad_reflect", "conv2d", "tanh"]


def test_identity_generator():
    p = nets.init_params(GeneratorSpec(architecture="identity"), seed=0)
    assert not p.names("G.")
    x = np.random.default_rng(3).random((2, 8, 8))
    np.testing.assert_array_equal(nets.translate(p, x), x)


# ---------------------------------------------------------------- discriminator


def test_discriminator_score_map_size(params):
    with T.no_grad():
        s = nets.discriminator_forward(params, Tensor(np.zeros((3, 1, 64, 64))))
    assert s.shape == (3, 1, 6, 6)
    assert DiscriminatorSpec().score_size(64) == 6


def test_score_size_arithmetic():
    # k4 p1: out = floor((n + 2 - 4) / s) + 1
    n = 64
    for s in (2, 2, 2, 1):
        n = (n + 2 - 4) // s + 1
    n = n + 2 - 4 + 1
    assert n == 6


def test_discriminator_zero_params_give_bias_map():
    p = zeroed(nets.init_params(seed=2))
    p["D.out.b"].data = np.array([0.37], dtype=np.float32)
    with T.no_grad():
        s = nets.discriminator_forward(p, Tensor(np.random.default_rng(4).uniform(-1, 1, (2, 1, 64, 64))))
    np.testing.assert_allclose(s.data, 0.37)


def test_discriminator_batch_permutation(params):
    x = np.random.default_rng(5).uniform(-1, 1, (4, 1, 32, 32))
    perm = [2, 0, 3, 1]
    with T.no_grad():
        a = nets.discriminator_forward(params, Tensor(x)).data
        b = nets.discriminator_forward(params, Tensor(x[perm])).data
    np.testing.assert_array_equal(a[perm], b)


def test_discriminator_norm_placement(params):
    s = nets.discriminator_forward(params, Tensor(np.zeros((1, 1, 64, 64)), requires_grad=True))
    chain = op_chain(s)
    assert chain[:2] == ["conv2d", "leaky_relu"]
    assert chain[-1] == "conv2d"
    assert chain.count("instance_norm") == len(params.disc_spec.widths) - 1


# ---------------------------------------------------------------- init


def test_init_reproducible_and_seeded():
    a, b, c = nets.init_params(seed=3), nets.init_params(seed=3), nets.init_params(seed=4)
    assert a.equals(b)
    assert not a.equals(c)


def test_init_statistics(params):
    w = np.concatenate([params[n].data.ravel() for n in params.names() if n.endswith(".w")])
    assert w.size >= 10**4
    assert 0.018 <= w.std() <= 0.022
    for n in params.names():
        if n.endswith(".b"):
            assert not params[n].data.any()


def test_no_bias_before_instance_norm(params):
    biases = [n for n in params.names() if n.endswith(".b")]
    assert biases == ["G.out.b", "D.c0.b", "D.out.b"]


# ---------------------------------------------------------------- mapping and checkpoints


def test_pixel_mapping():
    v = np.array([0.0, 0.25, 1.0])
    np.testing.assert_array_equal(nets.image_to_net(v), [1.0, 0.5, -1.0])
    np.testing.assert_array_equal(nets.net_to_image(nets.image_to_net(v)), v)


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(params, path, extra={"iteration": 5})
    back = nets.load_checkpoint(path)
    assert back.equals(params)
    assert back.gen_spec == params.gen_spec and back.disc_spec == params.disc_spec
    assert back.seed == params.seed
    nets.save_checkpoint(back, tmp_path / "again.ckpt", extra={"iteration": 5})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_payload_is_float32_le(tmp_path):
    p = nets.init_params(GeneratorSpec(base_width=1, res_blocks=0, down_levels=0), DiscriminatorSpec((1,), (1,)), seed=0)
    path = tmp_path / "tiny.ckpt"
    nets.save_checkpoint(p, path)
    n = sum(t.size for t in p.tensors())
    raw = np.frombuffer(path.read_bytes()[-4 * n:], dtype="<f4")
    np.testing.assert_array_equal(raw, np.concatenate([t.data.ravel() for t in p.tensors()]))


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "header"])
def test_checkpoint_corruption(tmp_path, params, damage):
    path = tmp_path / "m.ckpt"
    nets.save_checkpoint(params, path)
    data = path.read_bytes()
    if damage == "magic":
        data = b"XX" + data[2:]
    elif damage == "truncate":
        data = data[:-10]
    elif damage == "trailing":
        data = data + b"\0\0\0\0"
    else:
        data = data[:20] + b"{" + data[21:]
    path.write_bytes(data)
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(path)
