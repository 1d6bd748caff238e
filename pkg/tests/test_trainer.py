import numpy as np
import pytest

from sketchpatch import hybrid, image, nets, patches, synth, trainer
from sketchpatch import tensor as T
from sketchpatch.tensor import Tensor
from sketchpatch.trainer import TrainConfig


def const_net(value):
    """A stub network whose output is ``value`` everywhere but still depends on its input."""
    return lambda x: T.add(T.mul(x, 0.0), float(value))


def tiny_config(**kw):
    base = dict(batch_size=2, iterations=3, patch_size=16, delta=2, base_width=4, res_blocks=1, down_levels=1)
    base.update(kw)
    return TrainConfig(**base)


TINY_DISC = nets.DiscriminatorSpec((4, 8), (2, 1))


@pytest.fixture(scope="module")
def tiny_dataset():
    plain = synth.synth_sketch(48, seed=2, stroke=2, shapes=4)
    styled = synth.synth_style(plain, synth.StyleSpec("stripes", 4, 0, 2))
    return patches.mine_dataset([("tiny", plain, styled)], 16, 90, 8)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    plain = rng.random((3, 16, 16))
    styled = rng.random((3, 16, 16))
    return plain, styled, hybrid.sample_masks(3, 16, 2, rng)


# ---------------------------------------------------------------- generator loss


def test_perfect_generator_and_fooled_discriminator_give_zero(batch):
    plain, styled, masks = batch
    target = Tensor(nets.image_to_net(styled)[:, None])
    loss, parts = trainer.generator_loss(None, const_net(1.0), plain, styled, masks, fake=target)
    assert loss.item() == 0.0
    assert parts == {"l1": 0.0, "adv_g": 0.0, "shape": 0.0}


def test_zero_discriminator_gives_unit_adversarial_term(batch):
    plain, styled, masks = batch
    G = lambda x: T.tanh(x)  # noqa: E731
    _, parts = trainer.generator_loss(G, const_net(0.0), plain, styled, masks)
    assert parts["adv_g"] == 1.0


def _numpy_generator_loss(plain, styled, masks):
    """Straight-line recomputation with G = tanh(0.8 h) and D = tanh(0.5 x) applied pixelwise."""
    h = np.stack([hybrid.compose(plain[i], styled[i], hybrid.HybridMask(*masks[i])) for i in range(len(plain))])
    s = 1.0 - 2.0 * styled
    fake = np.tanh(0.8 * (1.0 - 2.0 * h))
    l1 = np.abs(fake - s).mean()
    adv = ((np.tanh(0.5 * fake) - 1.0) ** 2).mean()
    k = image.gaussian_kernel1d()
    off = np.arange(10) - 5

    def blur(a):
        n = a.shape[0]
        out = np.zeros_like(a)
        for y in range(n):
            for x in range(n):
                ys, xs = np.clip(y + off, 0, n - 1), np.clip(x + off, 0, n - 1)
                out[y, x] = (np.outer(k, k) * a[np.ix_(ys, xs)]).sum()
        return out

    shape = np.mean([np.abs(blur(f) - blur(t)).mean() for f, t in zip(fake, s)])
    return l1 + adv + shape, (l1, adv, shape)


def test_generator_loss_matches_recomputation(batch):
    plain, styled, masks = batch
    G = lambda x: T.tanh(T.mul(x, 0.8))  # noqa: E731
    D = lambda x: T.tanh(T.mul(x, 0.5))  # noqa: E731
    with T.precision(np.float64):
        loss, parts = trainer.generator_loss(G, D, plain, styled, masks)
    expect, (l1, adv, shape) = _numpy_generator_loss(plain, styled, masks)
    assert loss.item() == pytest.approx(expect, rel=1e-10)
    assert parts["l1"] == pytest.approx(l1, rel=1e-10)
    assert parts["adv_g"] == pytest.approx(adv, rel=1e-10)
    assert parts["shape"] == pytest.approx(shape, rel=1e-10)


def test_generator_loss_toggles(batch):
    plain, styled, masks = batch
    G = lambda x: T.tanh(x)  # noqa: E731
    _, parts = trainer.generator_loss(G, None, plain, styled, masks, adversarial=False, shape=False)
    assert parts["adv_g"] is None and parts["shape"] is None
    _, parts = trainer.generator_loss(G, const_net(0.3), plain, styled, masks, adversarial=True, shape=False)
    assert parts["shape"] is None and parts["adv_g"] is not None


def test_generator_loss_shape_mismatch(batch):
    plain, styled, masks = batch
    with pytest.raises(T.DimensionError):
        trainer.generator_loss(T.tanh, None, plain, styled[:2], masks)
    with pytest.raises(T.DimensionError):
        trainer.generator_loss(lambda x: Tensor(np.zeros((3, 1, 8, 8))), None, plain, styled, masks)


def test_generator_loss_rejects_non_finite(batch):
    plain, styled, masks = batch
    fake = Tensor(np.full((3, 1, 16, 16), np.inf), requires_grad=True)
    with pytest.raises(T.NumericError):
        trainer.generator_loss(None, None, plain, styled, masks, adversarial=False, shape=False, fake=fake)


# ---------------------------------------------------------------- discriminator loss


@pytest.mark.parametrize(
    "real_value, fake_value, expect",
    [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.5, 0.5, 0.5)],
)
def test_discriminator_loss_constant_maps(real_value, fake_value, expect):
    real = Tensor(np.full((2, 1, 8, 8), 1.0))
    fake = Tensor(np.full((2, 1, 8, 8), -1.0))
    D = lambda x: T.add(T.mul(x, 0.0), real_value if x.data[0, 0, 0, 0] > 0 else fake_value)  # noqa: E731
    loss, parts = trainer.discriminator_loss(D, fake, real)
    assert loss.item() == expect
    assert parts["d_real"] == (real_value - 1.0) ** 2
    assert parts["d_fake"] == fake_value ** 2


def test_discriminator_loss_leaves_generator_gradients_zero():
    params = nets.init_params(nets.GeneratorSpec(4, 1, 1), nets.DiscriminatorSpec((4, 8), (2, 1)), seed=0)
    params.zero_grad()
    rng = np.random.default_rng(1)
    fake = nets.generator_forward(params, Tensor(rng.uniform(-1, 1, (2, 1, 16, 16))))
    real = Tensor(rng.uniform(-1, 1, (2, 1, 16, 16)))
    loss, _ = trainer.discriminator_loss(lambda x: nets.discriminator_forward(params, x), fake, real)
    T.backward(loss)
    for name in params.names("G."):
        assert not params[name].grad.any(), name
    assert any(params[n].grad.any() for n in params.names("D."))


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_leaves_params_and_decays_moments():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = trainer.AdamState(step=1, m={"w": np.array([0.4, 0.4])}, v={"w": np.array([0.1, 0.1])})
    before = p["w"].data.copy()
    trainer.adam_step(p, {"w": np.zeros(2)}, state, lr=0.0)
    np.testing.assert_array_equal(p["w"].data, before)
    np.testing.assert_allclose(state.m["w"], 0.2)
    np.testing.assert_allclose(state.v["w"], 0.0999)


def test_adam_zero_gradient_from_zero_state_is_a_no_op():
    p = {"w": Tensor(np.array([0.5, 3.0]), requires_grad=True)}
    state = trainer.adam_step(p, {"w": np.zeros(2)}, trainer.AdamState())
    np.testing.assert_array_equal(p["w"].data, [0.5, 3.0])
    assert state.step == 1


def test_adam_first_step_closed_form():
    with T.precision(np.float64):
        g = np.array([0.3, -2.0, 1e-9, 0.0])
        p = {"w": Tensor(np.zeros(4), requires_grad=True)}
        trainer.adam_step(p, {"w": g}, trainer.AdamState(), lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8)
    # bias correction makes m_hat = g and v_hat = g^2 on the first step
    np.testing.assert_allclose(p["w"].data, -2e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=0)


def test_adam_identical_gradients_identical_updates():
    p = {"a": Tensor(np.ones(3), requires_grad=True), "b": Tensor(np.ones(3), requires_grad=True)}
    state = trainer.AdamState()
    g = np.array([0.1, -0.2, 0.3])
    for _ in range(4):
        trainer.adam_step(p, {"a": g, "b": g.copy()}, state)
    np.testing.assert_array_equal(p["a"].data, p["b"].data)
    assert not np.array_equal(p["a"].data, np.ones(3))


# ---------------------------------------------------------------- training loop


def test_zero_iterations_returns_initial_params(tiny_dataset):
    cfg = tiny_config(iterations=0, seed=5)
    result = trainer.train(tiny_dataset, cfg, TINY_DISC)
    with T.precision(np.float32):
        ref = nets.init_params(cfg.gen_spec, TINY_DISC, seed=trainer.derive_seeds(5)[0])
    assert result.params.equals(ref)
    assert result.trace == []


def test_same_seed_identical_runs(tiny_dataset):
    a = trainer.train(tiny_dataset, tiny_config(seed=3), TINY_DISC)
    b = trainer.train(tiny_dataset, tiny_config(seed=3), TINY_DISC)
    c = trainer.train(tiny_dataset, tiny_config(seed=4), TINY_DISC)
    assert a.trace == b.trace
    assert a.params.equals(b.params)
    assert a.trace != c.trace


def test_derived_seeds_are_distinct_and_stable():
    assert trainer.derive_seeds(0) == trainer.derive_seeds(0)
    init, data = trainer.derive_seeds(0)
    assert init != data
    assert trainer.derive_seeds(1) != (init, data)


@pytest.mark.parametrize("adversarial", [False, True])
@pytest.mark.parametrize("shape", [False, True])
def test_ablation_toggles_shape_the_trace(tiny_dataset, adversarial, shape):
    cfg = tiny_config(adversarial=adversarial, shape=shape)
    result = trainer.train(tiny_dataset, cfg, TINY_DISC)
    assert len(result.trace) == cfg.iterations
    for row in result.trace:
        assert (row["adv_g"] is not None) == adversarial
        assert (row["d_real"] is not None) == adversarial
        assert (row["shape"] is not None) == shape
        for key in ("l1", "adv_g", "shape", "d_real", "d_fake"):
            assert row[key] is None or row[key] >= 0.0
    assert cfg.variant == "+".join(["l1"] + ["adv"] * adversarial + ["shape"] * shape)


def test_training_updates_parameters(tiny_dataset):
    cfg = tiny_config(seed=1)
    result = trainer.train(tiny_dataset, cfg, TINY_DISC)
    with T.precision(np.float32):
        ref = nets.init_params(cfg.gen_spec, TINY_DISC, seed=trainer.derive_seeds(1)[0])
    for name in ref.names():
        assert not np.array_equal(result.params[name].data, ref[name].data), name
    assert all(t.data.dtype == np.float32 for t in result.params.tensors())


def test_without_adversary_discriminator_is_untouched(tiny_dataset):
    cfg = tiny_config(adversarial=False, seed=2)
    result = trainer.train(tiny_dataset, cfg, TINY_DISC)
    with T.precision(np.float32):
        ref = nets.init_params(cfg.gen_spec, TINY_DISC, seed=trainer.derive_seeds(2)[0])
    for name in ref.names("D."):
        np.testing.assert_array_equal(result.params[name].data, ref[name].data)


def test_identity_generator_trains_only_the_discriminator(tiny_dataset):
    result = trainer.train(tiny_dataset, tiny_config(generator="identity"), TINY_DISC)
    assert not result.params.names("G.")
    assert len(result.trace) == 3


def test_divergence_dumps_the_batch(tiny_dataset, tmp_path, monkeypatch):
    def exploding(*args, **kwargs):
        raise T.NumericError("generator loss is not finite")

    monkeypatch.setattr(trainer, "generator_loss", exploding)
    with pytest.raises(trainer.TrainingDivergedError, match="iteration 0"):
        trainer.train(tiny_dataset, tiny_config(out_dir=str(tmp_path)), TINY_DISC)
    dump = np.load(tmp_path / "diverged_iter000000.npz")
    assert dump["plain"].shape == (2, 16, 16)
    assert dump["masks"].shape == (2, 4)


def test_checkpoint_cadence(tiny_dataset, tmp_path):
    cfg = tiny_config(iterations=5, checkpoint_every=2, out_dir=str(tmp_path))
    result = trainer.train(tiny_dataset, cfg, TINY_DISC)
    assert [p.name for p in result.checkpoints] == ["checkpoint_000002.ckpt", "checkpoint_000004.ckpt"]
    assert nets.load_checkpoint(result.checkpoints[-1]).gen_spec == cfg.gen_spec


def test_dataset_patch_size_must_match(tiny_dataset):
    with pytest.raises(ValueError):
        trainer.train(tiny_dataset, tiny_config(patch_size=32), TINY_DISC)


# ---------------------------------------------------------------- config and trace files


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    assert TrainConfig().variant == "l1+adv+shape"


def test_config_text_round_trip():
    cfg = TrainConfig(iterations=17, lr=1e-3, shape=False, out_dir="runs/a")
    back = trainer.config_from_mapping(trainer.parse_config_text(cfg.to_text()))
    assert back == cfg


def test_config_rejects_unknown_and_malformed():
    with pytest.raises(ValueError, match="unknown config key"):
        trainer.config_from_mapping({"learning_rate": "0.1"})
    with pytest.raises(ValueError):
        trainer.parse_config_text("iterations 10")
    with pytest.raises(ValueError):
        trainer.config_from_mapping({"shape": "maybe"})
    assert trainer.parse_config_text("# comment\n\niterations = 4  # inline\n") == {"iterations": "4"}


def test_trace_csv_round_trip(tmp_path):
    rows = [
        {"iteration": 0, "l1": 0.5, "adv_g": None, "shape": 0.125, "d_real": None, "d_fake": None},
        {"iteration": 1, "l1": 0.1 + 0.2, "adv_g": 1e-9, "shape": 0.0, "d_real": 0.25, "d_fake": 0.75},
    ]
    path = tmp_path / "trace.csv"
    trainer.write_trace(rows, path)
    assert trainer.read_trace(path) == rows
    assert path.read_text().splitlines()[0] == ",".join(trainer.TRACE_COLUMNS)
    assert trainer.total_loss(rows[0]) == 0.625


# ---------------------------------------------------------------- desk-scale property


DESCENT_WINDOW = 200
DESCENT_STEP = 10
DESCENT_EDGE = 50  # iterations averaged at each end of a window


@pytest.mark.slow
def test_without_adversary_loss_descends_in_most_windows(ablation_runs):
    """Per-batch losses are noisy, so each 200-iteration window compares the
    mean of its first 50 iterations with the mean of its last 50."""
    trace = ablation_runs["l1+shape"].trace
    total = np.array([trainer.total_loss(row) for row in trace])
    starts = range(0, len(total) - DESCENT_WINDOW + 1, DESCENT_STEP)
    down = [
        total[s + DESCENT_WINDOW - DESCENT_EDGE:s + DESCENT_WINDOW].mean() <= total[s:s + DESCENT_EDGE].mean()
        for s in starts
    ]
    assert len(down) >= 30
    assert np.mean(down) >= 0.9
