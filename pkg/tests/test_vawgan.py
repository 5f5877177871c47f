import numpy as np
import numpy.testing as npt
import pytest

from core.errors import (
    BatchTooSmallError,
    ConditioningError,
    EmptyBatchError,
    InvalidParameterError,
    ShapeMismatchError,
)
from core.neuro import ParameterStore, gradient_check
from core.vawgan import (
    ModelConfig,
    TrainBatch,
    TrainConfig,
    VawGan,
    build_condition,
    build_encoder,
    build_generator,
    clip_weights,
    kl_loss,
    recon_loss,
    train_step,
    validate_one_hot,
    wgan_losses,
)


def _one_hot(index: int, rows: int = 1) -> np.ndarray:
    emotion = np.zeros((rows, 10))
    emotion[:, index] = 1.0
    return emotion


@pytest.fixture(scope="module")
def full_size():
    return VawGan(ModelConfig(), seed=0)


@pytest.fixture
def small_cfg():
    return ModelConfig().reduced(feature_dim=32)


def test_condition_widths():
    assert ModelConfig().condition_width == 139
    assert ModelConfig(use_f0_condition=False).condition_width == 138
    assert ModelConfig().seed_length == 19


def test_unknown_width_rejected():
    with pytest.raises(ConditioningError):
        VawGan(ModelConfig(latent_dim=64).reduced())


def test_full_size_shapes(full_size, rng):
    frames = rng.standard_normal((2, 513))
    code = full_size.encode(frames)
    assert code.mu.shape == code.logvar.shape == (2, 128)
    npt.assert_array_equal(code.z, code.mu)
    out = full_size.decode(code.mu, _one_hot(1, 2), np.array([0.3, -0.2]))
    assert out.shape == (2, 513)
    assert full_size.discriminate(frames).shape == (2,)


def test_critic_is_clipped_at_init(full_size):
    for _, param in full_size.discriminator.store.items():
        assert np.max(np.abs(param.value)) <= 0.01


def test_wrong_frame_width(full_size):
    with pytest.raises(ShapeMismatchError):
        full_size.encode(np.zeros((1, 512)))


@pytest.mark.parametrize("emotion", [
    np.zeros((1, 9)),
    np.array([[1.0, 1.0] + [0.0] * 8]),
    np.array([[0.5] + [0.0] * 9]),
    np.zeros((1, 10)),
])
def test_one_hot_validation(emotion):
    with pytest.raises(ConditioningError):
        validate_one_hot(emotion)


def test_build_condition():
    cond = build_condition(_one_hot(3, 4), np.arange(4.0))
    assert cond.shape == (4, 11)
    npt.assert_array_equal(cond[:, 10], np.arange(4.0))
    with pytest.raises(ConditioningError):
        build_condition(_one_hot(3, 4), np.arange(3.0))


def test_f0_condition_presence(small_cfg, rng):
    spectrum = VawGan(small_cfg)
    prosody = VawGan(ModelConfig(feature_dim=32, use_f0_condition=False).reduced(feature_dim=32))
    z = rng.standard_normal((3, 128))
    with pytest.raises(ConditioningError):
        spectrum.decode(z, _one_hot(0))
    with pytest.raises(ConditioningError):
        prosody.decode(z, _one_hot(0), np.zeros(3))
    # a single emotion row broadcasts over the batch
    assert prosody.decode(z, _one_hot(0)).shape == (3, 32)


def test_kl_loss_values():
    assert kl_loss(np.zeros(128), np.zeros(128)) == 0.0
    assert kl_loss(np.array([1.0, 2.0]), np.zeros(2)) == pytest.approx(2.5)
    batch = kl_loss(np.array([[1.0, 2.0], [0.0, 0.0]]), np.zeros((2, 2)))
    assert batch == pytest.approx(1.25)
    assert kl_loss(np.zeros(1), np.array([1.0])) == pytest.approx(0.5 * (np.e - 2.0))


def test_recon_loss():
    x = np.arange(6.0).reshape(2, 3)
    assert recon_loss(x, x) == 0.0
    assert recon_loss(x, x + 2.0) == pytest.approx(4.0)
    with pytest.raises(EmptyBatchError):
        recon_loss(np.zeros((0, 3)), np.zeros((0, 3)))


def test_wgan_losses():
    d_loss, g_adv = wgan_losses(np.array([1.0, 1.0]), np.array([0.0, 0.0]))
    assert d_loss == -1.0
    assert g_adv == 0.0
    with pytest.raises(EmptyBatchError):
        wgan_losses(np.zeros(0), np.zeros(2))


def test_train_config():
    assert TrainConfig(steps=None, batch=256, epochs=45).total_steps(1000) == 180
    assert TrainConfig(steps=600).total_steps(10) == 600
    with pytest.raises(InvalidParameterError):
        TrainConfig(lr=-1.0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(rmsprop_decay=1.0)


def test_model_config_from_mapping():
    cfg = ModelConfig.from_mapping({"encoder_channels": [4, 8], "feature_dim": 64, "extra": 1})
    assert cfg.encoder_channels == (4, 8)
    assert cfg.feature_dim == 64


def test_network_gradients(small_cfg, rng):
    encoder = build_encoder(small_cfg, np.random.default_rng(1))
    report = gradient_check(encoder, rng.standard_normal((3, 32)), max_entries=12)
    assert report.passed, report.errors

    generator = build_generator(small_cfg, np.random.default_rng(2))
    cond = np.concatenate([rng.standard_normal((3, 128)), _one_hot(2, 3), np.ones((3, 1))], axis=1)
    report = gradient_check(generator, cond, max_entries=12)
    assert report.passed, report.errors


def test_same_seed_same_weights(small_cfg):
    a = VawGan(small_cfg, seed=5).to_arrays()
    b = VawGan(small_cfg, seed=5).to_arrays()
    assert a.keys() == b.keys()
    for key in a:
        npt.assert_array_equal(a[key], b[key])


def test_weights_round_trip(small_cfg, rng):
    source = VawGan(small_cfg, seed=1)
    copy = VawGan(small_cfg, seed=2)
    copy.load_arrays(source.to_arrays())
    frames = rng.standard_normal((4, 32))
    f0 = rng.standard_normal(4)
    npt.assert_array_equal(copy.convert(frames, _one_hot(1), f0), source.convert(frames, _one_hot(1), f0))


def test_train_step_rejects_single_frame(small_cfg):
    batch = TrainBatch(np.zeros((1, 32)), _one_hot(0), np.zeros(1))
    with pytest.raises(BatchTooSmallError):
        train_step(batch, VawGan(small_cfg), TrainConfig(), np.random.default_rng(0))


def test_training_reduces_reconstruction(small_cfg):
    rng = np.random.default_rng(4)
    nets = VawGan(small_cfg, seed=4)
    cfg = TrainConfig(lr=5e-3, n_critic=2, lambda_adv=0.0, lambda_kl=0.01)
    base = -2.0 + 0.5 * np.sin(np.linspace(0, 3, 32))
    frames = base + 0.05 * rng.standard_normal((8, 32))
    emotions = _one_hot(1, 8)
    f0 = rng.standard_normal(8)

    def deterministic_recon():
        return recon_loss(frames, nets.convert(frames, emotions, f0))

    before = deterministic_recon()
    reports = [train_step(TrainBatch(frames, emotions, f0), nets, cfg, rng) for _ in range(30)]
    assert all(np.isfinite(r.total) for r in reports)
    assert deterministic_recon() < before
    for _, param in nets.discriminator.store.items():
        assert np.max(np.abs(param.value)) <= cfg.clip_c


def test_loss_report_fields(small_cfg):
    rng = np.random.default_rng(0)
    nets = VawGan(small_cfg)
    cfg = TrainConfig(lr=1e-4, n_critic=1)
    batch = TrainBatch(rng.standard_normal((4, 32)), _one_hot(0, 4), np.zeros(4))
    report = train_step(batch, nets, cfg, rng)
    values = report.as_dict()
    assert set(values) == {"recon", "kl", "g_adv", "d_loss", "total"}
    assert values["total"] == pytest.approx(report.recon + cfg.lambda_kl * report.kl + report.g_adv)


def test_clip_weights_clamps_in_place():
    store = ParameterStore()
    param = store.add("w", np.array([-0.5, -0.004, 0.0, 0.02, 3.0]))
    clip_weights(store, 0.01)
    npt.assert_array_equal(param.value, [-0.01, -0.004, 0.0, 0.01, 0.01])


def _step_batch(rng, rows: int = 4) -> TrainBatch:
    return TrainBatch(rng.standard_normal((rows, 32)), _one_hot(2, rows), rng.standard_normal(rows))


def _weights(nets: VawGan) -> dict:
    return {name: param.value.copy() for store in nets.stores for name, param in store.items()}


def test_train_step_with_zero_lr_keeps_parameters(small_cfg):
    rng = np.random.default_rng(3)
    nets = VawGan(small_cfg, seed=3)
    before = _weights(nets)
    train_step(_step_batch(rng), nets, TrainConfig(lr=0.0, n_critic=1), rng)
    after = _weights(nets)
    assert after.keys() == before.keys()
    for name, value in before.items():
        npt.assert_array_equal(after[name], value)


def test_train_step_with_positive_lr_moves_parameters(small_cfg):
    rng = np.random.default_rng(3)
    nets = VawGan(small_cfg, seed=3)
    before = _weights(nets)
    train_step(_step_batch(rng), nets, TrainConfig(lr=1e-3, n_critic=1), rng)
    after = _weights(nets)
    changed = {name for name, value in before.items() if not np.array_equal(after[name], value)}
    assert any(name.startswith("critic.") for name in changed)
    assert any(not name.startswith("critic.") for name in changed)


def test_discriminate_zero_weights_returns_bias(small_cfg, rng):
    nets = VawGan(small_cfg, seed=5)
    for _, param in nets.discriminator.store.items():
        param.value[...] = 0.0
    nets.discriminator.store["critic.dense.bias"].value[...] = 0.37
    scores = nets.discriminate(rng.standard_normal((5, 32)))
    npt.assert_array_equal(scores, np.full(5, 0.37))


def test_discriminate_depends_on_input(small_cfg, rng):
    nets = VawGan(small_cfg, seed=5)
    frames = rng.standard_normal((3, 32))
    base = nets.discriminate(frames)
    shifted = frames.copy()
    shifted[1] += rng.standard_normal(32)
    scores = nets.discriminate(shifted)
    assert scores[1] != base[1]
    npt.assert_array_equal(scores[[0, 2]], base[[0, 2]])


def test_kl_loss_unit_mean_over_latent_width():
    assert kl_loss(np.ones(128), np.zeros(128)) == pytest.approx(64.0)


def test_kl_loss_matches_sampled_estimate():
    rng = np.random.default_rng(11)
    mu = np.array([0.3, -1.2, 0.0])
    logvar = np.log(np.array([0.5, 2.0, 1.3]))
    sigma = np.exp(0.5 * logvar)
    eps = rng.standard_normal((1_000_000, 3))
    z = mu + sigma * eps
    # log q(z) - log p(z), constants cancel
    log_ratio = -0.5 * logvar - 0.5 * eps ** 2 + 0.5 * z ** 2
    estimate = log_ratio.sum(axis=1).mean()
    assert kl_loss(mu, logvar) == pytest.approx(estimate, rel=2e-2)
