"""Optimizer, scheduler, and training-loop behavior."""

import math

import numpy as np
import pytest

from oximap.dataset import Dataset
from oximap.errors import ConfigError, TrainingError
from oximap.network import LayerSpec, Network
from oximap.rng import substream
from oximap.training import (
    Adam,
    PlateauScheduler,
    TrainConfig,
    mse,
    train_adversarial,
    train_regressor,
    train_step,
)

# no batchnorm: keeps eval forwards a pure function of the parameters
PLAIN_SPECS = [
    LayerSpec("dense", nodes=24),
    LayerSpec("relu"),
    LayerSpec("dropout", rate=0.2),
    LayerSpec("dense", nodes=12),
    LayerSpec("relu"),
    LayerSpec("linear_output", nodes=1),
]

NORM_SPECS = [
    LayerSpec("dense", nodes=16),
    LayerSpec("relu"),
    LayerSpec("batchnorm"),
    LayerSpec("dropout", rate=0.2),
    LayerSpec("linear_output", nodes=1),
]


def _random_dataset(n, seed, bands=8, domain=0, hidden=False):
    rng = substream(seed, "train-test-data")
    x = rng.uniform(0.05, 1.0, (n, bands))
    y = rng.uniform(0.0, 1.0, n)
    return Dataset(
        features=x.astype(np.float32),
        labels=None if hidden else y,
        domains=np.full(n, domain, np.uint8),
        hidden_labels=y if hidden else None,
    )


def _adam_oracle(p0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam with bias correction, scalar arithmetic only."""
    p = float(p0)
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_adam_matches_hand_formula():
    p = np.array([1.0, -2.0, 0.5])
    opt = Adam([p], lr=0.01)
    grad_seq = [np.array([0.3, -1.2, 0.0]), np.array([-0.7, 0.4, 2.0])]
    for g in grad_seq:
        opt.step([g])
    expected = [
        _adam_oracle(p0, [g[i] for g in grad_seq], 0.01)
        for i, p0 in enumerate([1.0, -2.0, 0.5])
    ]
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_weight_decay_is_decoupled():
    # zero gradient: decay is the only effect and never enters m/v
    p = np.array([2.0, -3.0])
    opt = Adam([p], lr=0.1, weight_decay=0.01)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p, np.array([2.0, -3.0]) * (1.0 - 0.1 * 0.01))
    assert np.all(opt.m[0] == 0) and np.all(opt.v[0] == 0)

    # with gradient: decayed step == plain step minus lr*wd*p0
    p0 = np.array([2.0, -3.0])
    g = np.array([0.5, -0.25])
    pa, pb = p0.copy(), p0.copy()
    Adam([pa], lr=0.1, weight_decay=0.01).step([g])
    Adam([pb], lr=0.1).step([g])
    np.testing.assert_allclose(pa, pb - 0.1 * 0.01 * p0, atol=1e-15)


def test_scheduler_fires_after_patience_stale_epochs():
    opt = Adam([np.zeros(1)], lr=1.0)
    sched = PlateauScheduler([opt], factor=0.1, patience=10, threshold=0.01)
    fired = [sched.step(1.0) for _ in range(11)]
    assert fired == [False] * 10 + [True]
    assert opt.lr == pytest.approx(0.1)
    fired = [sched.step(1.0) for _ in range(10)]
    assert fired == [False] * 9 + [True]
    assert opt.lr == pytest.approx(0.01)


def test_scheduler_improvement_threshold_is_relative():
    opt = Adam([np.zeros(1)], lr=1.0)
    sched = PlateauScheduler([opt], factor=0.5, patience=3, threshold=0.01)
    sched.step(1.0)
    sched.step(0.995)  # within 1%: still stale
    assert sched.stale == 1
    sched.step(0.98)  # beats the relative threshold
    assert sched.stale == 0 and sched.best == 0.98
    assert opt.lr == 1.0


def test_scheduler_scales_every_attached_optimizer():
    a = Adam([np.zeros(1)], lr=1.0)
    b = Adam([np.zeros(1)], lr=0.5)
    sched = PlateauScheduler([a, b], factor=0.1, patience=1, threshold=0.01)
    sched.step(1.0)
    sched.step(1.0)
    assert a.lr == pytest.approx(0.1) and b.lr == pytest.approx(0.05)


def test_single_linear_layer_recovers_linear_relation():
    rng = substream(7, "linear-fit")
    x = rng.uniform(0.0, 1.0, (96, 4))
    w = np.array([0.2, -0.1, 0.25, 0.05])
    y = x @ w + 0.3  # stays inside [0, 1]
    ds = Dataset(x.astype(np.float32), y.astype(np.float32), np.zeros(96, np.uint8))
    train = ds.subset(np.arange(80))
    val = ds.subset(np.arange(80, 96))
    cfg = TrainConfig(lr_generator=0.05, weight_decay=0.0, batch=40, epochs=300,
                      snr_db=None, seed=3)
    net, history = train_regressor([LayerSpec("linear_output", nodes=1)], cfg,
                                   train, val, dtype=np.float64)
    assert min(history.val_loss) < 1e-5
    # the returned network is the best-epoch snapshot
    pred, _, _ = net.forward(val.features.astype(np.float64), train=False)
    assert mse(pred, val.labels) == pytest.approx(min(history.val_loss), abs=1e-12)
    assert history.val_loss[history.best_epoch - 1] == min(history.val_loss)


def test_training_is_deterministic_across_reruns():
    ds = _random_dataset(64, 11)
    train = ds.subset(np.arange(48))
    val = ds.subset(np.arange(48, 64))
    cfg = TrainConfig(batch=16, epochs=4, seed=5)
    net_a, hist_a = train_regressor(NORM_SPECS, cfg, train, val)
    net_b, hist_b = train_regressor(NORM_SPECS, cfg, train, val)
    assert hist_a.train_loss == hist_b.train_loss
    assert hist_a.val_loss == hist_b.val_loss
    assert hist_a.best_epoch == hist_b.best_epoch
    for pa, pb in zip(net_a.state_arrays(), net_b.state_arrays()):
        np.testing.assert_array_equal(pa, pb)


def test_history_lengths_and_progress_callback():
    ds = _random_dataset(40, 13)
    train = ds.subset(np.arange(32))
    val = ds.subset(np.arange(32, 40))
    cfg = TrainConfig(batch=16, epochs=3, seed=1)
    seen = []
    _, history = train_regressor(PLAIN_SPECS, cfg, train, val, progress=seen.append)
    assert len(history.train_loss) == len(history.val_loss) == len(history.lr) == 3
    lines = list(history.lines())
    assert len(lines) == 3 and all(line.startswith("epoch=") for line in lines)
    assert len(seen) == 3 and all("val_loss=" in msg for msg in seen)
    assert 1 <= history.best_epoch <= 3


def test_non_finite_loss_raises():
    net = Network([LayerSpec("linear_output", nodes=1)], input_width=4, seed=0,
                  dtype=np.float64)
    opt = Adam(net.parameters(), lr=1e-3)
    x = np.full((4, 4), 1e200)
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="non-finite"):
        train_step(net, x, np.zeros(4), opt, None)


def test_train_config_validation():
    for kwargs in (
        dict(lr_generator=0.0),
        dict(lr_discriminator=-1e-6),
        dict(adversarial_weight=-0.1),
        dict(weight_decay=-1.0),
        dict(batch=1),
        dict(epochs=0),
        dict(scheduler_factor=1.0),
        dict(scheduler_patience=0),
        dict(scheduler_threshold=-0.01),
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)
    TrainConfig()  # defaults are valid


def test_training_rejects_empty_or_hidden_datasets():
    ds = _random_dataset(8, 2)
    empty = ds.subset(np.arange(0))
    cfg = TrainConfig(batch=4, epochs=1)
    with pytest.raises(ConfigError):
        train_regressor(PLAIN_SPECS, cfg, empty, ds)
    hidden = _random_dataset(8, 2, hidden=True)
    with pytest.raises(ConfigError, match="visible labels"):
        train_regressor(PLAIN_SPECS, cfg, hidden, ds)


def test_zero_adversarial_weight_reproduces_plain_training():
    """With weight 0 the simulated half of the adversarial loop must follow
    the exact parameter trajectory of plain training: same batches, same
    dropout masks, same updates. Only the discriminator moves differently."""
    sim = _random_dataset(64, 21)
    sim_train = sim.subset(np.arange(48))
    sim_val = sim.subset(np.arange(48, 64))
    real = _random_dataset(48, 22, domain=1, hidden=True)
    real_train = real.subset(np.arange(40))
    real_val = real.subset(np.arange(40, 48))

    plain_cfg = TrainConfig(batch=8, epochs=3, snr_db=None, seed=9)
    adv_cfg = TrainConfig(batch=16, epochs=3, snr_db=None, seed=9,
                          adversarial_weight=0.0, lr_discriminator=1e-3)
    net_p, hist_p = train_regressor(PLAIN_SPECS, plain_cfg, sim_train, sim_val,
                                    dtype=np.float64)
    net_a, hist_a = train_adversarial(PLAIN_SPECS, adv_cfg, sim_train, sim_val,
                                      real_train, real_val, dtype=np.float64)

    # per-epoch regression losses agree (48 rows / half-batch 8 = equal batches)
    reg_losses = [parts[0] for parts in hist_a.loss_parts]
    np.testing.assert_allclose(reg_losses, hist_p.train_loss, rtol=1e-12)
    np.testing.assert_allclose(hist_a.val_loss, hist_p.val_loss, rtol=1e-12)
    assert hist_a.best_epoch == hist_p.best_epoch
    for pa, pp in zip(net_a.parameters(), net_p.parameters()):
        np.testing.assert_array_equal(pa, pp)

    # the discriminator trained even though the generator ignored it
    fresh = Network(PLAIN_SPECS, input_width=sim.bands, seed=9, dtype=np.float64,
                    discriminator=True)
    moved = any(
        not np.array_equal(a, b)
        for a, b in zip(net_a.discriminator.params(), fresh.discriminator.params())
    )
    assert moved


def test_adversarial_history_composes_loss_parts():
    sim = _random_dataset(32, 31)
    sim_train = sim.subset(np.arange(24))
    sim_val = sim.subset(np.arange(24, 32))
    real = _random_dataset(24, 32, domain=1, hidden=True)
    real_train = real.subset(np.arange(16))
    real_val = real.subset(np.arange(16, 24))
    cfg = TrainConfig(batch=8, epochs=2, snr_db=40.0, seed=4,
                      adversarial_weight=0.25)
    _, history = train_adversarial(NORM_SPECS, cfg, sim_train, sim_val,
                                   real_train, real_val)
    assert len(history.loss_parts) == len(history.disc_accuracy) == 2
    for total, (l_r, l_a, l_d) in zip(history.train_loss, history.loss_parts):
        assert total == pytest.approx(l_r + 0.25 * l_a + l_d, abs=1e-9)
    assert all(0.0 <= acc <= 1.0 for acc in history.disc_accuracy)
    lines = list(history.lines())
    assert len(lines) == 2 and all("disc_acc=" in line for line in lines)


def test_adversarial_requires_even_batch():
    sim = _random_dataset(16, 41)
    real = _random_dataset(16, 42, domain=1, hidden=True)
    cfg = TrainConfig(batch=5, epochs=1)
    with pytest.raises(ConfigError, match="even"):
        train_adversarial(PLAIN_SPECS, cfg, sim, sim, real, real)


def test_adversarial_requires_discriminator_head():
    sim = _random_dataset(16, 43)
    real = _random_dataset(16, 44, domain=1, hidden=True)
    cfg = TrainConfig(batch=8, epochs=1)
    bare = Network(PLAIN_SPECS, input_width=sim.bands, seed=0)
    with pytest.raises(ConfigError, match="discriminator"):
        train_adversarial(PLAIN_SPECS, cfg, sim, sim, real, real, net=bare)


def test_adversarial_rejects_empty_pool():
    sim = _random_dataset(16, 45)
    real = _random_dataset(16, 46, domain=1, hidden=True)
    cfg = TrainConfig(batch=8, epochs=1)
    with pytest.raises(ConfigError, match="real_train"):
        train_adversarial(PLAIN_SPECS, cfg, sim, sim, real.subset(np.arange(0)), real)
