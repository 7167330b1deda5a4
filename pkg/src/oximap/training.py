"""Training loops: plain regression and the domain-adversarial variant.

Both loops share the same batching and dropout streams so that the
adversarial path with adversarial weight 0 reproduces plain training on its
simulated half exactly. All randomness derives from the config seed; a given
config and seed always yields the same parameter trajectory and history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, augment_noise, balanced_batches
from .errors import ConfigError, TrainingError
from .network import Network, infer_map  # noqa: F401  (re-export for callers)
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-6
    adversarial_weight: float = 0.25
    weight_decay: float = 1e-6
    batch: int = 512
    epochs: int = 100
    scheduler_factor: float = 0.1
    scheduler_patience: int = 10
    scheduler_threshold: float = 0.01
    snr_db: float | None = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ConfigError("learning rates must be positive")
        if self.adversarial_weight < 0:
            raise ConfigError("adversarial weight must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if self.batch < 2:
            raise ConfigError("batch size must be at least 2")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not 0 < self.scheduler_factor < 1:
            raise ConfigError("scheduler factor must lie in (0, 1)")
        if self.scheduler_patience < 1:
            raise ConfigError("scheduler patience must be at least 1")
        if self.scheduler_threshold < 0:
            raise ConfigError("scheduler threshold must be non-negative")


@dataclass
class TrainHistory:
    """Per-epoch records; list lengths equal the number of epochs run."""

    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    disc_accuracy: list | None = None
    loss_parts: list | None = None  # (regression, adversarial, discriminator)
    best_epoch: int = 0

    def lines(self):
        for i, (tr, va, lr) in enumerate(zip(self.train_loss, self.val_loss, self.lr)):
            row = f"epoch={i + 1} train_loss={tr:.6f} val_loss={va:.6f} lr={lr:.3e}"
            if self.disc_accuracy is not None:
                row += f" disc_acc={self.disc_accuracy[i]:.4f}"
            yield row


class Adam:
    """Adam with decoupled weight decay; lr is mutable for scheduling."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay:
                p -= p * (self.lr * self.weight_decay)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


class PlateauScheduler:
    """Scales the learning rate of every attached optimizer by ``factor``
    once the monitored loss has gone ``patience`` epochs without improving
    by at least ``threshold`` (relative)."""

    def __init__(self, optimizers, factor: float = 0.1, patience: int = 10,
                 threshold: float = 0.01):
        self.optimizers = list(optimizers)
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> bool:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            for opt in self.optimizers:
                opt.lr *= self.factor
            self.stale = 0
            return True
        return False


def mse(pred, target) -> float:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def _mse_grad(pred, target):
    return (2.0 / pred.size) * (pred - target)


def bce_with_logits(logits, target) -> float:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_grad(logits, target):
    return (_sigmoid(np.asarray(logits, dtype=np.float64)) - target) / logits.size


def train_step(net: Network, x, y, optimizer: Adam, rng) -> float:
    """One regression step: forward, exact MSE backprop, Adam update."""
    pred, _, caches = net.forward(x, train=True, rng=rng)
    loss = mse(pred, y)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite training loss {loss!r} at step {optimizer.t + 1}")
    net.zero_grads()
    net.backward(_mse_grad(pred, np.asarray(y, dtype=net.dtype)), caches)
    optimizer.step(net.grads())
    return loss


def _training_arrays(ds: Dataset, dtype):
    if ds.labels is None:
        raise ConfigError("training requires a dataset with visible labels")
    return ds.features.astype(dtype, copy=False), ds.labels.astype(dtype, copy=False)


def _augmented(ds: Dataset, snr_db, seed: int, epoch: int) -> Dataset:
    if snr_db is None:
        return ds
    return augment_noise(ds, snr_db, seed, epoch)


def _val_mse(net: Network, x, y) -> float:
    pred, _, _ = net.forward(x, train=False)
    return mse(pred, y)


def train_regressor(specs, cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                    dtype=np.float32, progress=None):
    """Train a plain regressor; returns the best-validation network and history.

    Training features get fresh noise each epoch (epoch keys 1..n); the
    validation set is noised once with epoch key 0 so the selection metric
    stays fixed across epochs.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ConfigError("training and validation datasets must be non-empty")
    net = Network(specs, input_width=train_ds.bands, seed=cfg.seed, dtype=dtype)
    opt = Adam(net.parameters(), cfg.lr_generator, cfg.weight_decay)
    sched = PlateauScheduler([opt], cfg.scheduler_factor, cfg.scheduler_patience,
                             cfg.scheduler_threshold)
    val_x, val_y = _training_arrays(_augmented(val_ds, cfg.snr_db, cfg.seed, 0), dtype)
    history = TrainHistory()
    best = math.inf
    snap = net.snapshot()
    for epoch in range(1, cfg.epochs + 1):
        x, y = _training_arrays(_augmented(train_ds, cfg.snr_db, cfg.seed, epoch), dtype)
        order = substream(cfg.seed, "batch-order", epoch).permutation(len(x))
        total = 0.0
        for bi, lo in enumerate(range(0, len(x), cfg.batch)):
            idx = order[lo:lo + cfg.batch]
            rng = substream(cfg.seed, "dropout", epoch, bi, 0)
            total += train_step(net, x[idx], y[idx], opt, rng) * idx.size
        val = _val_mse(net, val_x, val_y)
        history.train_loss.append(total / len(x))
        history.val_loss.append(val)
        history.lr.append(opt.lr)
        if val < best:
            best = val
            snap = net.snapshot()
            history.best_epoch = epoch
        sched.step(val)
        if progress is not None:
            progress(f"epoch={epoch} train_loss={total / len(x):.6f} "
                     f"val_loss={val:.6f} lr={opt.lr:.3e}")
    net.restore(snap)
    return net, history


def _disc_balanced_accuracy(net: Network, sim_x, real_x) -> float:
    disc = net.discriminator
    _, f_sim, _ = net.forward(sim_x, train=False)
    _, f_real, _ = net.forward(real_x, train=False)
    z_sim, _ = disc.forward(f_sim, False, None)
    z_real, _ = disc.forward(f_real, False, None)
    return 0.5 * (float(np.mean(z_sim[:, 0] <= 0)) + float(np.mean(z_real[:, 0] > 0)))


def train_adversarial(specs, cfg: TrainConfig, sim_train: Dataset, sim_val: Dataset,
                      real_train: Dataset, real_val: Dataset, dtype=np.float32,
                      progress=None, net: Network | None = None):
    """Domain-adversarial training over a simulated pool and an unlabeled real pool.

    Each balanced batch takes two updates. First the discriminator trains on
    the current features (detached, so the generator is untouched) against the
    true domain labels, simulated = 0 and real = 1. Then the generator trains
    on regression loss over the simulated half plus the weighted flipped-label
    confusion loss through the frozen discriminator. The simulated half runs
    through the same batch-order and dropout streams as plain training, so a
    zero adversarial weight reproduces ``train_regressor`` on that half.
    """
    if cfg.batch % 2 != 0:
        raise ConfigError("adversarial training needs an even batch size")
    for ds, name in ((sim_train, "sim_train"), (sim_val, "sim_val"),
                     (real_train, "real_train"), (real_val, "real_val")):
        if len(ds) == 0:
            raise ConfigError(f"{name} dataset is empty")
    if net is None:
        net = Network(specs, input_width=sim_train.bands, seed=cfg.seed, dtype=dtype,
                      discriminator=True)
    if net.discriminator is None:
        raise ConfigError("adversarial training requires a discriminator head")
    disc = net.discriminator
    lam = cfg.adversarial_weight
    gen_opt = Adam(net.parameters(), cfg.lr_generator, cfg.weight_decay)
    disc_opt = Adam(disc.params(), cfg.lr_discriminator, cfg.weight_decay)
    sched = PlateauScheduler([gen_opt, disc_opt], cfg.scheduler_factor,
                             cfg.scheduler_patience, cfg.scheduler_threshold)
    val_x, val_y = _training_arrays(_augmented(sim_val, cfg.snr_db, cfg.seed, 0), dtype)
    real_val_x = real_val.features.astype(dtype, copy=False)
    history = TrainHistory(disc_accuracy=[], loss_parts=[])
    best = math.inf
    snap = net.snapshot()
    for epoch in range(1, cfg.epochs + 1):
        aug = _augmented(sim_train, cfg.snr_db, cfg.seed, epoch)
        sums = np.zeros(3)
        n_batches = 0
        batches = balanced_batches(aug, real_train, cfg.batch, cfg.seed, epoch)
        for bi, (sx, sy, rx) in enumerate(batches):
            sx = sx.astype(dtype, copy=False)
            rx = rx.astype(dtype, copy=False)
            sy = sy.astype(dtype, copy=False)
            p_s, f_s, cache_s = net.forward(sx, train=True,
                                            rng=substream(cfg.seed, "dropout", epoch, bi, 0))
            _, f_r, cache_r = net.forward(rx, train=True,
                                          rng=substream(cfg.seed, "dropout", epoch, bi, 1))
            net.zero_grads()

            # discriminator step on detached features: sim -> 0, real -> 1
            z_s, dc_s = disc.forward(f_s, False, None)
            z_r, dc_r = disc.forward(f_r, False, None)
            z = np.concatenate([z_s[:, 0], z_r[:, 0]])
            domain = np.concatenate([np.zeros(len(sx)), np.ones(len(rx))])
            l_d = bce_with_logits(z, domain)
            gz = _bce_grad(z, domain).astype(dtype)
            disc.backward(gz[:len(sx), None], dc_s)
            disc.backward(gz[len(sx):, None], dc_r)
            disc_opt.step(disc.grads())

            # generator step through the updated, frozen discriminator
            l_r = mse(p_s, sy)
            if lam > 0:
                z2_s, dc2_s = disc.forward(f_s, False, None)
                z2_r, dc2_r = disc.forward(f_r, False, None)
                z2 = np.concatenate([z2_s[:, 0], z2_r[:, 0]])
                l_a = bce_with_logits(z2, 1.0 - domain)
                ga = (lam * _bce_grad(z2, 1.0 - domain)).astype(dtype)
                gf_s = disc.backward(ga[:len(sx), None], dc2_s)
                gf_r = disc.backward(ga[len(sx):, None], dc2_r)
                for g in disc.grads():  # confusion gradients must not train the disc
                    g[...] = 0
                net.backward(_mse_grad(p_s, sy), cache_s, g_features=gf_s)
                net.backward(None, cache_r, g_features=gf_r)
            else:
                l_a = 0.0
                net.backward(_mse_grad(p_s, sy), cache_s)
            if not (math.isfinite(l_r) and math.isfinite(l_a) and math.isfinite(l_d)):
                raise TrainingError(f"non-finite loss in epoch {epoch}: "
                                    f"regression={l_r!r} adversarial={l_a!r} domain={l_d!r}")
            gen_opt.step(net.grads())
            sums += (l_r, l_a, l_d)
            n_batches += 1
        if n_batches == 0:
            raise ConfigError("pools are too small to form a single balanced batch")
        l_r, l_a, l_d = sums / n_batches
        val = _val_mse(net, val_x, val_y)
        history.train_loss.append(l_r + lam * l_a + l_d)
        history.loss_parts.append((l_r, l_a, l_d))
        history.val_loss.append(val)
        history.lr.append(gen_opt.lr)
        history.disc_accuracy.append(_disc_balanced_accuracy(net, val_x, real_val_x))
        if val < best:
            best = val
            snap = net.snapshot()
            history.best_epoch = epoch
        sched.step(val)
        if progress is not None:
            progress(f"epoch={epoch} train_loss={history.train_loss[-1]:.6f} "
                     f"val_loss={val:.6f} lr={gen_opt.lr:.3e} "
                     f"disc_acc={history.disc_accuracy[-1]:.4f}")
    net.restore(snap)
    return net, history
