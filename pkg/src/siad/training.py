"""Hand-rolled training for the detector network.

Gradients are computed analytically layer by layer (checked against central
finite differences in the test suite), the optimizer is Adam with bias
correction, and the loop does early stopping on a held-out split.  Every
source of randomness flows from one seeded counter-based generator, so the
same seed reproduces the same final weights bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import (ArchitectureSpec, LatentStats, ModelWeights, _check_cond,
                    _check_image, _with_cond_channels, elbo_loss, init_weights)
from .ops import (conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu,
                  relu_backward, upsample_nearest, upsample_nearest_backward)


def _forward_cached(x, cond, weights: ModelWeights, eps):
    """Forward pass retaining every intermediate needed by the backward pass.

    ``eps`` is the reparameterization draw; pass zeros for the deterministic
    mean path used in held-out evaluation.
    """
    arch = weights.arch
    x = _check_image(x, arch)
    cond = _check_cond(cond, arch)
    eps = np.asarray(eps, dtype=np.float64).reshape(arch.latent_dim)

    cache = {"x": x, "cond": cond, "eps": eps}
    h = _with_cond_channels(x, cond, arch)
    cache["enc_in"] = [h]
    cache["enc_pre"] = []
    cache["skips"] = []
    cache["pool_idx"] = []
    for i in range(arch.n_blocks):
        pre = conv2d(h, weights[f"enc{i}_w"], weights[f"enc{i}_b"])
        a = relu(pre)
        h, idx = maxpool2(a)
        cache["enc_pre"].append(pre)
        cache["skips"].append(a)
        cache["pool_idx"].append(idx)
        cache["enc_in"].append(h)

    flat = h.reshape(-1)
    mu = weights["mu_w"] @ flat + weights["mu_b"]
    logvar = weights["logvar_w"] @ flat + weights["logvar_b"]
    z = mu + np.exp(0.5 * logvar) * eps
    zc = np.concatenate([z, cond])
    g = weights["dec_dense_w"] @ zc + weights["dec_dense_b"]
    g_map = g.reshape(arch.channels[-1], arch.deep_side, arch.deep_side)
    d = relu(g_map)

    cache.update(flat=flat, mu=mu, logvar=logvar, z=z, zc=zc, g_map=g_map)
    cache["dec_cat"] = {}
    cache["dec_pre"] = {}
    for i in range(arch.n_blocks - 1, -1, -1):
        up = upsample_nearest(d)
        cat = np.concatenate([up, cache["skips"][i]], axis=0)
        p = conv2d(cat, weights[f"dec{i}_w"], weights[f"dec{i}_b"])
        cache["dec_cat"][i] = cat
        cache["dec_pre"][i] = p
        d = relu(p) if i > 0 else p
    cache["recon"] = d
    return cache


def loss_and_gradients(x, cond, weights: ModelWeights, eps):
    """ELBO loss and its exact gradients for one example.

    Returns ``(loss, grads)`` with ``grads`` keyed like the weight dict.
    Maxpool gradients are routed to the recorded argmax winners; the latent
    draw uses the reparameterization z = mu + exp(logvar/2) * eps.
    """
    arch = weights.arch
    cache = _forward_cached(x, cond, weights, eps)
    stats = LatentStats(cache["mu"], cache["logvar"])
    loss = elbo_loss(cache["x"], cache["recon"], stats)

    grads = {}
    n_blocks = arch.n_blocks
    chans = arch.channels

    # decoder half, from the reconstruction back to the latent
    d_cur = cache["recon"] - cache["x"]
    d_skip = [None] * n_blocks
    for i in range(n_blocks):  # reverse order of the decoder loop
        d_p = d_cur if i == 0 else relu_backward(d_cur, cache["dec_pre"][i])
        d_cat, d_w, d_b = conv2d_backward(d_p, cache["dec_cat"][i], weights[f"dec{i}_w"])
        grads[f"dec{i}_w"] = d_w
        grads[f"dec{i}_b"] = d_b
        d_skip[i] = d_cat[chans[i]:]
        d_cur = upsample_nearest_backward(d_cat[:chans[i]])

    d_g = relu_backward(d_cur, cache["g_map"]).reshape(-1)
    grads["dec_dense_w"] = np.outer(d_g, cache["zc"])
    grads["dec_dense_b"] = d_g
    d_zc = weights["dec_dense_w"].T @ d_g
    d_z = d_zc[:arch.latent_dim]

    # latent heads: reconstruction path through z plus the closed-form KL
    mu, logvar, eps_v = cache["mu"], cache["logvar"], cache["eps"]
    d_mu = d_z + mu
    d_logvar = d_z * eps_v * 0.5 * np.exp(0.5 * logvar) + 0.5 * (np.exp(logvar) - 1.0)
    grads["mu_w"] = np.outer(d_mu, cache["flat"])
    grads["mu_b"] = d_mu
    grads["logvar_w"] = np.outer(d_logvar, cache["flat"])
    grads["logvar_b"] = d_logvar

    # encoder half
    d_h = (weights["mu_w"].T @ d_mu + weights["logvar_w"].T @ d_logvar).reshape(
        chans[-1], arch.deep_side, arch.deep_side)
    for i in range(n_blocks - 1, -1, -1):
        d_a = maxpool2_backward(d_h, cache["pool_idx"][i], cache["skips"][i].shape)
        d_a = d_a + d_skip[i]
        d_pre = relu_backward(d_a, cache["enc_pre"][i])
        d_h, d_w, d_b = conv2d_backward(d_pre, cache["enc_in"][i], weights[f"enc{i}_w"])
        grads[f"enc{i}_w"] = d_w
        grads[f"enc{i}_b"] = d_b
    return loss, grads


def evaluate_loss(x, cond, weights: ModelWeights) -> float:
    """Deterministic ELBO (latent mean path, no sampling)."""
    cache = _forward_cached(x, cond, weights, np.zeros(weights.arch.latent_dim))
    return elbo_loss(cache["x"], cache["recon"], LatentStats(cache["mu"], cache["logvar"]))


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, weights: ModelWeights) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in weights.params.items()},
                   v={k: np.zeros_like(p) for k, p in weights.params.items()},
                   t=0)


def adam_step(weights: ModelWeights, grads: dict, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update with bias correction; returns (new_weights, new_state)."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in weights.params.items():
        g = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return ModelWeights(weights.arch, new_params), AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patience: int = 20
    min_delta: float = 0.0
    holdout_fraction: float = 0.2
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    holdout_loss: float
    early_stopped: bool


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list
    best_epoch: int


def train(dataset, arch: ArchitectureSpec, config: TrainConfig) -> TrainResult:
    """Trains the detector on (image, condition) pairs of healthy subjects.

    A seeded fraction of the dataset is held out; training stops once the
    held-out loss has not improved by more than ``min_delta`` for
    ``patience`` consecutive epochs, and the weights from the best held-out
    epoch are returned.  Epoch 0 in the history reports the initial weights.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(config.seed), np.uint64(0x7e)]))

    n = len(dataset)
    order = rng.permutation(n)
    n_hold = min(max(1, int(round(config.holdout_fraction * n))), n - 1) if n >= 2 else 0
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]
    if len(train_idx) == 0:
        train_idx = order
    if n_hold == 0:
        hold_idx = order

    def holdout_loss(w):
        return float(np.mean([evaluate_loss(dataset[i][0], dataset[i][1], w)
                              for i in hold_idx]))

    weights = init_weights(arch, config.seed)
    state = AdamState.zeros_like(weights)
    best_loss = holdout_loss(weights)
    best_weights = weights.copy()
    best_epoch = 0
    train_loss0 = float(np.mean([evaluate_loss(dataset[i][0], dataset[i][1], weights)
                                 for i in train_idx]))
    history = [EpochRecord(0, train_loss0, best_loss, False)]

    stale = 0
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = [train_idx[j] for j in perm[start:start + config.batch_size]]
            total_grads = None
            batch_loss = 0.0
            for i in batch:
                x, cond = dataset[i]
                eps = rng.standard_normal(arch.latent_dim)
                loss, grads = loss_and_gradients(x, cond, weights, eps)
                batch_loss += loss
                if total_grads is None:
                    total_grads = grads
                else:
                    for k in total_grads:
                        total_grads[k] += grads[k]
            scale = 1.0 / len(batch)
            for k in total_grads:
                total_grads[k] *= scale
            weights, state = adam_step(weights, total_grads, state, config.lr,
                                       config.beta1, config.beta2, config.adam_eps)
            epoch_losses.append(batch_loss * scale)

        h_loss = holdout_loss(weights)
        improved = h_loss < best_loss - config.min_delta
        if improved:
            best_loss = h_loss
            best_weights = weights.copy()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
        stop = stale >= config.patience
        history.append(EpochRecord(epoch, float(np.mean(epoch_losses)), h_loss, stop))
        if stop:
            break
    return TrainResult(best_weights, history, best_epoch)
