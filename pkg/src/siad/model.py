"""Conditional VAE used as the anomaly detector's reconstruction engine.

The network is a small U-net: an encoder of conv/relu/maxpool blocks with a
dense head for the latent mean and log-variance, and a decoder of
dense/upsample/conv blocks that receives the encoder's pre-pool activations
as skip connections.  The two scalar conditions ride along as constant input
channels on the encoder side and as extra latent coordinates on the decoder
side, so the reconstruction map stays piecewise linear in the image.

Inference (`reconstruct`) is deterministic: it decodes the latent mean and
never samples.  Sampling happens only inside the training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .ops import conv2d, maxpool2, relu, upsample_nearest


@dataclass(frozen=True)
class ArchitectureSpec:
    """Hyperparameters that fix every weight shape in the network.

    ``side`` is the square image side in pixels, ``channels`` the per-block
    encoder widths (the decoder mirrors them), ``latent_dim`` the size of
    the latent code, ``cond_count`` the number of scalar conditions.
    """

    side: int = 16
    channels: tuple = (8, 16)
    latent_dim: int = 4
    kernel_size: int = 3
    cond_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        blocks = len(self.channels)
        if blocks < 1:
            raise ShapeError("need at least one block")
        if self.side % (2 ** blocks) != 0:
            raise ShapeError(f"side {self.side} not divisible by 2^{blocks}")
        if self.latent_dim < 1:
            raise ShapeError("latent_dim must be >= 1")
        if self.cond_count < 0:
            raise ShapeError("cond_count must be >= 0")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ShapeError("kernel_size must be odd and positive")

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def n_pixels(self) -> int:
        return self.side * self.side

    @property
    def deep_side(self) -> int:
        return self.side // (2 ** self.n_blocks)

    @property
    def flat_dim(self) -> int:
        """Length of the flattened deepest feature map."""
        return self.channels[-1] * self.deep_side * self.deep_side

    def layer_shapes(self):
        """Weight shapes in serialization order (name, shape) pairs."""
        shapes = []
        c_prev = 1 + self.cond_count
        k = self.kernel_size
        for i, c in enumerate(self.channels):
            shapes.append((f"enc{i}_w", (c, c_prev, k, k)))
            shapes.append((f"enc{i}_b", (c,)))
            c_prev = c
        shapes.append(("mu_w", (self.latent_dim, self.flat_dim)))
        shapes.append(("mu_b", (self.latent_dim,)))
        shapes.append(("logvar_w", (self.latent_dim, self.flat_dim)))
        shapes.append(("logvar_b", (self.latent_dim,)))
        shapes.append(("dec_dense_w", (self.flat_dim, self.latent_dim + self.cond_count)))
        shapes.append(("dec_dense_b", (self.flat_dim,)))
        # decoder conv blocks run deepest -> shallowest; each sees the
        # upsampled feature map concatenated with the matching skip
        for i in range(self.n_blocks - 1, -1, -1):
            c_in = 2 * self.channels[i]
            c_out = self.channels[i - 1] if i > 0 else 1
            shapes.append((f"dec{i}_w", (c_out, c_in, k, k)))
            shapes.append((f"dec{i}_b", (c_out,)))
        return shapes


@dataclass
class ModelWeights:
    """All learnable arrays, keyed by the names in ``layer_shapes``."""

    arch: ArchitectureSpec
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = dict(self.arch.layer_shapes())
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ShapeError(f"weight set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}: non-finite entries")
            self.params[name] = arr

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.arch, {k: v.copy() for k, v in self.params.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]


@dataclass(frozen=True)
class LatentStats:
    """Gaussian posterior parameters produced by the encoder."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        logvar = np.asarray(self.logvar, dtype=np.float64)
        if mu.shape != logvar.shape:
            raise ShapeError(f"mu {mu.shape} vs logvar {logvar.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
            raise ShapeError("non-finite latent statistics")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "logvar", logvar)


def init_weights(arch: ArchitectureSpec, seed: int) -> ModelWeights:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0x57)]))
    params = {}
    for name, shape in arch.layer_shapes():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float64)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:
            fan_out, fan_in = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelWeights(arch, params)


def zero_weights(arch: ArchitectureSpec) -> ModelWeights:
    """All-zero weights; the reconstruction is identically zero."""
    return ModelWeights(arch, {name: np.zeros(shape, dtype=np.float64)
                               for name, shape in arch.layer_shapes()})


def _check_image(x: np.ndarray, arch: ArchitectureSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (arch.side, arch.side):
        x = x[None, :, :]
    if x.shape != (1, arch.side, arch.side):
        raise ShapeError(f"image shape {x.shape} does not match side {arch.side}")
    return x


def _check_cond(cond, arch: ArchitectureSpec) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float64).reshape(-1)
    if cond.shape != (arch.cond_count,):
        raise ShapeError(f"expected {arch.cond_count} conditions, got {cond.shape}")
    return cond


def _with_cond_channels(x: np.ndarray, cond: np.ndarray, arch: ArchitectureSpec) -> np.ndarray:
    if arch.cond_count == 0:
        return x
    planes = np.broadcast_to(cond[:, None, None], (arch.cond_count, arch.side, arch.side))
    return np.concatenate([x, planes], axis=0)


def encode(x: np.ndarray, cond, weights: ModelWeights):
    """Encoder forward pass.

    Returns ``(LatentStats, skips)`` where ``skips[i]`` is block i's post-relu,
    pre-pool activation, consumed later by the decoder.  The mean path uses
    only conv/relu/maxpool and is therefore piecewise linear in ``x``.
    """
    arch = weights.arch
    x = _check_image(x, arch)
    cond = _check_cond(cond, arch)
    h = _with_cond_channels(x, cond, arch)
    skips = []
    for i in range(arch.n_blocks):
        a = relu(conv2d(h, weights[f"enc{i}_w"], weights[f"enc{i}_b"]))
        skips.append(a)
        h, _ = maxpool2(a)
    flat = h.reshape(-1)
    mu = weights["mu_w"] @ flat + weights["mu_b"]
    logvar = weights["logvar_w"] @ flat + weights["logvar_b"]
    return LatentStats(mu, logvar), skips


def decode(latent: np.ndarray, cond, skips, weights: ModelWeights) -> np.ndarray:
    """Decoder forward pass from a latent vector and the encoder skips."""
    arch = weights.arch
    latent = np.asarray(latent, dtype=np.float64).reshape(-1)
    if latent.shape != (arch.latent_dim,):
        raise ShapeError(f"latent length {latent.shape} != {arch.latent_dim}")
    cond = _check_cond(cond, arch)
    if len(skips) != arch.n_blocks:
        raise ShapeError(f"expected {arch.n_blocks} skip activations, got {len(skips)}")

    zc = np.concatenate([latent, cond])
    g = weights["dec_dense_w"] @ zc + weights["dec_dense_b"]
    d = relu(g.reshape(arch.channels[-1], arch.deep_side, arch.deep_side))
    for i in range(arch.n_blocks - 1, -1, -1):
        up = upsample_nearest(d)
        cat = np.concatenate([up, skips[i]], axis=0)
        p = conv2d(cat, weights[f"dec{i}_w"], weights[f"dec{i}_b"])
        d = relu(p) if i > 0 else p  # final block stays linear: signed output
    return d


def reconstruct(x: np.ndarray, cond, weights: ModelWeights) -> np.ndarray:
    """Deterministic reconstruction: encode, take the latent mean, decode.

    No latent sampling at inference time, so the composed map is a
    deterministic piecewise-linear function of ``x``.
    """
    stats, skips = encode(x, cond, weights)
    return decode(stats.mu, cond, skips, weights)


def kl_divergence(stats: LatentStats) -> float:
    """Closed-form KL(q(z|x) || N(0, I)) for a diagonal Gaussian posterior."""
    mu, logvar = stats.mu, stats.logvar
    return float(-0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar)))


def elbo_loss(x: np.ndarray, recon: np.ndarray, stats: LatentStats) -> float:
    """Training objective: KL term plus half the squared reconstruction error.

    This is the negated variational bound under a unit-variance Gaussian
    likelihood; both terms are individually exposed for testing
    (`kl_divergence` and the residual term here).
    """
    x = np.asarray(x, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if x.shape != recon.shape:
        raise ShapeError(f"input {x.shape} vs reconstruction {recon.shape}")
    resid = x - recon
    return kl_divergence(stats) + 0.5 * float(np.sum(resid * resid))
