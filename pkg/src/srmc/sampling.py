"""Short-run Langevin sampling.

The sampler is deliberately non-convergent: every run starts from the
same fixed initial distribution p0 = Uniform(-1, 1) and takes a small,
fixed number K of noisy gradient steps

    x_{k+1} = x_k + step_size * grad f(x_k) + noise_scale * N(0, I).

The K-step marginal is the model being trained, and with the noise
switched off the same K steps define a deterministic map z -> M(z) that
is used as a generator.

Chain i of a run draws its init and its noise from a Philox stream keyed
by (seed, iteration, chain index), so results do not depend on how a
batch is split across calls: chains [0..B) in one call equal chains
[0..B/2) and [B/2..B) in two calls with a chain offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .nets import EnergyNet
from .tensor import NonFiniteError

logger = logging.getLogger(__name__)

# pregenerate per-chain noise blocks below this many bytes per run;
# above it, draw step by step (same streams, same numbers)
_BLOCK_BYTES = 128 * 1024 * 1024


class ChainDivergenceError(RuntimeError):
    """A chain left the trust region or produced non-finite values."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"chain diverged at step {step}: {detail}")
        self.step = step


@dataclass
class SamplerConfig:
    k: int = 100
    step_size: float = 1.0
    noise_scale: float = 1e-2
    init: str = "uniform"
    deterministic: bool = False
    clamp_output: bool = False
    record_noise: bool = False
    divergence_limit: float = 1e3

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.noise_scale < 0 or self.step_size <= 0:
            raise ValueError("step_size must be positive and noise_scale non-negative")


@dataclass
class ChainState:
    """One chain of one run: endpoints plus per-chain diagnostics."""

    z: np.ndarray
    x: np.ndarray
    steps: int
    grad_mag: float
    noise: np.ndarray | None = None


def draw_p0(shape, batch: int, seed: int, t: int = 0, chain_offset: int = 0,
            dtype=np.float64) -> np.ndarray:
    """Uniform(-1, 1) inits, one per-chain stream each."""
    streams = _rng.ChainStreams(seed, _rng.TAG_CHAIN, t, offset=chain_offset)
    out = np.empty((batch,) + tuple(shape), dtype=dtype)
    for i in range(batch):
        out[i] = streams.rng(i).uniform(-1.0, 1.0, size=shape)
    return out


def langevin_step(net: EnergyNet, x: np.ndarray, cfg: SamplerConfig,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """One Langevin update for a whole batch, noise drawn from `rng`."""
    f, g = net.f_and_grad_x(x)
    out = x + np.asarray(cfg.step_size, dtype=x.dtype) * g
    if not cfg.deterministic:
        if rng is None:
            raise ValueError("stochastic langevin_step needs an rng; set deterministic=True otherwise")
        out = out + np.asarray(cfg.noise_scale, dtype=x.dtype) * \
            rng.standard_normal(x.shape, dtype=x.dtype)
    return out


def _guard(x: np.ndarray, step: int, limit: float) -> None:
    m = np.abs(x).max() if x.size else 0.0
    if not np.isfinite(m) or m > limit:
        raise ChainDivergenceError(step, f"max |x| = {m:.3g} (limit {limit:g})")


def short_run_sample(net: EnergyNet, cfg: SamplerConfig, batch: int, seed: int,
                     t: int = 0, chain_offset: int = 0, init: np.ndarray | None = None):
    """Run `batch` chains for cfg.k steps.

    Returns (samples, chains): the (batch, ...) array of final states and
    a list of per-chain ChainState records.  `init` overrides the uniform
    p0 draw with explicit starting points (chains still consume their
    noise streams the same way).
    """
    shape = tuple(net.input_shape)
    dtype = net.dtype
    k = cfg.k
    streams = _rng.ChainStreams(seed, _rng.TAG_CHAIN, t, offset=chain_offset)
    gens = [streams.rng(i) for i in range(batch)]

    if init is not None:
        init = np.asarray(init, dtype=dtype)
        if init.shape != (batch,) + shape:
            raise ValueError(f"init shape {init.shape} does not match (batch, *input_shape) "
                             f"{(batch,) + shape}")
        z = init.copy()
    elif cfg.init == "uniform":
        z = np.empty((batch,) + shape, dtype=dtype)
        for i, g in enumerate(gens):
            z[i] = g.uniform(-1.0, 1.0, size=shape)
    else:
        raise ValueError(f"unknown init '{cfg.init}'")

    elem = int(np.prod(shape))
    use_block = (not cfg.deterministic) and k > 0 and \
        (cfg.record_noise or batch * k * elem * dtype.itemsize <= _BLOCK_BYTES)
    noise_block = None
    if use_block:
        # One (batch, k, ...) array: the per-step add below is then a single
        # vectorized op instead of a per-chain loop.  Values are identical to
        # per-chain draws since each row comes from that chain's stream.
        noise_block = np.stack([g.standard_normal((k,) + shape, dtype=dtype) for g in gens])

    x = z.copy()
    step_c = dtype.type(cfg.step_size)
    noise_c = dtype.type(cfg.noise_scale)
    mag_sum = np.zeros(batch, dtype=np.float64)
    axes = tuple(range(1, x.ndim))
    for step in range(k):
        try:
            _, g = net.f_and_grad_x(x)
        except NonFiniteError as e:
            raise ChainDivergenceError(step, str(e)) from None
        mag_sum += np.sqrt(np.sum(np.square(g, dtype=np.float64), axis=axes))
        x = x + step_c * g
        if not cfg.deterministic:
            if use_block:
                x += noise_c * noise_block[:, step]
            else:
                for i in range(batch):
                    x[i] += noise_c * gens[i].standard_normal(shape, dtype=dtype)
        _guard(x, step, cfg.divergence_limit)

    grad_mags = mag_sum / k if k else np.zeros(batch)
    if k:
        logger.info("short-run sample: %d chains, K=%d, mean |grad f| = %.4g",
                    batch, k, float(grad_mags.mean()))
    samples = np.clip(x, -1.0, 1.0) if cfg.clamp_output else x
    chains = [
        ChainState(z=z[i], x=samples[i], steps=k, grad_mag=float(grad_mags[i]),
                   noise=noise_block[i] if (cfg.record_noise and noise_block is not None) else None)
        for i in range(batch)
    ]
    return samples, chains


def run_deterministic(net: EnergyNet, z: np.ndarray, k: int,
                      step_size: float = 1.0, divergence_limit: float = 1e3,
                      return_states: bool = False):
    """The generator map M(z): k noise-free gradient steps from z.

    With return_states=True also returns the k states the gradients were
    evaluated at (the inputs x_0 .. x_{k-1}), which is exactly what a
    reverse sweep through the unrolled chain needs.
    """
    x = np.asarray(z, dtype=net.dtype).copy()
    step_c = net.dtype.type(step_size)
    states = []
    for step in range(k):
        if return_states:
            states.append(x)
        try:
            _, g = net.f_and_grad_x(x)
        except NonFiniteError as e:
            raise ChainDivergenceError(step, str(e)) from None
        x = x + step_c * g
        _guard(x, step, divergence_limit)
    if return_states:
        return x, states
    return x
