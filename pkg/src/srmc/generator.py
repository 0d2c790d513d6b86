"""Treating the learned K-step sampler as a generator.

Once training has fixed the parameters, the short-run chain is just a
map from starting points to outputs.  This module exercises that map
directly: interpolation between starting points, reconstruction of a
target by descending on the starting point, and side-by-side runs of
the same chains at several step budgets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .nets import EnergyNet
from .sampling import ChainDivergenceError, SamplerConfig, run_deterministic, short_run_sample
from .tensor import ShapeError

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
ETA_FLOOR = 1e-12


def interpolate(net: EnergyNet, z1: np.ndarray, z2: np.ndarray, rhos,
                k: int, step_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Sweep the deterministic flow along an arc between two starting points.

    Each weight rho in [0, 1] gives z = rho * z1 + sqrt(1 - rho^2) * z2,
    which keeps the elementwise variance of independent starting draws
    constant along the arc.  rho=1 reproduces z1 and rho=0 reproduces z2
    bit for bit: 1.0 * a + 0.0 * b is exact in IEEE arithmetic, so the
    endpoints need no special casing.

    Returns (z, x): the (len(rhos), ...) starting points and their
    k-step outputs.
    """
    shape = tuple(net.input_shape)
    z1 = np.asarray(z1, dtype=net.dtype)
    z2 = np.asarray(z2, dtype=net.dtype)
    if z1.shape != shape or z2.shape != shape:
        raise ShapeError(f"starting points must have shape {shape}, "
                         f"got {z1.shape} and {z2.shape}")
    rhos = [float(r) for r in rhos]
    if not rhos:
        raise ValueError("need at least one interpolation weight")
    for r in rhos:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"interpolation weights must lie in [0, 1], got {r}")
    z = np.empty((len(rhos),) + shape, dtype=net.dtype)
    for i, r in enumerate(rhos):
        c1 = net.dtype.type(r)
        c2 = net.dtype.type(np.sqrt(1.0 - r * r))
        z[i] = c1 * z1 + c2 * z2
    x = run_deterministic(net, z, k, step_size=step_size)
    return z, x


@dataclass
class Reconstruction:
    """Result of descending on the starting point of the flow."""

    z: np.ndarray
    x: np.ndarray
    mse: float
    trajectory: list[float]
    converged: bool


def _loss(x: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    r = x - target
    return 0.5 * float(np.sum(r.astype(np.float64) ** 2)), r


def flow_pullback(net: EnergyNet, states: list[np.ndarray], r: np.ndarray,
                  step_size: float = 1.0) -> np.ndarray:
    """Pull a residual back through the unrolled chain.

    Each step x -> x + s * grad f(x) has Jacobian I + s * H(x); the
    Hessian is symmetric, so the transpose sweep is the same product in
    reverse order, one Hessian-vector product per step.
    """
    step_c = net.dtype.type(step_size)
    g = r
    for x_j in reversed(states):
        g = g + step_c * net.hessian_x_vp(x_j, g)
    return g


def reconstruct(net: EnergyNet, target: np.ndarray, k: int, *,
                step_size: float = 1.0, max_iters: int = 200, eta0: float = 0.5,
                z0: np.ndarray | None = None, mse_tol: float = 0.0,
                divergence_limit: float = 1e3) -> Reconstruction:
    """Find a starting point whose k-step flow lands on `target`.

    Gradient descent on 0.5 * sum((M(z) - target)^2) with Armijo
    backtracking; the step length doubles after every accepted move, so
    it self-tunes.  The search starts from the target itself unless z0
    is given.  Accepted iterates strictly decrease the loss, which makes
    `trajectory` monotone.  mse is the final mean squared error per
    element; `target` may be a single input or a batch (the batch is
    reconstructed jointly, chains stay independent).
    """
    shape = tuple(net.input_shape)
    target = np.asarray(target, dtype=net.dtype)
    single = target.shape == shape
    if single:
        target = target[None]
    if target.ndim != len(shape) + 1 or target.shape[1:] != shape:
        raise ShapeError(f"target must have shape {shape} or (batch, *{shape}), "
                         f"got {target.shape}")
    if max_iters < 0:
        raise ValueError(f"max_iters must be >= 0, got {max_iters}")
    if z0 is None:
        z = target.copy()
    else:
        z = np.asarray(z0, dtype=net.dtype)
        if single and z.shape == shape:
            z = z[None]
        if z.shape != target.shape:
            raise ShapeError(f"z0 shape {z.shape} does not match target {target.shape}")
        z = z.copy()

    x, states = run_deterministic(net, z, k, step_size=step_size,
                                  divergence_limit=divergence_limit, return_states=True)
    loss, r = _loss(x, target)
    trajectory = [loss]
    denom = float(target.size)
    eta = float(eta0)
    converged = False
    for _ in range(max_iters):
        if loss <= 0.5 * mse_tol * denom:
            converged = True
            break
        g = flow_pullback(net, states, r, step_size)
        gsq = float(np.sum(g.astype(np.float64) ** 2))
        if gsq == 0.0:
            converged = True
            break
        accepted = False
        while eta >= ETA_FLOOR:
            z_try = z - net.dtype.type(eta) * g
            if float(np.abs(z_try).max()) > divergence_limit:
                eta *= 0.5
                continue
            try:
                x_try, states_try = run_deterministic(
                    net, z_try, k, step_size=step_size,
                    divergence_limit=divergence_limit, return_states=True)
            except ChainDivergenceError:
                # bad trial step, not a failed reconstruction
                eta *= 0.5
                continue
            loss_try, r_try = _loss(x_try, target)
            if loss_try <= loss - ARMIJO_C * eta * gsq:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            # no acceptable step at float precision: nothing left to gain
            converged = True
            break
        rel_drop = (loss - loss_try) / max(loss, np.finfo(np.float64).tiny)
        z, x, states, r, loss = z_try, x_try, states_try, r_try, loss_try
        trajectory.append(loss)
        eta *= 2.0
        if rel_drop < 1e-14:
            converged = True
            break
    else:
        converged = converged or loss <= 0.5 * mse_tol * denom
    mse = 2.0 * loss / denom
    logger.info("reconstruction: %d accepted steps, mse %.4g, converged=%s",
                len(trajectory) - 1, mse, converged)
    if single:
        z, x = z[0], x[0]
    return Reconstruction(z=z, x=x, mse=mse, trajectory=trajectory, converged=converged)


@dataclass
class KStudy:
    """One step budget's worth of the shared chains."""

    k: int
    x: np.ndarray
    saturation: float
    grad_mag: float


def vary_k(net: EnergyNet, ks, batch: int, seed: int, *, t: int = 0,
           step_size: float = 1.0, noise_scale: float = 1e-2) -> list[KStudy]:
    """Run the same chains at several step budgets.

    All budgets share one (seed, t) key, so the per-chain noise
    sequences are common prefixes: the K=10 result is exactly the state
    the K=25 chains passed through after 10 steps.  Outputs are left
    unclamped; `saturation` is the fraction of values outside [-1, 1]
    and `grad_mag` the mean per-step gradient magnitude.
    """
    ks = [int(k) for k in ks]
    if not ks:
        raise ValueError("need at least one step budget")
    if min(ks) < 0:
        raise ValueError(f"step budgets must be >= 0, got {min(ks)}")
    out = []
    for k in ks:
        cfg = SamplerConfig(k=k, step_size=step_size, noise_scale=noise_scale)
        x, chains = short_run_sample(net, cfg, batch, seed, t=t)
        sat = float(np.mean(np.abs(x) > 1.0))
        gm = float(np.mean([c.grad_mag for c in chains]))
        logger.info("K=%d: saturation %.3f, mean |grad f| %.4g", k, sat, gm)
        out.append(KStudy(k=k, x=x, saturation=sat, grad_mag=gm))
    return out
