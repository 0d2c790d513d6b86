"""Short-run maximum-likelihood training.

Each iteration contrasts the batch-mean parameter gradient of f on a
smoothed data batch against the same gradient on freshly initialized
K-step sampler negatives, and ascends that difference through Adam.
Every random draw comes from a stream keyed by (seed, purpose, iteration),
so a run is a pure function of (config, seed, dataset) and a resumed run
continues bit-exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as _rng
from .gridmodel import GridModel, sample_grid
from .nets import EnergyNet, ExpFamilyEnergyNet, Poly1D, Quad2D, expfam_energy_net
from .sampling import SamplerConfig, short_run_sample
from .tensor import ShapeError, backward, tmean

logger = logging.getLogger(__name__)

# Smoothing noise paired with sampler length: shorter chains want more
# smoothing.  Off-table K values interpolate linearly in log K, which is a
# convenience rather than a tuned rule.
SIGMA_FOR_K = {5: 0.15, 10: 0.10, 25: 0.05, 50: 0.04, 75: 0.03, 100: 0.03}

# iteration index reserved for evaluation-time draws; training never gets here
EVAL_T = 1 << 62

HISTORY_CAP = 200_000

METRICS_COLUMNS = ("iteration", "f_data_mean", "f_neg_mean", "delta_norm",
                   "grad_mag", "eta", "sigma", "wall_ms")


def sigma_for_k(k: int) -> float:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k in SIGMA_FOR_K:
        return SIGMA_FOR_K[k]
    ks = sorted(SIGMA_FOR_K)
    if k <= ks[0]:
        return SIGMA_FOR_K[ks[0]]
    if k >= ks[-1]:
        return SIGMA_FOR_K[ks[-1]]
    hi = next(i for i, kk in enumerate(ks) if kk > k)
    k0, k1 = ks[hi - 1], ks[hi]
    s0, s1 = SIGMA_FOR_K[k0], SIGMA_FOR_K[k1]
    w = (math.log(k) - math.log(k0)) / (math.log(k1) - math.log(k0))
    return s0 + w * (s1 - s0)


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 64
    sigma: float = 3e-2
    k: int = 100
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_size: float = 1.0
    noise_scale: float = 1e-2
    anneal: bool = True
    anneal_frac: float = 0.25     # final fraction of steps that decays
    anneal_floor: float = 0.1     # eta and sigma end at floor * initial
    seed: int = 0
    checkpoint_every: int = 0     # 0 disables; consumed by callers, not here
    timing: str = "none"          # "none" keeps wall_ms at 0 for byte-stable logs

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.sigma < 0 or self.k < 0 or self.lr < 0:
            raise ValueError("sigma, k and lr must be non-negative")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.step_size <= 0 or self.noise_scale < 0:
            raise ValueError("eps and step_size must be positive, noise_scale non-negative")
        if not (0.0 <= self.anneal_frac <= 1.0):
            raise ValueError(f"anneal_frac must lie in [0, 1], got {self.anneal_frac}")
        if not (0.0 < self.anneal_floor <= 1.0):
            raise ValueError(f"anneal_floor must lie in (0, 1], got {self.anneal_floor}")
        if self.timing not in ("none", "wall"):
            raise ValueError(f"timing must be 'none' or 'wall', got {self.timing!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


def toy_config(**overrides) -> TrainConfig:
    """Trainer defaults sized for 1-D/2-D toy fits rather than image runs.

    The sampler pairing (step 0.01, noise 0.2) is deliberately noisier than
    the gradient flow alone needs; the fitted energy then over-contracts to
    compensate, which is the low-entropy regime the toy studies look at.
    """
    base = dict(steps=2000, batch_size=2048, sigma=0.03, k=100, lr=0.05,
                step_size=0.01, noise_scale=0.2, anneal=False, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def schedule(cfg: TrainConfig, t: int) -> tuple[float, float]:
    """(eta, sigma) at iteration t: flat, then linear decay to the floor."""
    if not cfg.anneal:
        return cfg.lr, cfg.sigma
    start = int(math.floor(cfg.steps * (1.0 - cfg.anneal_frac)))
    if t < start:
        return cfg.lr, cfg.sigma
    span = cfg.steps - 1 - start
    prog = 1.0 if span <= 0 else min(1.0, (t - start) / span)
    fac = 1.0 - (1.0 - cfg.anneal_floor) * prog
    return cfg.lr * fac, cfg.sigma * fac


class MetricsRow(NamedTuple):
    iteration: int
    f_data_mean: float
    f_neg_mean: float
    delta_norm: float
    grad_mag: float
    eta: float
    sigma: float
    wall_ms: float


class MetricsWriter:
    """Appends MetricsRow lines to a CSV file with the fixed header."""

    def __init__(self, path, append: bool = False):
        has_rows = append and os.path.exists(path) and os.path.getsize(path) > 0
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not has_rows:
            self._writer.writerow(METRICS_COLUMNS)
            self._fh.flush()

    def write(self, row: MetricsRow) -> None:
        self._writer.writerow(row)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


@dataclass
class TrainState:
    net: EnergyNet
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    t: int = 0
    adam_t: int = 0               # counts applied updates (fit_toy may skip some)
    history: deque = field(default_factory=lambda: deque(maxlen=HISTORY_CAP))
    converged: bool = False
    moment_gap: float = math.inf


def init_state(net: EnergyNet) -> TrainState:
    m = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    v = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    return TrainState(net=net, adam_m=m, adam_v=v)


def smooth_batch(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """x + sigma * N(0, I) per element; sigma == 0 returns x untouched."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return x
    noise = rng.standard_normal(x.shape, dtype=x.dtype)
    return x + x.dtype.type(sigma) * noise


def compute_delta(net: EnergyNet, pos: np.ndarray, neg: np.ndarray):
    """Mean parameter gradient of f on pos minus the same on neg.

    Returns (delta, f_pos_mean, f_neg_mean).  The two contributions come
    from two backward passes accumulating into the same .grad buffers; the
    second pass negates the first's float sequence exactly, so identical
    batches cancel to exact zeros.
    """
    if np.shape(pos)[1:] != np.shape(neg)[1:]:
        raise ShapeError(f"batch shapes differ: {np.shape(pos)} vs {np.shape(neg)}")
    net.zero_grad()
    out_pos = tmean(net.forward(pos, warn_range=False))
    f_pos = float(out_pos.data)
    backward(out_pos)
    out_neg = tmean(net.forward(neg, warn_range=False))
    f_neg = float(out_neg.data)
    backward(out_neg * (-1.0))
    delta = {k: p.grad.copy() for k, p in net.params.items()}
    net.zero_grad()
    return delta, f_pos, f_neg


def delta_norm(delta: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in delta.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def adam_apply(state: TrainState, delta: dict[str, np.ndarray], eta: float,
               cfg: TrainConfig) -> None:
    """One Adam ascent step along delta, in place."""
    b1, b2 = cfg.betas
    state.adam_t += 1
    c1 = 1.0 - b1 ** state.adam_t
    c2 = 1.0 - b2 ** state.adam_t
    for name, p in state.net.params.items():
        g = delta[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data += eta * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class _Iteration(NamedTuple):
    delta: dict
    f_data: float
    f_neg: float
    negs: np.ndarray
    grad_mag: float
    eta: float
    sigma: float


def _iteration(state: TrainState, data: np.ndarray, cfg: TrainConfig) -> _Iteration:
    net = state.net
    if data.shape[1:] != tuple(net.input_shape):
        raise ShapeError(f"data shape {data.shape[1:]} does not match net input "
                         f"{tuple(net.input_shape)}")
    t = state.t
    eta, sigma = schedule(cfg, t)
    idx = _rng.stream(cfg.seed, _rng.TAG_DATA, t).integers(0, len(data), size=cfg.batch_size)
    batch = data[idx]
    batch = smooth_batch(batch, sigma, _rng.stream(cfg.seed, _rng.TAG_SMOOTH, t))
    scfg = SamplerConfig(k=cfg.k, step_size=cfg.step_size, noise_scale=cfg.noise_scale)
    negs, chains = short_run_sample(net, scfg, cfg.batch_size, cfg.seed, t=t)
    delta, f_pos, f_neg = compute_delta(net, batch, negs)
    gmag = float(np.mean([c.grad_mag for c in chains]))
    return _Iteration(delta, f_pos, f_neg, negs, gmag, eta, sigma)


def train_step(state: TrainState, data: np.ndarray, cfg: TrainConfig,
               metrics: MetricsWriter | None = None) -> MetricsRow:
    """One full iteration; mutates state and returns the metrics row.

    Chain divergence propagates out before any parameter is touched, so
    the caller still holds the last consistent state.
    """
    t0 = time.perf_counter() if cfg.timing == "wall" else None
    it = _iteration(state, data, cfg)
    adam_apply(state, it.delta, it.eta, cfg)
    wall = (time.perf_counter() - t0) * 1e3 if t0 is not None else 0.0
    row = MetricsRow(state.t, it.f_data, it.f_neg, delta_norm(it.delta),
                     it.grad_mag, it.eta, it.sigma, wall)
    state.t += 1
    state.history.append(row)
    if metrics is not None:
        metrics.write(row)
    return row


def train(state: TrainState, data, cfg: TrainConfig,
          metrics: MetricsWriter | None = None, callback=None) -> TrainState:
    """Run train_step until cfg.steps; resumes from state.t when nonzero."""
    data = np.asarray(data)
    if data.ndim == 0 or len(data) == 0:
        raise ValueError("dataset is empty")
    while state.t < cfg.steps:
        train_step(state, data, cfg, metrics=metrics)
        if callback is not None:
            callback(state)
    return state


def fit_toy(target, cfg: TrainConfig | None = None, feature_map=None, *,
            tol: float = 0.05, streak: int = 100, gap_window: int = 4,
            n_data: int = 10_000, theta0=None, net: ExpFamilyEnergyNet | None = None,
            metrics: MetricsWriter | None = None) -> TrainState:
    """Fit a small exponential-family energy until sampler moments match.

    target is either an (n, d) sample array or a GridModel to draw n_data
    points from.  The stopping gap compares the dataset's feature means
    against the negatives' feature means averaged over the last gap_window
    iterations, measured in units of each feature's standard deviation
    under the data (so tol has the same meaning for every component); an
    iteration whose gap is already within tol applies no update, and
    `streak` such iterations in a row end the run with state.converged
    set.  A run that exhausts cfg.steps returns the final state with
    converged False.
    """
    if cfg is None:
        cfg = toy_config()
    if isinstance(target, GridModel):
        data = sample_grid(target, n_data, _rng.stream(cfg.seed, _rng.TAG_DATA, EVAL_T))
    else:
        data = np.asarray(target, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(-1, 1)
    if net is None:
        if feature_map is None:
            feature_map = Poly1D(2) if data.shape[1] == 1 else Quad2D()
        net = expfam_energy_net(feature_map, theta0=theta0)
    if not isinstance(net, ExpFamilyEnergyNet):
        raise TypeError("fit_toy trains exponential-family nets")
    fm = net.feature_map
    state = init_state(net)
    feats = fm.value(data)
    data_moments = feats.mean(axis=0)
    gap_scale = np.maximum(feats.std(axis=0), 1e-8)
    recent: deque = deque(maxlen=gap_window)
    run = 0
    while state.t < cfg.steps:
        it = _iteration(state, data, cfg)
        recent.append(fm.value(it.negs).mean(axis=0))
        gap = float(np.max(np.abs(data_moments - np.mean(np.stack(recent), axis=0)) / gap_scale))
        state.moment_gap = gap
        if gap <= tol:
            run += 1
        else:
            run = 0
            adam_apply(state, it.delta, it.eta, cfg)
        row = MetricsRow(state.t, it.f_data, it.f_neg, delta_norm(it.delta),
                         it.grad_mag, it.eta, it.sigma, 0.0)
        state.t += 1
        state.history.append(row)
        if metrics is not None:
            metrics.write(row)
        if run >= streak:
            state.converged = True
            break
    if not state.converged:
        logger.warning("toy fit did not converge: moment gap %.4g > %.4g after %d iterations",
                       state.moment_gap, tol, state.t)
    return state


# -- estimating-equation diagnostics -----------------------------------


@dataclass
class ResidualReport:
    """Monte-Carlo residual of the moment equation, with standard errors.

    delta holds the per-parameter residual (data mean gradient minus
    negative mean gradient); se is the per-component standard error over
    the concatenated parameter vector, combining dataset and sampler
    noise; max_z is max |residual| / se.
    """

    delta: dict[str, np.ndarray]
    norm: float
    se: np.ndarray
    max_z: float
    n_samples: int
    n_chunks: int

    def within(self, k: float = 3.0) -> bool:
        return bool(self.max_z <= k)


def _chunk_grad_rows(net: EnergyNet, x: np.ndarray, n_chunks: int,
                     names: list[str]) -> np.ndarray:
    """(n_chunks, P) rows of mean-gradient vectors over equal chunks of x."""
    per = len(x) // n_chunks
    rows = []
    for c in range(n_chunks):
        g = net.grad_theta(x[c * per:(c + 1) * per])
        rows.append(np.concatenate([g[n].astype(np.float64).ravel() for n in names]))
    return np.stack(rows)


def estimating_equation_residual(net: EnergyNet, data, cfg: TrainConfig,
                                 n_samples: int = 100_000, n_chunks: int = 32,
                                 t: int = EVAL_T) -> ResidualReport:
    """Estimate the moment-equation residual with fresh negatives.

    Draws n_samples fresh K-step negatives (trimmed to a multiple of
    n_chunks), compares mean parameter gradients against the dataset, and
    reports per-component standard errors from chunk spread on both sides.
    """
    if n_chunks < 2:
        raise ValueError(f"n_chunks must be >= 2, got {n_chunks}")
    data = np.asarray(data)
    per = n_samples // n_chunks
    if per < 1 or len(data) < n_chunks:
        raise ValueError("not enough samples per chunk")
    n_eff = per * n_chunks
    scfg = SamplerConfig(k=cfg.k, step_size=cfg.step_size, noise_scale=cfg.noise_scale)
    negs, _ = short_run_sample(net, scfg, n_eff, cfg.seed, t=t)
    names = list(net.params)

    data_rows = _chunk_grad_rows(net, data, n_chunks, names)
    neg_rows = _chunk_grad_rows(net, negs, n_chunks, names)
    # equal chunks drop a remainder; recover the whole-dataset mean separately
    data_mean = np.zeros(data_rows.shape[1])
    for s in range(0, len(data), 4096):
        part = data[s:s + 4096]
        g = net.grad_theta(part)
        vec = np.concatenate([g[n].astype(np.float64).ravel() for n in names])
        data_mean += (len(part) / len(data)) * vec
    neg_mean = neg_rows.mean(axis=0)
    resid = data_mean - neg_mean
    se = np.sqrt(data_rows.var(axis=0, ddof=1) / n_chunks +
                 neg_rows.var(axis=0, ddof=1) / n_chunks)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(resid) / se
    z = np.where(np.abs(resid) == 0.0, 0.0, z)

    delta = {}
    off = 0
    for n in names:
        size = net.params[n].data.size
        delta[n] = resid[off:off + size].reshape(net.params[n].data.shape)
        off += size
    return ResidualReport(delta=delta, norm=float(np.linalg.norm(resid)),
                          se=se, max_z=float(np.max(z)) if z.size else 0.0,
                          n_samples=n_eff, n_chunks=n_chunks)
