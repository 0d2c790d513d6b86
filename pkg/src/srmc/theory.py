"""Information-geometry checks on lattices.

Everything here is exact-to-quadrature mathematics, no sampling noise:

* MLE projection onto an exponential family by Newton moment matching.
* The Pythagorean decomposition KL(p||p_t) = KL(p||p_hat) + KL(p_hat||p_t)
  for p in the moment-constraint set Omega and p_t in the family, plus the
  entropy dual form KL(p||p_hat) = H(p_hat) - H(p).
* Monotone KL decay of a lattice Langevin kernel toward its target.

Omega members are built constructively: tilt the projection p_hat along
directions orthogonal to the feature span, then Newton-correct the
moments back onto the constraint.  The identity is exact for any member,
so rough random tilt directions are fine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import rng as _rng
from .gridmodel import GridModel


class MomentSolveError(RuntimeError):
    """Newton projection onto the moment constraint failed to converge."""


def _normalize_log_mass(raw: np.ndarray) -> np.ndarray:
    return raw - logsumexp(raw)


def solve_moments(base_log: np.ndarray, feats: np.ndarray, mu_target: np.ndarray,
                  theta0: np.ndarray | None = None, tol: float = 1e-12,
                  max_iter: int = 80) -> tuple[np.ndarray, int]:
    """Find delta with E[h] = mu_target under mass ∝ exp(base + feats @ delta).

    Plain Newton with step halving; the Jacobian is the feature covariance,
    positive definite whenever the features are independent on the lattice.
    Iterates to convergence so downstream identities hold to ~1e-11, not
    just to first order.
    """
    m, fdim = feats.shape
    mu_target = np.asarray(mu_target, dtype=np.float64)
    delta = np.zeros(fdim) if theta0 is None else np.asarray(theta0, dtype=np.float64).copy()
    scale = 1.0 + np.abs(mu_target)

    def residual(d):
        logw = _normalize_log_mass(base_log + feats @ d)
        w = np.exp(logw)
        mu = w @ feats
        cov = feats.T @ (w[:, None] * feats) - np.outer(mu, mu)
        return mu - mu_target, cov

    r, cov = residual(delta)
    err = np.max(np.abs(r) / scale)
    for it in range(max_iter):
        if err < tol:
            return delta, it
        try:
            step = np.linalg.solve(cov, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(cov, -r, rcond=None)[0]
        # halve until the residual actually shrinks
        t = 1.0
        for _ in range(40):
            r2, cov2 = residual(delta + t * step)
            err2 = np.max(np.abs(r2) / scale)
            if err2 < err:
                break
            t *= 0.5
        else:
            raise MomentSolveError(f"no descent after 40 halvings (residual {err:.3e})")
        delta = delta + t * step
        r, cov, err = r2, cov2, err2
    raise MomentSolveError(f"Newton did not reach {tol:.1e} in {max_iter} iters "
                           f"(residual {err:.3e})")


def project_mle(feature_map, target: GridModel, theta0=None,
                tol: float = 1e-12) -> tuple[np.ndarray, GridModel]:
    """MLE projection of `target` onto the exponential family of `feature_map`.

    Matches lattice feature moments exactly (to `tol`), which by exponential
    family duality is the maximum-likelihood member.
    """
    feats = feature_map.value(target.points())
    mu = target.feature_moments(feature_map)
    theta, _ = solve_moments(np.zeros(feats.shape[0]), feats, mu, theta0, tol=tol)
    p_hat = target.with_log_density(lambda pts: feature_map.value(pts) @ theta)
    return theta, p_hat


def omega_members(feature_map, p_hat: GridModel, n: int, tilt_scale: float,
                  seed: int, extra_bases: list[GridModel] = ()) -> list[GridModel]:
    """Members of the moment-constraint set Omega containing p_hat.

    Each member tilts p_hat (or an extra base density) by a random direction
    orthogonal to span{1, h} in the lattice inner product, then projects the
    moments back with Newton corrections along the feature directions.
    Extra bases must have full support wide enough that the target moments
    are attainable on their support.
    """
    pts = p_hat.points()
    feats = feature_map.value(pts)
    mu_hat = p_hat.feature_moments(feature_map)
    gen = _rng.stream(seed, _rng.TAG_EVAL)

    basis = np.concatenate([np.ones((feats.shape[0], 1)), feats], axis=1)
    q_basis, _ = np.linalg.qr(basis)

    def member_from(base_log_mass: np.ndarray, tilt: np.ndarray | None) -> GridModel:
        raw = base_log_mass if tilt is None else base_log_mass + tilt
        delta, _ = solve_moments(raw, feats, mu_hat)
        grid_log = (raw + feats @ delta).reshape(p_hat.shape)
        return GridModel(p_hat.axes, grid_log)

    members = []
    phat_log = p_hat.log_p.ravel()
    for _ in range(n):
        g = gen.standard_normal(feats.shape[0])
        g -= q_basis @ (q_basis.T @ g)
        g *= tilt_scale / max(np.abs(g).max(), 1e-12)
        members.append(member_from(phat_log, g))
    for base in extra_bases:
        if not p_hat.same_lattice(base):
            raise ValueError("extra Omega base must share the lattice of p_hat")
        members.append(member_from(base.log_p.ravel(), None))
    return members


@dataclass
class PythagoreanReport:
    n_pairs: int
    max_violation: float
    max_dual_violation: float
    entropy_mle: float
    min_entropy_margin: float
    moment_residual: float
    theta_hat: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_violation < 1e-8 and self.min_entropy_margin > -1e-9


def verify_pythagorean(feature_map, p_data: GridModel, p0: GridModel | None = None,
                       n_omega: int = 6, n_theta: int = 4, tilt_scale: float = 0.5,
                       theta_spread: float = 1.0, seed: int = 0) -> PythagoreanReport:
    """Check KL(p||p_t) = KL(p||p_hat) + KL(p_hat||p_t) over a (p, theta) sweep.

    p ranges over constructed Omega members (p_data and p_hat included; p0,
    when given, contributes the Omega member nearest to it), theta over random
    perturbations of the MLE.  Also checks the dual entropy form
    KL(p||p_hat) = H(p_hat) - H(p) and that p_hat has maximal entropy.
    """
    theta_hat, p_hat = project_mle(feature_map, p_data)
    mu_hat = p_hat.feature_moments(feature_map)
    mu_data = p_data.feature_moments(feature_map)
    moment_residual = float(np.max(np.abs(mu_hat - mu_data)))

    extra = [p0] if p0 is not None else []
    omegas = [p_data, p_hat] + omega_members(feature_map, p_hat, n_omega, tilt_scale,
                                             seed, extra_bases=extra)

    gen = _rng.stream(seed, _rng.TAG_EVAL, 1)
    thetas = [theta_hat + theta_spread * gen.standard_normal(theta_hat.size)
              for _ in range(n_theta)]
    fams = [p_hat.with_log_density(lambda pts, th=th: feature_map.value(pts) @ th)
            for th in thetas]

    h_hat = p_hat.entropy()
    max_v = 0.0
    max_dual = 0.0
    min_margin = np.inf
    pairs = 0
    for p in omegas:
        lhs_hat = p.kl(p_hat)
        max_dual = max(max_dual, abs(lhs_hat - (h_hat - p.entropy())))
        min_margin = min(min_margin, h_hat - p.entropy())
        for q in fams:
            v = abs(p.kl(q) - lhs_hat - p_hat.kl(q))
            max_v = max(max_v, v)
            pairs += 1
    return PythagoreanReport(pairs, max_v, max_dual, h_hat, float(min_margin),
                             moment_residual, theta_hat)


# -- monotone KL --------------------------------------------------------


@dataclass
class MonotoneKlReport:
    ks: list[int]
    kls: list[float]
    discretizer: str
    stationarity_error: float
    max_step_increase: float

    @property
    def monotone(self) -> bool:
        return self.max_step_increase <= 1e-9


def _lattice_kernel(net, grid: GridModel, step_size: float, noise_scale: float,
                    discretizer: str) -> tuple[np.ndarray, np.ndarray]:
    """Column-stochastic transition matrix P[to, from] and target mass pi.

    The proposal discretizes the Langevin update x' = x + s f'(x) + eta N(0,1)
    onto the lattice.  With discretizer="mala" an accept/reject step enforces
    detailed balance w.r.t. pi exactly, so pi is stationary to rounding and
    the data-processing inequality applies step by step; "euler" keeps the
    raw proposal, which is only approximately stationary.
    """
    if grid.dim != 1:
        raise ValueError("transition-matrix check is 1-d")
    x = grid.points().ravel()
    f = np.asarray(net.f(x[:, None]), dtype=np.float64)
    pi = np.exp(_normalize_log_mass(f))
    drift = np.asarray(net.grad_x(x[:, None]), dtype=np.float64).ravel()
    mean = x + step_size * drift
    # log proposal density, column i = from-state i
    z = (x[:, None] - mean[None, :]) / noise_scale
    logq = -0.5 * z * z
    logq -= logsumexp(logq, axis=0, keepdims=True)
    q = np.exp(logq)
    if discretizer == "euler":
        return q, pi
    if discretizer != "mala":
        raise ValueError(f"unknown discretizer '{discretizer}'")
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    # log acceptance ratio for i -> j: log pi_j + log q(i|j) - log pi_i - log q(j|i)
    log_ratio = (log_pi[:, None] + logq.T) - (log_pi[None, :] + logq)
    accept = np.exp(np.minimum(log_ratio, 0.0))
    p = q * accept
    np.fill_diagonal(p, 0.0)
    stay = 1.0 - p.sum(axis=0)
    p[np.arange(x.size), np.arange(x.size)] = stay
    return p, pi


def _kl_mass(q: np.ndarray, pi: np.ndarray) -> float:
    nz = q > 0
    return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(pi[nz]))))


def verify_monotone_kl(net, lo: float, hi: float, n: int, ks: list[int],
                       step_size: float = 0.05, noise_scale: float = 0.1,
                       discretizer: str = "mala",
                       init_lo: float = -1.0, init_hi: float = 1.0) -> MonotoneKlReport:
    """KL(q_K || p_theta) for K in `ks`, evolving a lattice chain exactly.

    q_0 is uniform mass on lattice cells inside [init_lo, init_hi]; each step
    multiplies by the transition matrix of the discretized Langevin kernel.
    """
    grid = GridModel.from_energy_net(net, lo, hi, n)
    p, pi = _lattice_kernel(net, grid, step_size, noise_scale, discretizer)
    x = grid.points().ravel()
    q = ((x >= init_lo) & (x <= init_hi)).astype(np.float64)
    if q.sum() == 0:
        raise ValueError("no lattice cells inside the init interval")
    q /= q.sum()

    ks = sorted(int(k) for k in ks)
    kls = []
    prev_k = 0
    for k in ks:
        for _ in range(k - prev_k):
            q = p @ q
        prev_k = k
        kls.append(_kl_mass(q, pi))
    stat_err = float(np.max(np.abs(p @ pi - pi)))
    increases = [kls[i + 1] - kls[i] for i in range(len(kls) - 1)]
    worst = float(max(increases)) if increases else 0.0
    return MonotoneKlReport(ks, kls, discretizer, stat_err, worst)
