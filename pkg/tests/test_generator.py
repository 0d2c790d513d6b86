import numpy as np
import pytest

from srmc.generator import interpolate, reconstruct, vary_k, flow_pullback
from srmc.nets import Poly1D, conv_energy_net, expfam_energy_net
from srmc.sampling import ChainDivergenceError, SamplerConfig, draw_p0, run_deterministic, short_run_sample
from srmc.tensor import ShapeError


def quad_net(theta=(4.0, -2.0)):
    return expfam_energy_net(Poly1D(2), theta0=list(theta))


def quartic_net():
    # state-dependent curvature, so pullback bugs that reuse a single
    # state would show up
    return expfam_energy_net(Poly1D(4), theta0=[0.5, 1.0, 0.0, -0.8])


class FlatNet:
    """Just enough surface for a k=0 flow over a big flat input."""

    dtype = np.dtype(np.float64)
    input_shape = (1_000_000,)


# -- interpolation ------------------------------------------------------


def test_interpolate_endpoints_bit_exact():
    net = quad_net()
    z1 = draw_p0((1,), 1, seed=1)[0]
    z2 = draw_p0((1,), 1, seed=2)[0]
    z, x = interpolate(net, z1, z2, [1.0, 0.8, 0.5, 0.0], k=12, step_size=0.01)
    assert z.shape == (4, 1) and x.shape == (4, 1)
    assert z[0].tobytes() == z1.tobytes()
    assert z[-1].tobytes() == z2.tobytes()
    # per-row evaluation makes the batched flow identical to single runs
    assert x[0].tobytes() == run_deterministic(net, z1[None], 12, step_size=0.01)[0].tobytes()
    assert x[-1].tobytes() == run_deterministic(net, z2[None], 12, step_size=0.01)[0].tobytes()


def test_interpolate_preserves_variance():
    net = FlatNet()
    rng = np.random.default_rng(0)
    z1 = rng.uniform(-1.0, 1.0, size=net.input_shape)
    z2 = rng.uniform(-1.0, 1.0, size=net.input_shape)
    rhos = np.linspace(0.0, 1.0, 9)
    z, x = interpolate(net, z1, z2, rhos, k=0)
    assert x.tobytes() == z.tobytes()
    v = z.var(axis=1)
    assert np.all(np.abs(v - 1.0 / 3.0) < 0.02 / 3.0)


def test_interpolate_validation():
    net = quad_net()
    z = np.zeros(1)
    with pytest.raises(ValueError, match="lie in"):
        interpolate(net, z, z, [0.0, 1.2], k=1)
    with pytest.raises(ValueError, match="lie in"):
        interpolate(net, z, z, [-0.1], k=1)
    with pytest.raises(ValueError, match="at least one"):
        interpolate(net, z, z, [], k=1)
    with pytest.raises(ShapeError):
        interpolate(net, np.zeros(2), z, [0.5], k=1)


# -- pullback through the unrolled chain --------------------------------


def test_flow_pullback_matches_finite_differences():
    net = quartic_net()
    k, s = 7, 0.01
    z = np.array([[-0.5], [0.3], [1.2]])
    target = np.array([[0.1], [-0.2], [0.4]])

    def loss(zv):
        xv = run_deterministic(net, zv, k, step_size=s)
        return 0.5 * float(np.sum((xv - target) ** 2))

    x, states = run_deterministic(net, z, k, step_size=s, return_states=True)
    g = flow_pullback(net, states, x - target, step_size=s)

    h = 1e-6
    fd = np.zeros_like(z)
    for i in range(z.shape[0]):
        zp, zm = z.copy(), z.copy()
        zp[i, 0] += h
        zm[i, 0] -= h
        fd[i, 0] = (loss(zp) - loss(zm)) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-10)


def test_flow_pullback_empty_chain_is_identity():
    net = quad_net()
    r = np.array([[0.7], [-0.3]])
    out = flow_pullback(net, [], r, step_size=0.01)
    assert out is r


# -- reconstruction -----------------------------------------------------


def test_reconstruct_affine_flow_recovers_start():
    # theta (4, -2) makes each step affine: x' = 0.04 + 0.96 x, so the
    # flow is exactly invertible and z should be recovered
    net = quad_net()
    zstar = draw_p0((1,), 6, seed=11)
    target = run_deterministic(net, zstar, 25, step_size=0.01)
    rec = reconstruct(net, target, 25, step_size=0.01)
    assert rec.converged
    assert rec.mse < 1e-12
    assert np.all(np.diff(rec.trajectory) < 0)
    np.testing.assert_allclose(rec.z, zstar, atol=1e-5)
    np.testing.assert_allclose(rec.x, target, atol=1e-6)


def test_reconstruct_nonlinear_flow():
    net = quartic_net()
    zstar = draw_p0((1,), 4, seed=21)
    target = run_deterministic(net, zstar, 20, step_size=0.01)
    rec = reconstruct(net, target, 20, step_size=0.01)
    assert rec.mse < 1e-10
    assert np.all(np.diff(rec.trajectory) < 0)
    # each step has positive slope everywhere we visit, so the flow is
    # injective and the found start is the true one
    np.testing.assert_allclose(rec.z, zstar, atol=1e-3)


def test_reconstruct_conv_self():
    net = conv_energy_net(input_size=32, in_channels=1, n_f=8, seed=5)
    zstar = draw_p0((1, 32, 32), 2, seed=7)
    target = run_deterministic(net, zstar, 10)
    rec = reconstruct(net, target, 10, max_iters=60)
    assert rec.mse < 1e-5
    assert np.all(np.diff(rec.trajectory) < 0)


def test_reconstruct_divergence_raises():
    net = quad_net(theta=(0.0, 3.0))     # f grows like +3x^2: flow explodes
    with pytest.raises(ChainDivergenceError):
        reconstruct(net, np.array([5.0]), 40, step_size=0.1)


def test_reconstruct_shapes_and_k0():
    net = quad_net()
    single = reconstruct(net, np.array([0.3]), 0)
    assert single.z.shape == (1,) and single.x.shape == (1,)
    assert single.mse == 0.0          # k=0 flow is the identity
    batch = reconstruct(net, np.full((3, 1), 0.3), 3, step_size=0.01)
    assert batch.z.shape == (3, 1) and batch.x.shape == (3, 1)
    assert batch.mse < 1e-12


def test_reconstruct_validation():
    net = quad_net()
    with pytest.raises(ShapeError, match="target"):
        reconstruct(net, np.zeros((3, 2)), 1)
    with pytest.raises(ShapeError, match="z0"):
        reconstruct(net, np.zeros((3, 1)), 1, z0=np.zeros((2, 1)))
    rec = reconstruct(net, np.array([0.5]), 5, step_size=0.01, z0=np.array([0.0]))
    assert rec.mse < 1e-10


# -- step-budget studies ------------------------------------------------


def test_vary_k_chains_share_noise_prefix():
    net = quad_net()
    recs = vary_k(net, [0, 5, 10], batch=8, seed=3, t=2,
                  step_size=0.01, noise_scale=0.2)
    assert [r.k for r in recs] == [0, 5, 10]
    assert recs[0].x.tobytes() == draw_p0((1,), 8, seed=3, t=2).tobytes()

    # replay the recorded noise for steps 5..9 on top of the K=5 state:
    # that must land exactly on the K=10 state
    cfg = SamplerConfig(k=10, step_size=0.01, noise_scale=0.2, record_noise=True)
    _, chains = short_run_sample(net, cfg, 8, seed=3, t=2)
    noise = np.stack([c.noise for c in chains])
    x = recs[1].x.copy()
    step_c, noise_c = np.float64(0.01), np.float64(0.2)
    for s in range(5, 10):
        _, g = net.f_and_grad_x(x)
        x = (x + step_c * g) + noise_c * noise[:, s]
    assert x.tobytes() == recs[2].x.tobytes()


def test_vary_k_diagnostics():
    net = quad_net(theta=(8.0, -4.0))
    recs = vary_k(net, [0, 50], batch=64, seed=9, step_size=0.01, noise_scale=0.2)
    assert recs[0].saturation == 0.0
    assert recs[0].grad_mag == 0.0
    assert 0.0 <= recs[1].saturation <= 1.0
    assert recs[1].grad_mag > 0.0
    # near-stationary chains at a mean-one target spill past +1 regularly
    assert recs[1].saturation > 0.05


def test_vary_k_validation():
    net = quad_net()
    with pytest.raises(ValueError, match="at least one"):
        vary_k(net, [], batch=2, seed=0)
    with pytest.raises(ValueError, match=">= 0"):
        vary_k(net, [3, -1], batch=2, seed=0)
