"""Information-geometry identities, exact on the lattice."""

import numpy as np
import numpy.testing as npt
import pytest

from srmc import gridmodel as gm
from srmc import nets, theory


def gaussian_grid(mu, sigma, lo=-8, hi=8, n=1024):
    def logpdf(pts):
        return -0.5 * ((pts[:, 0] - mu) / sigma) ** 2
    return gm.GridModel.from_log_density(logpdf, lo, hi, n)


def mixture_grid(lo=-8, hi=8, n=1024):
    def logpdf(pts):
        x = pts[:, 0]
        a = np.exp(-0.5 * ((x + 1.0) / 0.4) ** 2)
        b = np.exp(-0.5 * ((x - 1.5) / 0.7) ** 2)
        return np.log(0.3 * a + 0.7 * b)
    return gm.GridModel.from_log_density(logpdf, lo, hi, n)


class TestProjectMle:
    def test_recovers_gaussian_natural_params(self):
        # matching N(mu, s^2) with h = (x, x^2) gives theta = (mu/s^2, -1/(2 s^2))
        mu, sigma = 0.7, 0.6
        target = gaussian_grid(mu, sigma)
        theta, p_hat = theory.project_mle(nets.Poly1D(2), target)
        npt.assert_allclose(theta, [mu / sigma ** 2, -1.0 / (2 * sigma ** 2)], atol=1e-8)
        npt.assert_allclose(p_hat.kl(target), 0.0, atol=1e-10)

    def test_moment_match_on_mixture(self):
        fm = nets.Poly1D(2)
        target = mixture_grid()
        theta, p_hat = theory.project_mle(fm, target)
        npt.assert_allclose(p_hat.feature_moments(fm), target.feature_moments(fm),
                            atol=1e-11)

    def test_quartic_family_on_mixture(self):
        fm = nets.Poly1D(4)
        target = mixture_grid()
        _, p_hat = theory.project_mle(fm, target)
        npt.assert_allclose(p_hat.feature_moments(fm), target.feature_moments(fm),
                            atol=1e-10)

    def test_unattainable_moments_raise(self):
        # E[x^2] of the target exceeds what support on [-1, 1] can produce
        target = gaussian_grid(1.0, 0.5, lo=-1, hi=1, n=256)
        feats_target = np.array([0.0, 4.0])
        with pytest.raises(theory.MomentSolveError):
            theory.solve_moments(np.zeros(256),
                                 nets.Poly1D(2).value(target.points()), feats_target)


class TestOmegaSweep:
    def test_members_match_moments(self):
        fm = nets.Poly1D(2)
        target = gaussian_grid(0.2, 0.5)
        _, p_hat = theory.project_mle(fm, target)
        mu_hat = p_hat.feature_moments(fm)
        members = theory.omega_members(fm, p_hat, n=5, tilt_scale=0.6, seed=3)
        assert len(members) == 5
        for m in members:
            npt.assert_allclose(m.feature_moments(fm), mu_hat, atol=1e-11)

    def test_members_differ_from_projection(self):
        fm = nets.Poly1D(2)
        _, p_hat = theory.project_mle(fm, gaussian_grid(0.2, 0.5))
        members = theory.omega_members(fm, p_hat, n=2, tilt_scale=0.6, seed=3)
        for m in members:
            assert m.kl(p_hat) > 1e-4


class TestPythagorean:
    def test_gaussian_target(self):
        rep = theory.verify_pythagorean(nets.Poly1D(2), gaussian_grid(0.4, 0.7), seed=0)
        assert rep.n_pairs >= 20
        assert rep.max_violation < 1e-10
        assert rep.max_dual_violation < 1e-10
        assert rep.min_entropy_margin > -1e-12
        assert rep.moment_residual < 1e-11
        assert rep.passed

    def test_mixture_target(self):
        target = mixture_grid()
        rep = theory.verify_pythagorean(nets.Poly1D(2), target, seed=1)
        assert rep.max_violation < 1e-10
        assert rep.passed
        # the mixture is not in the family, so its entropy is strictly lower
        # than the projection's
        assert rep.entropy_mle - target.entropy() > 1e-4

    def test_dual_form_for_target(self):
        # KL(p || p_hat) = H(p_hat) - H(p) whenever moments match
        fm = nets.Poly1D(2)
        target = mixture_grid()
        _, p_hat = theory.project_mle(fm, target)
        npt.assert_allclose(target.kl(p_hat), p_hat.entropy() - target.entropy(),
                            atol=1e-11)

    def test_uniform_p0_member(self):
        target = gaussian_grid(0.3, 0.6)
        p0 = target.with_log_density(lambda pts: np.zeros(len(pts)))
        rep = theory.verify_pythagorean(nets.Poly1D(2), target, p0=p0, seed=2)
        assert rep.max_violation < 1e-10

    def test_seeded_reproducible(self):
        a = theory.verify_pythagorean(nets.Poly1D(2), gaussian_grid(0.4, 0.7), seed=5)
        b = theory.verify_pythagorean(nets.Poly1D(2), gaussian_grid(0.4, 0.7), seed=5)
        assert a.max_violation == b.max_violation


def quartic_net():
    # asymmetric bimodal: f = 0.5 x + 2 x^2 - 3 x^4
    return nets.expfam_energy_net(nets.Poly1D(4), np.array([0.5, 2.0, 0.0, -3.0]))


class TestMonotoneKl:
    KS = [0, 1, 2, 5, 10, 25, 50, 100]

    def test_mala_kernel_exactly_stationary(self):
        net = quartic_net()
        rep = theory.verify_monotone_kl(net, -3, 3, 256, self.KS,
                                        step_size=0.02, noise_scale=0.1)
        assert rep.stationarity_error < 1e-12

    def test_mala_monotone(self):
        net = quartic_net()
        rep = theory.verify_monotone_kl(net, -3, 3, 256, self.KS,
                                        step_size=0.02, noise_scale=0.1)
        assert rep.monotone, f"KL increased by {rep.max_step_increase:.3e}"
        assert rep.kls[0] > rep.kls[-1]
        assert all(np.isfinite(rep.kls))

    def test_kl_actually_decays(self):
        net = quartic_net()
        rep = theory.verify_monotone_kl(net, -3, 3, 256, self.KS,
                                        step_size=0.02, noise_scale=0.1)
        assert rep.kls[-1] < 0.5 * rep.kls[0]

    def test_euler_variant_reports(self):
        net = quartic_net()
        rep = theory.verify_monotone_kl(net, -3, 3, 256, [0, 5, 25],
                                        step_size=0.02, noise_scale=0.1,
                                        discretizer="euler")
        assert rep.discretizer == "euler"
        assert len(rep.kls) == 3

    def test_transition_columns_stochastic(self):
        net = quartic_net()
        grid = gm.GridModel.from_energy_net(net, -3, 3, 128)
        p, pi = theory._lattice_kernel(net, grid, 0.02, 0.1, "mala")
        npt.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
        assert p.min() >= 0.0
        npt.assert_allclose(pi.sum(), 1.0, atol=1e-12)

    def test_detailed_balance(self):
        net = quartic_net()
        grid = gm.GridModel.from_energy_net(net, -3, 3, 128)
        p, pi = theory._lattice_kernel(net, grid, 0.02, 0.1, "mala")
        flux = p * pi[None, :]
        npt.assert_allclose(flux, flux.T, atol=1e-15)

    def test_unknown_discretizer(self):
        with pytest.raises(ValueError):
            theory.verify_monotone_kl(quartic_net(), -3, 3, 64, [0, 1],
                                      discretizer="heun")
