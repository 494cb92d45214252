import numpy as np
import pytest
from scipy import stats

from tokenfold.diffusion import (
    IGSO3Table,
    NoiseSchedule,
    build_igso3_table,
    cosine_alpha_bar,
    forward_noise_latent,
    forward_noise_translation,
    igso3_density,
    igso3_expected_omega,
    igso3_lmax,
    igso3_sample,
    igso3_sample_omega,
    make_schedule,
)
from tokenfold.errors import ConfigError, ShapeMismatch
from tokenfold.geometry import rotation_angle


class TestSchedule:
    def test_linear_shapes(self):
        s = make_schedule(100, "linear")
        assert s.beta.shape == (100,)
        assert np.all(np.diff(s.alpha_bar) < 0)

    def test_cosine_matches_closed_form(self):
        """Built schedule alpha_bar equals the closed-form cross-check up to
        the beta clipping (which never triggers below T=1000 at s=0.008)."""
        T = 200
        s = make_schedule(T, "cosine")
        ref = cosine_alpha_bar(T)
        # clipping can only lower alpha_bar, so check where no clip applied
        unclipped = s.beta < 0.999
        assert np.abs(s.alpha_bar[unclipped] - ref[unclipped]).max() < 1e-9

    def test_first_step_nearly_clean(self):
        s = make_schedule(200, "cosine")
        assert s.alpha_bar[0] > 0.99

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_schedule(10, "quadratic")

    def test_too_short(self):
        with pytest.raises(ConfigError):
            make_schedule(1)

    def test_cosine_needs_enough_steps(self):
        # the near-clean first step floor rejects very coarse cosine schedules
        with pytest.raises(ConfigError):
            make_schedule(10, "cosine")

    def test_validation_rejects_inconsistent_cumprod(self):
        s = make_schedule(10, "linear")
        with pytest.raises(ConfigError):
            NoiseSchedule(T=10, beta=s.beta, alpha_bar=s.alpha_bar * 0.9)

    def test_posterior_variance(self):
        s = make_schedule(50)
        assert s.posterior_variance(0) == 0.0
        for t in (1, 25, 49):
            expect = s.beta[t] * (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t])
            assert abs(s.posterior_variance(t) - expect) < 1e-15


class TestForwardNoising:
    def test_t0_inversion_recovers_x0(self):
        """At t=0 the noising is invertible back to x0 exactly (alpha_bar[0]
        known), the anchor for the reverse recursion."""
        s = make_schedule(100)
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(16, 8))
        eps = rng.normal(size=(16, 8))
        xt = forward_noise_latent(x0, 0, eps, s)
        ab = s.alpha_bar[0]
        back = (xt - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        assert np.abs(back - x0).max() < 1e-12

    def test_statistics_at_late_t(self):
        s = make_schedule(100)
        rng = np.random.default_rng(1)
        x0 = np.full((200, 50), 3.0)
        eps = rng.normal(size=(200, 50))
        xt = forward_noise_latent(x0, 99, eps, s)
        # variance-preserving: late x_t is dominated by the noise term
        assert abs(xt.std() - 1.0) < 0.05

    def test_shape_mismatch(self):
        s = make_schedule(50)
        with pytest.raises(ShapeMismatch):
            forward_noise_latent(np.zeros(3), 0, np.zeros(4), s)

    def test_step_bounds(self):
        s = make_schedule(50)
        with pytest.raises(ConfigError):
            forward_noise_latent(np.zeros(3), 50, np.zeros(3), s)

    def test_translation_helper(self):
        s = make_schedule(50)
        out = forward_noise_translation(np.ones(3), 3, s, np.zeros(3))
        assert np.allclose(out, np.sqrt(s.alpha_bar[3]) * np.ones(3))
        with pytest.raises(ShapeMismatch):
            forward_noise_translation(np.ones(4), 3, s, np.zeros(4))


class TestIGSO3Density:
    def test_normalizes_by_quadrature(self):
        omega = np.linspace(1e-6, np.pi, 20001)
        trapz = getattr(np, "trapezoid", np.trapz)
        for sigma in (0.1, 0.5, 1.0):
            pdf = igso3_density(omega, sigma, igso3_lmax(sigma)) * (1 - np.cos(omega)) / np.pi
            assert abs(trapz(pdf, omega) - 1.0) < 1e-6

    def test_lmax_adaptive(self):
        assert igso3_lmax(0.05) > igso3_lmax(0.5)
        assert 10 <= igso3_lmax(10.0) <= 5000
        assert igso3_lmax(0.001) == 5000

    def test_small_omega_limit(self):
        sigma = 0.5
        l_max = igso3_lmax(sigma)
        near = igso3_density(1e-7, sigma, l_max)
        at = igso3_density(1e-5, sigma, l_max)
        assert abs(near - at) / near < 1e-3

    def test_concentrates_at_small_sigma(self):
        small = igso3_expected_omega(0.1, igso3_lmax(0.1))
        large = igso3_expected_omega(1.5, igso3_lmax(1.5))
        assert small < 0.3
        assert large > 1.5  # approaches the uniform mean (pi/2 + ~0.57)

    def test_input_validation(self):
        with pytest.raises(ConfigError):
            igso3_density(0.5, -1.0, 10)
        with pytest.raises(ConfigError):
            igso3_density(4.0, 0.5, 10)


@pytest.fixture(scope="module")
def table():
    return build_igso3_table(np.linspace(0.1, 1.5, 15))


class TestIGSO3Table:
    def test_cdf_rows_valid(self, table):
        assert np.all(np.diff(table.cdf, axis=1) >= 0)
        assert np.abs(table.cdf[:, -1] - 1).max() < 1e-9

    def test_save_load_roundtrip(self, table, tmp_path):
        p = tmp_path / "igso3.npz"
        table.save(p)
        loaded = IGSO3Table.load(p)
        assert loaded.cache_key() == table.cache_key()
        assert np.array_equal(loaded.cdf, table.cdf)

    def test_sigma_out_of_range(self, table):
        with pytest.raises(ConfigError):
            igso3_sample_omega(5.0, table, np.random.default_rng(0))

    def test_sample_histogram_matches_uniform_marginal(self):
        """At large sigma the angle law tends to the Haar marginal
        (1 - cos omega)/pi; chi-squared on 1e5 draws."""
        table = build_igso3_table(np.array([2.5]))
        rng = np.random.default_rng(42)
        draws = igso3_sample_omega(2.5, table, rng, size=100_000)
        edges = np.linspace(0, np.pi, 21)
        observed, _ = np.histogram(draws, bins=edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        pdf = (1 - np.cos(centers)) / np.pi
        expected = pdf * np.diff(edges) * draws.size
        expected *= observed.sum() / expected.sum()
        _, p = stats.chisquare(observed, expected)
        assert p > 0.01

    def test_rotation_sampler_angle_distribution(self, table):
        rng = np.random.default_rng(7)
        angles = [rotation_angle(igso3_sample(0.3, table, rng)) for _ in range(200)]
        assert 0 < np.mean(angles) < np.pi
        # angles should cluster near the density's expectation at this sigma
        assert abs(np.mean(angles) - igso3_expected_omega(0.3, igso3_lmax(0.3))) < 0.1

    def test_expected_omega_monotone_in_sigma(self):
        vals = [igso3_expected_omega(s, igso3_lmax(s)) for s in (0.2, 0.5, 1.0)]
        assert vals[0] < vals[1] < vals[2]

    def test_clamped_negative_counted(self):
        table = build_igso3_table(np.array([0.05]), omega_resolution=512)
        assert table.clamped_negative >= 0  # bookkeeping present and nonnegative
