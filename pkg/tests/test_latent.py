"""Tests for latent-space analyses.

LDA directions and Fisher ratios are checked against tiny hand-solved
configurations, and the moment statistics against closed-form values
for two-point and uniform distributions.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from conftest import make_identity_model, make_random_model, tiny_config
from vowelflow.latent import (
    DEFAULT_DENOISE_BETAS,
    DEFAULT_INTERP_ALPHAS,
    DegenerateProbeError,
    DisplacementVector,
    decode_batch,
    denoise,
    encode_batch,
    excess_kurtosis,
    fisher_ratio,
    gaussianity_report,
    interpolate,
    lda_fit,
    noise_displacement,
    project_scatter,
    sample,
    scatter_pair,
    skewness,
    write_csv,
    write_image_strip,
    write_pgm,
)
from vowelflow.numerics import Rng, ShapeError

# tiny hand-solvable LDA instance: classes differ only in the first axis
LDA_A = np.array([[0.0, 0.0], [0.0, 2.0]])
LDA_B = np.array([[4.0, 0.0], [4.0, 2.0]])


# ---------------------------------------------------------------------------
# encode / decode / sample


class TestEncodeDecode:
    def test_round_trip_batch(self):
        model = make_random_model(tiny_config(), seed=0, perturb_coupling=0.3)
        x = Rng(1).standard_normal((4, 1, 4, 4))
        z, lnp = encode_batch(model, x)
        assert z.shape == (4, 16) and lnp.shape == (4,)
        npt.assert_allclose(decode_batch(model, z), x, atol=1e-10)

    def test_decode_single_code(self):
        model = make_identity_model(tiny_config())
        z = Rng(2).standard_normal(16)
        out = decode_batch(model, z)
        assert out.shape == (1, 4, 4)
        npt.assert_array_equal(np.sort(out.reshape(-1)), np.sort(z))


class TestSample:
    def test_zero_temperature_collapses(self):
        model = make_identity_model(tiny_config())
        z, images = sample(model, Rng(3), 4, temperature=0.0)
        npt.assert_array_equal(z, 0.0)
        for i in range(1, 4):
            npt.assert_array_equal(images[i], images[0])

    def test_temperature_scales_codes(self):
        model = make_identity_model(tiny_config())
        z1, _ = sample(model, Rng(4), 8, temperature=1.0)
        z2, _ = sample(model, Rng(4), 8, temperature=0.25)
        npt.assert_allclose(z2, 0.25 * z1, rtol=1e-15)

    def test_same_seed_is_deterministic(self):
        model = make_random_model(tiny_config(), seed=5, perturb_coupling=0.3)
        _, im1 = sample(model, Rng(6), 3)
        _, im2 = sample(model, Rng(6), 3)
        npt.assert_array_equal(im1, im2)

    def test_invalid_arguments(self):
        model = make_identity_model(tiny_config())
        with pytest.raises(ValueError):
            sample(model, Rng(7), 0)
        with pytest.raises(ValueError):
            sample(model, Rng(7), 1, temperature=-0.1)


# ---------------------------------------------------------------------------
# interpolation


class TestInterpolate:
    def test_default_sweep_excludes_endpoints(self):
        npt.assert_allclose(DEFAULT_INTERP_ALPHAS, np.arange(1, 10) / 10.0, rtol=1e-12)

    def test_codes_are_linear_blend(self):
        model = make_identity_model(tiny_config())
        za = Rng(8).standard_normal(16)
        zb = Rng(9).standard_normal(16)
        res = interpolate(model, za, zb)
        assert res.codes.shape == (9, 16) and res.images.shape == (9, 1, 4, 4)
        for alpha, code in zip(res.alphas, res.codes):
            npt.assert_allclose(code, (1 - alpha) * za + alpha * zb, rtol=1e-12)

    def test_identity_model_blends_pixels(self):
        model = make_identity_model(tiny_config())
        za = Rng(10).standard_normal(16)
        zb = Rng(11).standard_normal(16)
        res = interpolate(model, za, zb)
        xa, xb = decode_batch(model, za), decode_batch(model, zb)
        for alpha, img in zip(res.alphas, res.images):
            npt.assert_allclose(img, (1 - alpha) * xa + alpha * xb, rtol=1e-12)

    def test_custom_alphas(self):
        model = make_identity_model(tiny_config())
        res = interpolate(model, np.zeros(16), np.ones(16), alphas=[0.0, 1.0])
        npt.assert_array_equal(res.codes[0], np.zeros(16))
        npt.assert_array_equal(res.codes[1], np.ones(16))

    def test_endpoints_are_exact(self):
        model = make_identity_model(tiny_config())
        za = Rng(32).standard_normal(16)
        zb = Rng(33).standard_normal(16)
        res = interpolate(model, za, zb, alphas=[0.0, 1.0])
        npt.assert_array_equal(res.codes[0], za)
        npt.assert_array_equal(res.codes[1], zb)

    def test_midpoint_hand_value(self):
        model = make_identity_model(tiny_config())
        za = np.zeros(16)
        za[0], za[1] = 0.0, 2.0
        zb = np.zeros(16)
        zb[0], zb[1] = 2.0, 0.0
        res = interpolate(model, za, zb, alphas=[0.5])
        npt.assert_allclose(res.codes[0][:2], [1.0, 1.0], rtol=1e-15)

    def test_convexity_per_coordinate(self):
        model = make_identity_model(tiny_config())
        za = Rng(34).standard_normal(16)
        zb = Rng(35).standard_normal(16)
        res = interpolate(model, za, zb)
        lo = np.minimum(za, zb)
        hi = np.maximum(za, zb)
        for code in res.codes:
            assert np.all(code >= lo - 1e-12) and np.all(code <= hi + 1e-12)

    def test_wrong_length_rejected(self):
        model = make_identity_model(tiny_config())
        with pytest.raises(ShapeError):
            interpolate(model, np.zeros(15), np.zeros(16))


# ---------------------------------------------------------------------------
# displacement denoising


class TestDisplacement:
    def test_hand_computed_mean_offset(self):
        clean = np.array([[0.0, 0.0], [2.0, 0.0]])
        noisy = np.array([[1.0, 1.0], [3.0, 1.0]])
        disp = noise_displacement(clean, noisy, snr_db=10.0)
        npt.assert_allclose(disp.vector, [1.0, 1.0], rtol=1e-15)
        assert (disp.n_clean, disp.n_noisy, disp.snr_db) == (2, 2, 10.0)
        npt.assert_allclose(disp.norm, math.sqrt(2.0), rtol=1e-15)

    def test_identical_sets_give_zero(self):
        z = Rng(29).standard_normal((5, 4))
        npt.assert_allclose(noise_displacement(z, z.copy()).vector, 0.0, atol=1e-15)

    def test_permutation_invariant(self):
        z_c = Rng(30).standard_normal((6, 3))
        z_n = Rng(31).standard_normal((4, 3))
        d1 = noise_displacement(z_c, z_n)
        d2 = noise_displacement(z_c[::-1], z_n[::-1])
        npt.assert_allclose(d1.vector, d2.vector, rtol=1e-12)
        assert (d1.n_clean, d1.n_noisy) == (6, 4)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            noise_displacement(np.zeros((2, 3)), np.zeros((3, 4)))
        with pytest.raises(ShapeError):
            noise_displacement(np.zeros((0, 3)), np.zeros((2, 3)))


class TestDenoise:
    def test_default_sweep_and_formula(self):
        model = make_identity_model(tiny_config())
        zn = Rng(12).standard_normal(16)
        xi = DisplacementVector(Rng(13).standard_normal(16), n_clean=5, n_noisy=5)
        res = denoise(model, zn, xi)
        npt.assert_allclose(res.betas, DEFAULT_DENOISE_BETAS, rtol=1e-15)
        npt.assert_allclose(res.betas, np.arange(9) / 10.0, atol=1e-12)
        for beta, code in zip(res.betas, res.codes):
            npt.assert_allclose(code, zn - beta * xi.vector, rtol=1e-12, atol=1e-15)

    def test_zero_beta_reproduces_input(self):
        model = make_identity_model(tiny_config())
        zn = Rng(14).standard_normal(16)
        xi = DisplacementVector(np.ones(16), n_clean=1, n_noisy=1)
        res = denoise(model, zn, xi)
        npt.assert_array_equal(res.codes[0], zn)
        npt.assert_array_equal(res.images[0], decode_batch(model, zn))

    def test_hand_computed_point(self):
        model = make_identity_model(tiny_config())
        zn = np.full(16, 3.0)
        zn[1] = 1.0
        xi = DisplacementVector(np.ones(16), n_clean=2, n_noisy=2)
        res = denoise(model, zn, xi, betas=[1.0])
        expected = zn - 1.0
        npt.assert_allclose(res.codes[0], expected, rtol=1e-15)

    def test_linear_in_beta(self):
        model = make_identity_model(tiny_config())
        zn = Rng(15).standard_normal(16)
        xi = DisplacementVector(Rng(16).standard_normal(16), n_clean=3, n_noisy=3)
        res = denoise(model, zn, xi, betas=[0.2, 0.4])
        npt.assert_allclose(res.codes[1] - zn, 2.0 * (res.codes[0] - zn), rtol=1e-12)

    def test_mismatched_displacement_rejected(self):
        model = make_identity_model(tiny_config())
        xi = DisplacementVector(np.ones(8), n_clean=1, n_noisy=1)
        with pytest.raises(ShapeError):
            denoise(model, np.zeros(16), xi)


# ---------------------------------------------------------------------------
# gaussianity


class TestMoments:
    def test_two_point_distribution_closed_form(self):
        # Bernoulli(1/4) sample realized exactly: moments have closed forms
        x = np.array([1.0, 0.0, 0.0, 0.0])
        p = 0.25
        npt.assert_allclose(skewness(x), (1 - 2 * p) / math.sqrt(p * (1 - p)), rtol=1e-12)
        npt.assert_allclose(
            excess_kurtosis(x), (1 - 6 * p * (1 - p)) / (p * (1 - p)), rtol=1e-12
        )

    def test_symmetric_data_has_zero_skew(self):
        x = np.array([-3.0, -1.0, 1.0, 3.0])
        npt.assert_allclose(skewness(x), 0.0, atol=1e-15)

    def test_normal_sample_is_near_zero(self):
        z = Rng(15).standard_normal((100_000, 8))
        rep = gaussianity_report(z)
        assert rep.n_samples == 100_000
        assert not rep.degenerate.any()
        assert rep.mean_abs_skewness < 0.05
        assert rep.mean_abs_excess_kurtosis < 0.05

    def test_uniform_sample_kurtosis(self):
        u = Rng(16).uniform(-1.0, 1.0, (100_000, 4))
        rep = gaussianity_report(u)
        npt.assert_allclose(rep.excess_kurtosis, -1.2, atol=0.05)
        npt.assert_allclose(rep.skewness, 0.0, atol=0.05)

    def test_degenerate_dimension_flagged(self):
        z = Rng(17).standard_normal((500, 3))
        z[:, 1] = 4.0
        rep = gaussianity_report(z)
        npt.assert_array_equal(rep.degenerate, [False, True, False])
        assert math.isnan(rep.skewness[1]) and math.isnan(rep.excess_kurtosis[1])
        assert math.isfinite(rep.mean_abs_skewness)

    def test_dimension_subset(self):
        z = Rng(36).standard_normal((1000, 6))
        full = gaussianity_report(z)
        sub = gaussianity_report(z, dims=[4, 1])
        npt.assert_array_equal(sub.dims, [4, 1])
        npt.assert_allclose(sub.skewness, full.skewness[[4, 1]], rtol=1e-12)
        npt.assert_allclose(sub.excess_kurtosis, full.excess_kurtosis[[4, 1]], rtol=1e-12)
        with pytest.raises(ShapeError):
            gaussianity_report(z, dims=[6])

    def test_too_few_samples_rejected(self):
        with pytest.raises(ShapeError):
            gaussianity_report(np.zeros((1, 4)))


class TestScatterPair:
    def test_distinct_dims_and_points(self):
        z = Rng(18).standard_normal((50, 6))
        pair = scatter_pair(z, Rng(19))
        assert pair.dim_i != pair.dim_j
        assert 0 <= pair.dim_i < 6 and 0 <= pair.dim_j < 6
        npt.assert_array_equal(pair.points, z[:, (pair.dim_i, pair.dim_j)])

    def test_deterministic_for_seed(self):
        z = Rng(20).standard_normal((10, 16))
        p1 = scatter_pair(z, Rng(21))
        p2 = scatter_pair(z, Rng(21))
        assert (p1.dim_i, p1.dim_j) == (p2.dim_i, p2.dim_j)

    def test_needs_two_dims(self):
        with pytest.raises(ShapeError):
            scatter_pair(np.zeros((5, 1)), Rng(22))


# ---------------------------------------------------------------------------
# LDA probe


class TestLdaFit:
    def test_hand_solved_direction(self):
        probe = lda_fit(LDA_A, LDA_B, labels=("aa", "iy"))
        npt.assert_allclose(probe.direction_1, [1.0, 0.0], atol=1e-12)
        npt.assert_allclose(probe.direction_2, [0.0, 1.0], atol=1e-12)
        npt.assert_allclose(probe.mean_a, [0.0, 1.0], rtol=1e-15)
        npt.assert_allclose(probe.mean_b, [4.0, 1.0], rtol=1e-15)
        assert probe.labels == ("aa", "iy")
        # lambda = 1e-3 * trace(S_w) / d with S_w = diag(0, 4)
        npt.assert_allclose(probe.shrinkage, 1e-3 * 4.0 / 2.0, rtol=1e-12)
        # zero within-class spread along (1, 0) with a 4.0 mean gap
        assert probe.fisher_ratio == math.inf

    def test_fisher_ratio_field_matches_helper(self):
        rng = Rng(40)
        za = rng.standard_normal((30, 5))
        zb = rng.standard_normal((30, 5)) + 1.5
        probe = lda_fit(za, zb)
        npt.assert_allclose(
            probe.fisher_ratio, fisher_ratio(za, zb, probe.direction_1), rtol=1e-12
        )
        assert probe.fisher_ratio >= 0.0

    def test_label_swap_flips_direction_keeps_ratio(self):
        rng = Rng(41)
        za = rng.standard_normal((25, 4))
        zb = rng.standard_normal((25, 4)) + 2.0
        p_ab = lda_fit(za, zb)
        p_ba = lda_fit(zb, za)
        npt.assert_allclose(p_ba.direction_1, -p_ab.direction_1, rtol=1e-10)
        npt.assert_allclose(p_ba.fisher_ratio, p_ab.fisher_ratio, rtol=1e-10)

    def test_global_scaling_invariance(self):
        rng = Rng(42)
        za = rng.standard_normal((25, 4))
        zb = rng.standard_normal((25, 4)) + 2.0
        p1 = lda_fit(za, zb)
        p2 = lda_fit(3.5 * za, 3.5 * zb)
        cos = abs(float(p1.direction_1 @ p2.direction_1))
        npt.assert_allclose(cos, 1.0, rtol=1e-10)
        npt.assert_allclose(p2.fisher_ratio, p1.fisher_ratio, rtol=1e-10)

    def test_directions_orthonormal(self):
        rng = Rng(23)
        za = rng.standard_normal((40, 6)) + 2.0
        zb = rng.standard_normal((40, 6)) - 2.0
        probe = lda_fit(za, zb)
        npt.assert_allclose(np.linalg.norm(probe.direction_1), 1.0, rtol=1e-12)
        npt.assert_allclose(np.linalg.norm(probe.direction_2), 1.0, rtol=1e-12)
        npt.assert_allclose(probe.direction_1 @ probe.direction_2, 0.0, atol=1e-10)

    def test_recovers_separating_axis(self):
        rng = Rng(24)
        axis = np.zeros(8)
        axis[3] = 1.0
        za = rng.standard_normal((200, 8))
        zb = rng.standard_normal((200, 8)) + 10.0 * axis
        probe = lda_fit(za, zb)
        assert abs(probe.direction_1 @ axis) > 0.95
        pa = za @ probe.direction_1
        pb = zb @ probe.direction_1
        assert pa.max() < pb.min()

    def test_direction_2_sign_is_deterministic(self):
        rng = Rng(25)
        za = rng.standard_normal((30, 4))
        zb = rng.standard_normal((30, 4)) + np.array([5.0, 0, 0, 0])
        probe = lda_fit(za, zb)
        pivot = int(np.argmax(np.abs(probe.direction_2)))
        assert probe.direction_2[pivot] > 0

    def test_identical_means_rejected(self):
        z = Rng(26).standard_normal((10, 3))
        with pytest.raises(DegenerateProbeError):
            lda_fit(z, z.copy())

    def test_point_mass_classes_fall_back_to_mean_gap(self):
        za = np.array([[0.0, 0.0], [0.0, 0.0]])
        zb = np.array([[4.0, 0.0], [4.0, 0.0]])
        probe = lda_fit(za, zb)
        npt.assert_allclose(probe.direction_1, [1.0, 0.0], atol=1e-15)
        npt.assert_allclose(probe.direction_2, [0.0, 1.0], atol=1e-15)
        assert probe.fisher_ratio == math.inf

    def test_too_few_samples_rejected(self):
        with pytest.raises(ShapeError):
            lda_fit(np.array([[0.0, 0.0]]), LDA_B)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            lda_fit(np.zeros((3, 2)), np.zeros((3, 4)))


class TestFisherRatio:
    def test_infinite_when_within_is_zero(self):
        probe = lda_fit(LDA_A, LDA_B)
        assert fisher_ratio(LDA_A, LDA_B, probe.direction_1) == math.inf

    def test_zero_when_gap_is_zero(self):
        assert fisher_ratio(LDA_A, LDA_B, np.array([0.0, 1.0])) == 0.0

    def test_hand_computed_value(self):
        za = np.array([[0.0], [2.0]])
        zb = np.array([[10.0], [12.0]])
        npt.assert_allclose(fisher_ratio(za, zb, np.array([1.0])), 100.0 / 4.0, rtol=1e-12)

    def test_scale_invariant_in_direction(self):
        rng = Rng(27)
        za = rng.standard_normal((20, 3))
        zb = rng.standard_normal((20, 3)) + 1.0
        w = np.array([1.0, 2.0, -1.0])
        npt.assert_allclose(
            fisher_ratio(za, zb, w), fisher_ratio(za, zb, 7.5 * w), rtol=1e-12
        )

    def test_zero_direction_rejected(self):
        with pytest.raises(ValueError):
            fisher_ratio(LDA_A, LDA_B, np.zeros(2))


class TestProjectScatter:
    def test_oracle_probe_projects_to_plane(self):
        probe = lda_fit(LDA_A, LDA_B)
        npt.assert_allclose(project_scatter(probe, LDA_A), LDA_A, atol=1e-12)
        npt.assert_allclose(project_scatter(probe, LDA_B), LDA_B, atol=1e-12)

    def test_wrong_dimension_rejected(self):
        probe = lda_fit(LDA_A, LDA_B)
        with pytest.raises(ShapeError):
            project_scatter(probe, np.zeros((4, 3)))


# ---------------------------------------------------------------------------
# artifact export


class TestExports:
    def test_pgm_bytes(self, tmp_path):
        path = tmp_path / "img.pgm"
        write_pgm(path, np.array([[0.0, 1.0], [2.0, 3.0]]))
        data = path.read_bytes()
        assert data == b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255])

    def test_pgm_constant_image(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(path, np.full((2, 3), 7.0))
        assert path.read_bytes() == b"P5\n3 2\n255\n" + bytes(6)

    def test_pgm_accepts_channel_axis(self, tmp_path):
        path = tmp_path / "chan.pgm"
        write_pgm(path, np.zeros((1, 2, 2)))
        assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
        with pytest.raises(ShapeError):
            write_pgm(path, np.zeros((3, 2, 2)))

    def test_image_strip_layout(self, tmp_path):
        path = tmp_path / "strip.pgm"
        imgs = Rng(28).standard_normal((3, 1, 4, 4))
        write_image_strip(path, imgs)
        data = path.read_bytes()
        assert data.startswith(b"P5\n12 4\n255\n")
        assert len(data) - len(b"P5\n12 4\n255\n") == 48

    def test_csv_exact_bytes(self, tmp_path):
        path = tmp_path / "vals.csv"
        write_csv(path, ["a", "b"], [(1, 0.5), ("x", 0.123456789012345)])
        assert path.read_text() == "a,b\n1,0.5\nx,0.123456789\n"
