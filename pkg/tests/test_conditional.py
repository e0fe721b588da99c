import numpy as np
import pytest

from src.conditional import (
    bbox_method1,
    bbox_method2,
    condition_batch,
    condition_on_depth,
    conditional_densities,
    factorized_density,
    marginal,
    method2_extents,
    permute_for_axis,
    unpermute_for_axis,
)
from src.errors import InvalidConfigError
from src.scene import Axis, BoxMode, Gaussian3D, SliceSpec, build_covariance, evaluate_density
from src.scene.gaussians import covariances

from .conftest import random_gaussian


IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def centered_spec(axis: Axis, t: float, size: int = 24) -> SliceSpec:
    """Slice whose pixel centers cover [-size/2, size/2]."""
    return SliceSpec(axis=axis, t=t, width=size, height=size, origin=(-size / 2 + 0.5, -size / 2 + 0.5))


def unpermute_point(axis: Axis, u: float, v: float, t: float) -> np.ndarray:
    point = np.empty(3)
    iu, iv, it = axis.permutation
    point[iu], point[iv], point[it] = u, v, t
    return point


def pixel_density_scan(g: Gaussian3D, spec: SliceSpec) -> np.ndarray:
    """(height, width) direct density at every pixel center."""
    return evaluate_density(g, spec.world_points())


class TestPermutation:
    def test_z_is_identity(self, rng):
        cov = np.cov(rng.normal(size=(3, 10)))
        mean = rng.normal(size=3)
        cov_p, mean_p = permute_for_axis(cov, mean, Axis.Z)
        np.testing.assert_array_equal(cov_p, cov)
        np.testing.assert_array_equal(mean_p, mean)

    def test_x_puts_x_last(self):
        _, mean_p = permute_for_axis(np.eye(3), np.array([1.0, 2.0, 3.0]), Axis.X)
        np.testing.assert_array_equal(mean_p, [2.0, 3.0, 1.0])

    @pytest.mark.parametrize("axis", list(Axis))
    def test_symmetric_permutation_and_inverse(self, rng, axis):
        cov = np.cov(rng.normal(size=(3, 10)))
        mean = rng.normal(size=3)
        cov_p, mean_p = permute_for_axis(cov, mean, axis)
        perm = axis.permutation
        for i in range(3):
            for j in range(3):
                assert cov_p[i, j] == cov[perm[i], perm[j]]
        cov_back, mean_back = unpermute_for_axis(cov_p, mean_p, axis)
        np.testing.assert_array_equal(cov_back, cov)
        np.testing.assert_array_equal(mean_back, mean)


class TestMarginal:
    def test_at_mean(self, rng):
        g = random_gaussian(rng)
        _, density = marginal(g, Axis.Z, float(g.mean[2]))
        assert density == 1.0

    def test_two_sigma_offset(self):
        g = Gaussian3D(mean=np.zeros(3), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        m, density = marginal(g, Axis.Y, 2.0)
        assert m.var_t == pytest.approx(1.0)
        assert density == pytest.approx(np.exp(-2.0), rel=1e-12)

    @pytest.mark.parametrize("axis", list(Axis))
    def test_reads_diagonal_entry(self, rng, axis):
        g = random_gaussian(rng)
        cov = build_covariance(g)
        t = float(rng.normal())
        m, density = marginal(g, axis, t)
        k = axis.index
        assert m.mu_t == g.mean[k]
        assert m.var_t == pytest.approx(cov[k, k], rel=1e-12)
        assert density == pytest.approx(np.exp(-0.5 * (t - g.mean[k]) ** 2 / cov[k, k]), rel=1e-12)


class TestConditionOnDepth:
    def test_uncorrelated_depth(self):
        g = Gaussian3D(mean=np.array([1.0, 2.0, 3.0]), log_scale=np.log([1.0, 2.0, 3.0]), rotation=IDENTITY_Q)
        for t in (-4.0, 3.0, 10.0):
            c = condition_on_depth(g, Axis.Z, t)
            np.testing.assert_allclose(c.mu_uv, [1.0, 2.0])
            np.testing.assert_allclose(c.cov_uv, np.diag([1.0, 4.0]), atol=1e-12)

    def test_zero_offset_keeps_mean(self, rng):
        g = random_gaussian(rng)
        c = condition_on_depth(g, Axis.X, float(g.mean[0]))
        np.testing.assert_allclose(c.mu_uv, [g.mean[1], g.mean[2]], atol=1e-12)

    @pytest.mark.parametrize("axis", list(Axis))
    def test_matches_restricted_quadratic(self, rng, axis):
        g = random_gaussian(rng)
        t = float(g.mean[axis.index] + rng.normal())
        c = condition_on_depth(g, axis, t)
        precision = np.linalg.inv(build_covariance(g))

        # grid search for the argmin of the quadratic form on the plane
        us = c.mu_uv[0] + np.linspace(-1.0, 1.0, 401)
        vs = c.mu_uv[1] + np.linspace(-1.0, 1.0, 401)
        uu, vv = np.meshgrid(us, vs)
        points = np.stack([uu, vv, np.full_like(uu, t)], axis=-1)
        iu, iv, it = axis.permutation
        world = np.empty_like(points)
        world[..., iu], world[..., iv], world[..., it] = points[..., 0], points[..., 1], points[..., 2]
        d = world - g.mean
        quad = np.einsum("...i,ij,...j->...", d, precision, d)
        best = np.unravel_index(np.argmin(quad), quad.shape)
        assert abs(uu[best] - c.mu_uv[0]) <= 0.005 + 1e-12
        assert abs(vv[best] - c.mu_uv[1]) <= 0.005 + 1e-12

        # curvature of the restricted form is the in-plane precision block
        block = precision[np.ix_([iu, iv], [iu, iv])]
        np.testing.assert_allclose(c.cov_uv, np.linalg.inv(block), rtol=1e-9, atol=1e-12)

    def test_schur_complement_shrinks_block(self, rng):
        for _ in range(20):
            g = random_gaussian(rng)
            c = condition_on_depth(g, Axis.Z, 0.3)
            block = build_covariance(g)[:2, :2]
            assert np.max(np.linalg.eigvalsh(c.cov_uv)) <= np.max(np.linalg.eigvalsh(block)) + 1e-12
            assert np.min(np.linalg.eigvalsh(c.cov_uv)) >= -1e-12


class TestFactorizedDensity:
    def test_peak(self, rng):
        g = random_gaussian(rng)
        u, v, t = g.mean[0], g.mean[1], g.mean[2]
        assert factorized_density(g, u, v, t, Axis.Z) == pytest.approx(1.0, abs=1e-15)

    def test_separable_product(self):
        g = Gaussian3D(mean=np.zeros(3), log_scale=np.log([1.0, 1.0, 2.0]), rotation=IDENTITY_Q)
        assert factorized_density(g, 1.0, 0.0, 2.0, Axis.Z) == pytest.approx(np.exp(-1.0), rel=1e-12)

    @pytest.mark.parametrize("axis", list(Axis))
    def test_exact_against_direct_density(self, rng, axis):
        for _ in range(1000):
            g = random_gaussian(rng)
            u, v, t = g.mean[list(axis.permutation)] + rng.normal(size=3) * 1.5
            direct = evaluate_density(g, unpermute_point(axis, u, v, t))
            assert abs(factorized_density(g, u, v, t, axis) - direct) < 1e-9

    def test_batched_exactness(self, rng):
        n = 10_000
        means = rng.uniform(-3, 3, size=(n, 3))
        scales = rng.uniform(0.3, 2.0, size=(n, 3))
        q = rng.normal(size=(n, 4))
        covs = covariances(np.log(scales), q)
        for axis in Axis:
            t = 0.7
            cond = condition_batch(means, covs, axis, t)
            uv = rng.uniform(-3, 3, size=2)
            density, _, _ = conditional_densities(cond, np.arange(n), uv[:1], uv[1:])
            point = unpermute_point(axis, uv[0], uv[1], t)
            d = point - means
            direct = np.exp(-0.5 * np.einsum("ni,ni->n", d, np.linalg.solve(covs, d[..., None])[..., 0]))
            assert np.max(np.abs(density[:, 0] - direct)) < 1e-9

    def test_singular_conditional_is_point_support(self):
        covs = np.diag([1e-12, 1e-12, 1.0])[None]
        cond = condition_batch(np.zeros((1, 3)), covs, Axis.Z, 0.5)
        assert cond.singular[0]
        at_mean, _, _ = conditional_densities(cond, np.array([0]), np.array([0.0]), np.array([0.0]))
        off, _, _ = conditional_densities(cond, np.array([0]), np.array([0.1]), np.array([0.0]))
        assert at_mean[0, 0] == pytest.approx(np.exp(-0.125))
        assert off[0, 0] == 0.0

    def test_level_sets_coincide(self, rng):
        g = random_gaussian(rng)
        spec = centered_spec(Axis.Y, float(g.mean[1]) + 0.4)
        direct = pixel_density_scan(g, spec)
        cond = condition_batch(g.mean[None], build_covariance(g)[None], spec.axis, spec.t)
        uu, vv = np.meshgrid(spec.u_coords(), spec.v_coords())
        factored, _, _ = conditional_densities(cond, np.array([0]), uu.ravel(), vv.ravel())
        factored = factored[0].reshape(spec.shape)
        for level in (0.01, 0.1, 0.5):
            clear = np.abs(direct - level) > 1e-9
            np.testing.assert_array_equal((direct >= level)[clear], (factored >= level)[clear])


class TestBboxMethod1:
    def test_isotropic_half_width_three(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        spec = SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16)
        box = bbox_method1(g, spec)
        assert not box.empty
        assert box.half_extent == pytest.approx((3.0, 3.0))
        # [5, 11] dilated by half a pixel, pixel centers at i + 0.5
        assert (box.u_min, box.u_max, box.v_min, box.v_max) == (4, 11, 4, 11)

    def test_radius_from_largest_scale(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.log([1.0, 2.0, 3.0]), rotation=IDENTITY_Q)
        for t in (0.5, 8.0, 15.5):
            box = bbox_method1(g, SliceSpec(axis=Axis.Z, t=t, width=16, height=16))
            assert box.half_extent == pytest.approx((9.0, 9.0))

    def test_beyond_cube_is_empty(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        box = bbox_method1(g, SliceSpec(axis=Axis.Z, t=8.0 + 3.0 + 1e-3, width=16, height=16))
        assert box.empty
        assert box.area == 0

    def test_completeness_at_three_sigma(self, rng):
        level = np.exp(-4.5)
        for _ in range(30):
            g = random_gaussian(rng)
            axis = Axis(rng.choice(["x", "y", "z"]))
            spec = centered_spec(axis, float(g.mean[axis.index] + rng.normal()))
            box = bbox_method1(g, spec)
            for iv, iu in zip(*np.nonzero(pixel_density_scan(g, spec) >= level)):
                assert box.contains(iu, iv)


class TestBboxMethod2:
    def test_closed_form_radius_two(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        epsilon = float(np.exp(-0.5 - 2.0))  # marginal at offset 1 is exp(-0.5) = epsilon·e²
        box = bbox_method2(g, SliceSpec(axis=Axis.Z, t=9.0, width=16, height=16), epsilon)
        assert box.half_extent == pytest.approx((2.0, 2.0), rel=1e-9)
        # [6, 10] dilated to [5.5, 10.5]
        assert (box.u_min, box.u_max) == (5, 10)

    def test_capped_mode_is_not_dilated(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        epsilon = float(np.exp(-0.5 - 2.0))
        spec = SliceSpec(axis=Axis.Z, t=9.0, width=16, height=16)
        box = bbox_method2(g, spec, epsilon, BoxMode.CAPPED)
        # radius 2 is under the cap; pixel centers inside [6, 10]
        assert box.half_extent == pytest.approx((2.0, 2.0), rel=1e-9)
        assert (box.u_min, box.u_max, box.v_min, box.v_max) == (6, 9, 6, 9)
        # method 1 keeps its half-pixel dilation whatever the mode
        cube = bbox_method1(g, spec)
        assert (cube.u_min, cube.u_max) == (4, 11)

    def test_far_slice_is_empty(self):
        g = Gaussian3D(mean=np.array([8.0, 8.0, 8.0]), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        assert bbox_method2(g, SliceSpec(axis=Axis.Z, t=15.5, width=16, height=16), 0.01).empty

    @pytest.mark.parametrize("epsilon", [0.0, 1.0, -0.5, 2.0])
    def test_epsilon_out_of_range(self, epsilon):
        g = Gaussian3D(mean=np.zeros(3), log_scale=np.zeros(3), rotation=IDENTITY_Q)
        with pytest.raises(InvalidConfigError):
            bbox_method2(g, centered_spec(Axis.Z, 0.0), epsilon)

    def test_exact_mode_covers_support(self, rng):
        for epsilon in (0.01, 0.1, 0.5):
            for _ in range(30):
                g = random_gaussian(rng)
                axis = Axis(rng.choice(["x", "y", "z"]))
                spec = centered_spec(axis, float(g.mean[axis.index] + rng.normal()))
                box = bbox_method2(g, spec, epsilon, BoxMode.EXACT)
                for iv, iu in zip(*np.nonzero(pixel_density_scan(g, spec) >= epsilon)):
                    assert box.contains(iu, iv)

    def test_capped_mode_never_wider_than_exact(self, rng):
        for _ in range(20):
            g = random_gaussian(rng)
            spec = centered_spec(Axis.Z, float(g.mean[2]))
            exact = bbox_method2(g, spec, 1e-6, BoxMode.EXACT)
            capped = bbox_method2(g, spec, 1e-6, BoxMode.CAPPED)
            assert capped.half_extent[0] <= exact.half_extent[0]
            assert capped.half_extent[1] <= exact.half_extent[1]

    def test_monotone_shrinkage(self, rng):
        for _ in range(20):
            g = random_gaussian(rng)
            cov = build_covariance(g)[None]
            extents = []
            for offset in np.linspace(0.0, 6.0, 25):
                cond = condition_batch(g.mean[None], cov, Axis.X, float(g.mean[0] + offset))
                half, _, empty = method2_extents(cond, 0.01)
                extents.append(np.where(empty[0], 0.0, half[0]))
            extents = np.array(extents)
            assert np.all(np.diff(extents[:, 0]) <= 1e-12)
            assert np.all(np.diff(extents[:, 1]) <= 1e-12)

    def test_contained_in_method1(self, rng):
        epsilon = 0.02  # above exp(-9/2)
        for _ in range(50):
            g = random_gaussian(rng)
            axis = Axis(rng.choice(["x", "y", "z"]))
            spec = centered_spec(axis, float(g.mean[axis.index] + rng.normal() * 2))
            m2 = bbox_method2(g, spec, epsilon, BoxMode.EXACT)
            m1 = bbox_method1(g, spec)
            if m2.empty:
                continue
            assert not m1.empty
            assert m1.u_min <= m2.u_min and m2.u_max <= m1.u_max
            assert m1.v_min <= m2.v_min and m2.v_max <= m1.v_max
