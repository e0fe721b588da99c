import numpy as np
import pytest

from src.errors import ContractViolationError
from src.rasterizer import (
    CloudGradients,
    bin_gaussians,
    prepare_slice,
    render_backward,
    render_many,
    render_reference,
    render_slice,
)
from src.scene import Axis, BoxMode, GaussianCloud, SelectionMethod, SliceSpec, evaluate_density, inverse_sigmoid

from .conftest import (
    assert_gradients_close,
    central_difference,
    make_cloud,
    numerical_gradients,
    single_gaussian_cloud,
)

TIGHT_EPSILON = 1e-12  # keeps box edges far out in the tails


def empty_cloud() -> GaussianCloud:
    return GaussianCloud(
        means=np.zeros((0, 3)),
        log_scales=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)),
        opacity_raw=np.zeros(0),
        intensity_raw=np.zeros(0),
        world_bounds=np.array([[0.0] * 3, [16.0] * 3]),
    )


def full_render(cloud, spec, epsilon=TIGHT_EPSILON, min_transmittance=0.0, tile=16, method=SelectionMethod.M2):
    bins = bin_gaussians(cloud, spec, method, epsilon, tile, BoxMode.EXACT, 3.0)
    return render_slice(cloud, spec, bins, min_transmittance), bins


class TestBinGaussians:
    def test_single_covering_gaussian_in_every_tile(self):
        cloud = single_gaussian_cloud((16.0, 16.0, 16.0), scales=(8.0, 8.0, 8.0), size=32.0)
        spec = SliceSpec(axis=Axis.Z, t=16.0, width=32, height=32)
        bins = bin_gaussians(cloud, spec, SelectionMethod.M2, 0.01, 16)
        assert (bins.tiles_x, bins.tiles_y) == (2, 2)
        for lst in bins.lists:
            assert lst.tolist() == [0]

    def test_nearer_gaussian_first(self):
        cloud = GaussianCloud(
            means=np.array([[8.0, 8.0, 10.0], [8.0, 8.0, 7.0]]),
            log_scales=np.zeros((2, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            opacity_raw=np.zeros(2),
            intensity_raw=np.zeros(2),
            world_bounds=np.array([[0.0] * 3, [16.0] * 3]),
        )
        spec = SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16)
        bins = bin_gaussians(cloud, spec, SelectionMethod.M1, 0.01, 16)
        assert bins.tile(0, 0).tolist() == [1, 0]

    def test_ties_broken_by_index(self):
        means = np.array([[8.0, 8.0, 9.0], [8.0, 8.0, 7.0], [8.0, 8.0, 9.0]])
        cloud = GaussianCloud(
            means=means,
            log_scales=np.zeros((3, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (3, 1)),
            opacity_raw=np.zeros(3),
            intensity_raw=np.zeros(3),
            world_bounds=np.array([[0.0] * 3, [16.0] * 3]),
        )
        spec = SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16)
        assert bin_gaussians(cloud, spec).tile(0, 0).tolist() == [0, 1, 2]

    def test_tile_must_be_positive(self):
        cloud = single_gaussian_cloud((8.0, 8.0, 8.0))
        with pytest.raises(ContractViolationError):
            bin_gaussians(cloud, SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16), tile=0)

    def test_lists_cover_true_support(self, rng):
        epsilon = 0.01
        cloud = make_cloud(rng, 50, low=5.0, high=15.0, scale_range=(0.5, 2.5), size=20.0)
        for axis in Axis:
            for t in (5.5, 10.5, 14.5):
                spec = SliceSpec(axis=axis, t=t, width=20, height=20)
                bins = bin_gaussians(cloud, spec, SelectionMethod.M2, epsilon, 8, BoxMode.EXACT)
                points = spec.world_points()
                for i in range(cloud.count):
                    active = evaluate_density(cloud.gaussian(i), points) >= epsilon
                    for iv, iu in zip(*np.nonzero(active)):
                        assert i in bins.tile(iu // 8, iv // 8)

    def test_list_membership_matches_box_overlap(self, rng):
        cloud = make_cloud(rng, 30, size=8.0)
        spec = SliceSpec(axis=Axis.Y, t=4.2, width=8, height=8)
        bins = bin_gaussians(cloud, spec, SelectionMethod.M2, 0.05, 3)
        for ty in range(bins.tiles_y):
            for tx in range(bins.tiles_x):
                u0, u1, v0, v1 = bins.tile_bounds(tx, ty, spec.width, spec.height)
                b = bins.boxes
                hit = (b[:, 0] <= b[:, 1]) & (b[:, 0] < u1) & (b[:, 1] >= u0) & (b[:, 2] < v1) & (b[:, 3] >= v0)
                assert set(bins.tile(tx, ty).tolist()) == set(np.nonzero(hit)[0].tolist())


class TestRenderSlice:
    def test_empty_cloud(self):
        spec = SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16)
        result, _ = full_render(empty_cloud(), spec)
        np.testing.assert_array_equal(result.image, 0.0)
        np.testing.assert_array_equal(result.final_transmittance, 1.0)

    def test_single_gaussian_peak(self):
        cloud = single_gaussian_cloud((8.5, 8.5, 8.5), opacity_raw=inverse_sigmoid(0.8), intensity_raw=40.0)
        result, _ = full_render(cloud, SliceSpec(axis=Axis.Z, t=8.5, width=16, height=16))
        assert result.image[8, 8] == pytest.approx(0.8, abs=1e-12)
        assert result.final_transmittance[8, 8] == pytest.approx(0.2, abs=1e-12)

    def test_two_colocated_gaussians(self):
        cloud = GaussianCloud(
            means=np.array([[8.5, 8.5, 8.5]] * 2),
            log_scales=np.zeros((2, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
            opacity_raw=np.zeros(2),
            intensity_raw=np.full(2, 40.0),
            world_bounds=np.array([[0.0] * 3, [16.0] * 3]),
        )
        result, _ = full_render(cloud, SliceSpec(axis=Axis.Z, t=8.5, width=16, height=16))
        assert result.image[8, 8] == pytest.approx(0.75, abs=1e-12)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_reference_renderer(self, seed):
        rng = np.random.default_rng(seed)
        cloud = make_cloud(rng, int(rng.integers(1, 9)), low=3.0, high=13.0, size=16.0)
        axis = Axis(rng.choice(["x", "y", "z"]))
        spec = SliceSpec(axis=axis, t=float(rng.uniform(4.0, 12.0)), width=16, height=16)
        result, _ = full_render(cloud, spec, tile=int(rng.choice([4, 8, 16])))
        reference = render_reference(cloud, spec)
        np.testing.assert_allclose(result.image, reference.image, atol=1e-5)
        np.testing.assert_allclose(result.final_transmittance, reference.final_transmittance, atol=1e-5)

    def test_composited_mass_bound(self, rng):
        cloud = make_cloud(rng, 40, size=8.0)
        cloud.opacity_raw[:] = 3.0
        cloud.intensity_raw[:] = 5.0
        for axis in Axis:
            result, _ = full_render(cloud, SliceSpec(axis=axis, t=4.0, width=8, height=8), min_transmittance=1e-4)
            assert np.all((result.image >= 0) & (result.image <= 1))
            assert np.all((result.final_transmittance >= 0) & (result.final_transmittance <= 1))
            assert np.all(result.image <= 1.0 - result.final_transmittance + 1e-6)

    def test_early_stop_only_when_transmittance_exhausted(self, rng):
        cloud = make_cloud(rng, 20, size=8.0)
        spec = SliceSpec(axis=Axis.X, t=4.0, width=8, height=8)
        stopped, _ = full_render(cloud, spec, min_transmittance=1e-4)
        full, _ = full_render(cloud, spec, min_transmittance=0.0)
        # the skipped tail can hold at most the residual transmittance
        assert np.all(np.abs(stopped.image - full.image) <= 1e-4 + 1e-12)

    def test_dilute_order_swap(self):
        alpha_raw = inverse_sigmoid(0.01)

        def cloud_with_intensities(first, second):
            return GaussianCloud(
                means=np.array([[8.0, 8.0, 8.2]] * 2),
                log_scales=np.zeros((2, 3)),
                rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
                opacity_raw=np.full(2, alpha_raw),
                intensity_raw=np.array([first, second]),
                world_bounds=np.array([[0.0] * 3, [16.0] * 3]),
            )

        spec = SliceSpec(axis=Axis.Z, t=8.0, width=16, height=16)
        # equal depth, so index order decides which composites first
        a, _ = full_render(cloud_with_intensities(3.0, -3.0), spec)
        b, _ = full_render(cloud_with_intensities(-3.0, 3.0), spec)
        diff = np.max(np.abs(a.image - b.image))
        assert 0.0 < diff < 2e-4

    def test_threads_do_not_change_pixels(self, rng):
        cloud = make_cloud(rng, 30, size=8.0)
        specs = [SliceSpec(axis=axis, t=t, width=8, height=8) for axis in Axis for t in (2.5, 4.5, 6.5)]
        single = render_many(cloud, specs, threads=1)
        multi = render_many(cloud, specs, threads=4)
        for a, b in zip(single, multi):
            assert a.image.tobytes() == b.image.tobytes()


def squared_sum_loss(cloud, spec):
    result, _ = full_render(cloud, spec)
    return float(np.sum(result.image ** 2))


def squared_sum_gradients(cloud, spec, update_stats=False):
    result, bins = full_render(cloud, spec)
    return render_backward(cloud, spec, bins, 2.0 * result.image, 0.0, update_stats=update_stats)


class TestRenderBackward:
    def test_zero_upstream_gives_zero(self, rng):
        cloud = make_cloud(rng, 5)
        spec = SliceSpec(axis=Axis.Z, t=4.0, width=8, height=8)
        _, bins = full_render(cloud, spec)
        grads = render_backward(cloud, spec, bins, np.zeros(spec.shape), update_stats=False)
        for values in grads.as_dict().values():
            np.testing.assert_array_equal(values, 0.0)

    def test_shape_mismatch(self, rng):
        cloud = make_cloud(rng, 3)
        spec = SliceSpec(axis=Axis.Z, t=4.0, width=8, height=8)
        _, bins = full_render(cloud, spec)
        with pytest.raises(ContractViolationError):
            render_backward(cloud, spec, bins, np.zeros((8, 7)))

    def test_single_pixel_intensity(self):
        cloud = single_gaussian_cloud((0.7, 0.3, 0.2), scales=(1.0, 1.5, 0.8), opacity_raw=0.4, intensity_raw=-0.3)
        spec = SliceSpec(axis=Axis.Z, t=0.5, width=1, height=1)
        grads = squared_sum_gradients(cloud, spec)
        numeric = central_difference(lambda: squared_sum_loss(cloud, spec), cloud.intensity_raw, (0,))
        assert grads.intensity_raw[0] == pytest.approx(numeric, rel=1e-4)

    @pytest.mark.parametrize("seed", range(20))
    def test_all_parameters_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        cloud = make_cloud(rng, 5)
        axis = Axis("xyz"[seed % 3])
        spec = SliceSpec(axis=axis, t=float(rng.uniform(3.0, 5.0)), width=8, height=8)
        grads = squared_sum_gradients(cloud, spec)
        numeric = numerical_gradients(lambda: squared_sum_loss(cloud, spec), cloud)
        for name, analytic in grads.as_dict().items():
            assert_gradients_close(analytic, numeric[name])

    def test_gradients_with_early_stop(self, rng):
        cloud = make_cloud(rng, 6)
        cloud.opacity_raw[:] = 4.0
        spec = SliceSpec(axis=Axis.Y, t=4.0, width=8, height=8)
        context = prepare_slice(cloud, spec)
        bins = bin_gaussians(cloud, spec, SelectionMethod.M2, TIGHT_EPSILON, 16, context=context)
        result = render_slice(cloud, spec, bins, 1e-4, context)
        grads = render_backward(cloud, spec, bins, np.ones(spec.shape), 1e-4, context, update_stats=False)

        def loss():
            ctx = prepare_slice(cloud, spec)
            b = bin_gaussians(cloud, spec, SelectionMethod.M2, TIGHT_EPSILON, 16, context=ctx)
            return float(np.sum(render_slice(cloud, spec, b, 1e-4, ctx).image))

        assert np.isfinite(result.image).all()
        numeric = central_difference(loss, cloud.intensity_raw, (0,), h=1e-6)
        assert grads.intensity_raw[0] == pytest.approx(numeric, rel=1e-3, abs=1e-6)

    def test_updates_densification_statistics(self, rng):
        cloud = make_cloud(rng, 5)
        spec = SliceSpec(axis=Axis.Z, t=4.0, width=8, height=8)
        grads = squared_sum_gradients(cloud, spec, update_stats=True)
        visible = grads.visible
        np.testing.assert_array_equal(cloud.grad_accum_count, visible.astype(int))
        np.testing.assert_allclose(cloud.grad_accum_norm[visible], np.linalg.norm(grads.means, axis=1)[visible])

    def test_gradients_add(self):
        a = CloudGradients.zeros(2)
        b = CloudGradients.zeros(2)
        b.means[0] = [3.0, 4.0, 0.0]
        b.visible[0] = True
        a.add(b)
        a.add(b)
        np.testing.assert_allclose(a.mean_grad_norm, [10.0, 0.0])
        assert a.visible.tolist() == [True, False]
