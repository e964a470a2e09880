"""Voxelization determinism and the LiDAR encoder / depth prior contracts."""

import numpy as np
import pytest

from bevfuse import geometry as geo, lidar, ndops
from bevfuse.ndops import Tensor
from gradcheck import gradcheck


@pytest.fixture(autouse=True)
def float64_mode():
    ndops.set_default_dtype(np.float64)
    yield


GRID = geo.BevGridSpec((-5.0, 5.0), (-5.0, 5.0), 0.5)


def random_cloud(seed, n=500):
    rng = np.random.default_rng(seed)
    pts = np.column_stack(
        [
            rng.uniform(-6, 6, n),
            rng.uniform(-6, 6, n),
            rng.uniform(-1.5, 3.5, n),
            rng.uniform(0, 1, n),
        ]
    )
    return lidar.PointCloud(pts)


class TestPointCloud:
    def test_validation(self):
        with pytest.raises(ValueError, match="N, 4"):
            lidar.PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError, match="finite"):
            lidar.PointCloud(np.array([[np.nan, 0, 0, 0.5]]))
        with pytest.raises(ValueError, match="intensity"):
            lidar.PointCloud(np.array([[0, 0, 0, 1.5]]))

    def test_file_roundtrip(self, tmp_path):
        cloud = random_cloud(0)
        p = tmp_path / "c.bbpc"
        cloud.save(p)
        back = lidar.PointCloud.load(p)
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-6)


class TestVoxelize:
    def test_empty_cloud_all_zero(self):
        raw = lidar.voxelize(lidar.PointCloud(np.zeros((0, 4))), GRID, z_bins=4)
        assert raw.shape == (12, 20, 20)
        assert not raw.any()

    def test_single_point_single_slot(self):
        # center of cell (row, col) = (9, 12): x in [1.0,1.5), y in (0,0.5]
        cloud = lidar.PointCloud(np.array([[1.25, 0.25, 0.5, 0.8]]))
        raw = lidar.voxelize(cloud, GRID, z_bins=4, z_range=(-1.0, 3.0))
        counts = raw[0::3]
        assert counts.sum() == 1
        b, r, c = np.argwhere(counts == 1)[0]
        assert (r, c) == GRID.cell_of(1.25, 0.25)
        assert b == 1  # z=0.5 in bin [0,1)
        assert raw[3 * b + 1, r, c] == pytest.approx(0.8)
        assert raw[3 * b + 2, r, c] == pytest.approx(0.0)  # bin center 0.5

    def test_permutation_invariance_bit_identical(self):
        cloud = random_cloud(1)
        rng = np.random.default_rng(2)
        perm = rng.permutation(len(cloud))
        a = lidar.voxelize(cloud, GRID, z_bins=4, dtype=np.float64)
        b = lidar.voxelize(lidar.PointCloud(cloud.points[perm]), GRID, z_bins=4, dtype=np.float64)
        np.testing.assert_array_equal(a, b)

    def test_out_of_range_dropped_not_clamped(self):
        pts = np.array(
            [
                [5.0, 0.0, 0.0, 0.5],  # x == x_max: outside (half-open)
                [7.0, 0.0, 0.0, 0.5],
                [0.0, 0.0, 9.0, 0.5],  # above z range
                [0.0, 0.0, -2.0, 0.5],  # below z range
            ]
        )
        raw = lidar.voxelize(lidar.PointCloud(pts), GRID, z_bins=4)
        assert not raw.any()

    def test_float32_path_matches_float64_values(self):
        cloud = random_cloud(3)
        a = lidar.voxelize(cloud, GRID, z_bins=4, dtype=np.float64)
        b = lidar.voxelize(cloud, GRID, z_bins=4, dtype=np.float32)
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_counts_are_conserved(self):
        cloud = random_cloud(4, n=300)
        raw = lidar.voxelize(cloud, GRID, z_bins=4)
        rows, cols, inside = GRID.cells_of(cloud.points[:, :2])
        zok = (cloud.points[:, 2] >= -1.0) & (cloud.points[:, 2] < 3.0)
        assert raw[0::3].sum() == np.sum(inside & zok)


class TestEncoder:
    def test_zero_input_constant_interior(self):
        rng = np.random.default_rng(5)
        enc = lidar.LidarEncoder(rng, z_bins=4, channels=6)
        raw = Tensor(np.zeros((1, 12, 12, 12)))
        out = enc(raw).data
        interior = out[:, :, 2:-2, 2:-2]
        for c in range(6):
            vals = interior[0, c]
            assert np.ptp(vals) < 1e-12

    def test_output_shape_contract(self):
        rng = np.random.default_rng(6)
        for ch, zb, hw in [(6, 4, 10), (9, 2, 16)]:
            enc = lidar.LidarEncoder(rng, z_bins=zb, channels=ch)
            out = enc(Tensor(np.zeros((2, 3 * zb, hw, hw))))
            assert out.shape == (2, ch, hw, hw)

    def test_gradient_check_small_grid(self):
        rng = np.random.default_rng(7)
        enc = lidar.LidarEncoder(rng, z_bins=2, channels=4)
        x = Tensor(np.random.default_rng(8).standard_normal((1, 6, 8, 8)), requires_grad=True)
        params = [x, enc.reduce.weight, enc.conv2.weight, enc.conv3.weight, enc.bn1.gamma]
        gradcheck(lambda: enc(x).sum(), params, n_coords=100)


class TestDepthPrior:
    def test_zero_params_give_half(self):
        rng = np.random.default_rng(9)
        prior = lidar.DepthPrior(rng, channels=5)
        prior.proj.weight.data[:] = 0
        prior.proj.bias.data[:] = 0
        feat = Tensor(np.random.default_rng(10).standard_normal((1, 5, 8, 8)))
        out = lidar.lidar_depth_prior(feat, prior).data
        np.testing.assert_allclose(out, 0.5, atol=1e-15)

    def test_open_unit_interval(self):
        # feature scale keeps pre-activations below the float64 saturation
        # point (~36.7) where sigmoid rounds to exactly 1.0
        rng = np.random.default_rng(11)
        prior = lidar.DepthPrior(rng, channels=5)
        feat = Tensor(np.random.default_rng(12).uniform(-6, 6, (1, 5, 8, 8)))
        out = lidar.lidar_depth_prior(feat, prior).data
        assert np.all((out > 0) & (out < 1))

    def test_monotone_in_positive_weighted_channel(self):
        """Bumping a positively weighted channel raises the prior at that cell."""
        rng = np.random.default_rng(13)
        prior = lidar.DepthPrior(rng, channels=5)
        w = prior.proj.weight.data[0, :, 0, 0]
        ch = int(np.argmax(w))
        assert w[ch] > 0
        feat = np.random.default_rng(14).standard_normal((1, 5, 8, 8))
        base = lidar.lidar_depth_prior(Tensor(feat), prior).data[0, 0, 3, 3]
        feat2 = feat.copy()
        feat2[0, ch, 3, 3] += 1.0
        bumped = lidar.lidar_depth_prior(Tensor(feat2), prior).data[0, 0, 3, 3]
        assert bumped > base

    def test_gradient_reaches_prior_and_encoder(self):
        rng = np.random.default_rng(15)
        enc = lidar.LidarEncoder(rng, z_bins=2, channels=4)
        prior = lidar.DepthPrior(rng, channels=4)
        raw = Tensor(np.abs(np.random.default_rng(16).standard_normal((1, 6, 8, 8))))
        out = lidar.lidar_depth_prior(enc(raw), prior)
        out.sum().backward()
        assert np.abs(prior.proj.weight.grad).max() > 0
        assert np.abs(enc.conv2.weight.grad).max() > 0
