"""LiDAR branch: voxelization into the BEV raster, the BEV feature encoder,
and the sigmoid depth prior derived from it.

Voxelization replaces a sparse-conv backbone with per-cell z-binned
statistics: for every (cell, z-bin) the raw stack holds point count, mean
intensity, and mean z offset from the bin center, giving 3 * z_bins channels.
Cells without points stay zero and flow through the encoder unmasked; its
bias learns the empty-cell embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndops
from .geometry import BevGridSpec
from .ndops import Tensor, functional as F

__all__ = ["PointCloud", "voxelize", "LidarEncoder", "DepthPrior", "lidar_depth_prior"]

DEFAULT_Z_RANGE = (-1.0, 3.0)


@dataclass
class PointCloud:
    """LiDAR returns as (x, y, z, intensity) records in the ego frame."""

    points: np.ndarray  # (N, 4) float32/64

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"point cloud must be (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        if pts.shape[0] and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise ValueError("intensity must lie in [0, 1]")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    def save(self, path) -> None:
        ndops.write_points(path, self.points.astype(np.float32))

    @staticmethod
    def load(path) -> "PointCloud":
        return PointCloud(ndops.read_points(path))


def voxelize(
    cloud: PointCloud,
    spec: BevGridSpec,
    z_bins: int,
    z_range: tuple[float, float] = DEFAULT_Z_RANGE,
    dtype=None,
) -> np.ndarray:
    """Per (BEV cell, z-bin) statistics: (3 * z_bins, H', W') raw stack.

    Channel layout per z-bin b: [count, mean intensity, mean z offset from the
    bin center], bins stacked from low z to high. Points outside the raster or
    the z range are dropped, never clamped. In float64 the accumulation order
    is canonical (full lexicographic sort of the records), so any permutation
    of the input produces bit-identical output.
    """
    if z_bins < 1:
        raise ValueError("z_bins must be >= 1")
    dt = np.dtype(dtype) if dtype is not None else np.dtype(ndops.default_dtype())
    H, W = spec.n_rows, spec.n_cols
    out = np.zeros((3 * z_bins, H, W), dt)
    pts = cloud.points.astype(np.float64, copy=False)
    if not len(pts):
        return out

    rows, cols, inside = spec.cells_of(pts[:, :2])
    z0, z1 = z_range
    zstep = (z1 - z0) / z_bins
    zb = np.floor((pts[:, 2] - z0) / zstep).astype(np.int64)
    keep = inside & (zb >= 0) & (zb < z_bins)
    if not keep.any():
        return out
    pts, rows, cols, zb = pts[keep], rows[keep], cols[keep], zb[keep]
    group = (rows * W + cols) * z_bins + zb  # (cell, z-bin) flattened

    zc = z0 + (zb + 0.5) * zstep
    zoff = pts[:, 2] - zc
    inten = pts[:, 3]
    n_groups = H * W * z_bins

    if dt == np.float64:
        # canonical order: sort by the full record so summation order is a
        # pure function of the point multiset
        order = np.lexsort((inten, zoff, pts[:, 1], pts[:, 0], group))
        group, inten, zoff = group[order], inten[order], zoff[order]
        starts = np.flatnonzero(np.r_[True, group[1:] != group[:-1]])
        gids = group[starts]
        counts = np.diff(np.r_[starts, len(group)])
        sum_i = np.add.reduceat(inten, starts)
        sum_z = np.add.reduceat(zoff, starts)
    else:
        counts_all = np.bincount(group, minlength=n_groups)
        gids = np.flatnonzero(counts_all)
        counts = counts_all[gids]
        sum_i = np.bincount(group, weights=inten, minlength=n_groups)[gids]
        sum_z = np.bincount(group, weights=zoff, minlength=n_groups)[gids]

    cell = gids // z_bins
    b = gids % z_bins
    r, c = cell // W, cell % W
    out[3 * b + 0, r, c] = counts
    out[3 * b + 1, r, c] = sum_i / counts
    out[3 * b + 2, r, c] = sum_z / counts
    return out


class LidarEncoder(ndops.Module):
    """Three-layer conv stack: 1x1 channel mix, then two 3x3 convs."""

    def __init__(self, rng, z_bins: int, channels: int):
        super().__init__()
        self.reduce = ndops.Conv2d(rng, 3 * z_bins, channels, 1)
        self.bn1 = ndops.BatchNorm2d(channels)
        self.conv2 = ndops.Conv2d(rng, channels, channels, 3, padding=1)
        self.bn2 = ndops.BatchNorm2d(channels)
        self.conv3 = ndops.Conv2d(rng, channels, channels, 3, padding=1)

    def forward(self, raw: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.reduce(raw)))
        h = F.relu(self.bn2(self.conv2(h)))
        return self.conv3(h)


class DepthPrior(ndops.Module):
    """1x1 conv to one channel, sigmoid-squashed: the cell occupancy prior."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.proj = ndops.Conv2d(rng, channels, 1, 1)

    def forward(self, feat: Tensor) -> Tensor:
        return F.sigmoid(self.proj(feat))


def lidar_depth_prior(feat: Tensor, h_nu: DepthPrior) -> Tensor:
    """Sigmoid prior field (B, 1, H', W') in (0, 1) from the BEV feature."""
    return h_nu(feat)
