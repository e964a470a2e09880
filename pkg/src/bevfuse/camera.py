"""Camera branch: context/depth heads, BEV pooling, point-scattering, and
feature calibration.

BEV pooling is the performance-critical kernel. The frustum geometry is fixed
per (rig, frustum, grid), so the point-to-cell assignment is precomputed once
into a PoolIndex. In float64 the reduction runs over a canonical
sort-by-(cell, point) order, making the result bit-identical under any
permutation of the frustum enumeration; the float32 training path uses
per-channel bincount accumulation instead.
"""

from __future__ import annotations

import numpy as np

from . import ndops
from .geometry import BevGridSpec, CameraRig, FrustumSpec, frustum_to_ego
from .ndops import Tensor, accumulate_grad, functional as F, make_op

__all__ = [
    "ImageBackbone",
    "ContextDepthHead",
    "PoolIndex",
    "bev_pool",
    "PointScattering",
    "SelfCalibConv",
    "Fpn2",
    "calibrate",
]


class ImageBackbone(ndops.Module):
    """Four-layer conv stack, stride 8 overall. Stands in for a real image
    encoder; the pipeline under test does not depend on its capacity."""

    def __init__(self, rng, channels: int):
        super().__init__()
        c = channels
        self.conv1 = ndops.Conv2d(rng, 3, c, 3, stride=2, padding=1)
        self.bn1 = ndops.BatchNorm2d(c)
        self.conv2 = ndops.Conv2d(rng, c, c, 3, stride=2, padding=1)
        self.bn2 = ndops.BatchNorm2d(c)
        self.conv3 = ndops.Conv2d(rng, c, c, 3, stride=2, padding=1)
        self.bn3 = ndops.BatchNorm2d(c)
        self.conv4 = ndops.Conv2d(rng, c, c, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = F.relu(self.bn3(self.conv3(h)))
        return self.conv4(h)


class ContextDepthHead(ndops.Module):
    """Shared trunk with a context head and a depth-distribution head.

    The depth head emits logits over the frustum depth bins and normalizes
    them per pixel with a softmax, so each pixel carries unit depth mass.
    """

    def __init__(self, rng, channels: int, ctx_channels: int, n_depths: int):
        super().__init__()
        self.trunk = ndops.Conv2d(rng, channels, channels, 3, padding=1)
        self.bn = ndops.BatchNorm2d(channels)
        self.ctx = ndops.Conv2d(rng, channels, ctx_channels, 1)
        self.depth = ndops.Conv2d(rng, channels, n_depths, 1)

    def forward(self, feats: Tensor):
        h = F.relu(self.bn(self.trunk(feats)))
        context = self.ctx(h)
        depth = F.softmax(self.depth(h), axis=1)
        return context, depth


class PoolIndex:
    """Precomputed frustum-point -> BEV-cell scatter plan.

    Point enumeration is (camera, depth bin, row, col) flattened; out-of-range
    points are dropped at build time. ``order`` sorts the kept points by
    (cell, canonical point id) for the deterministic reduction path.
    """

    def __init__(self, rig: CameraRig, frustum: FrustumSpec, grid: BevGridSpec):
        self.rig = rig
        self.frustum = frustum
        self.grid = grid
        pts = np.stack(
            [frustum_to_ego(rig, ci, frustum).data for ci in range(rig.n_cameras)]
        )  # (N, D, h, w, 3)
        n, d, h, w, _ = pts.shape
        self.n_cams, self.n_depths, self.fh, self.fw = n, d, h, w
        rows, cols, inside = grid.cells_of(pts[..., :2].reshape(-1, 2))
        self.n_points = inside.size
        keep = np.flatnonzero(inside)
        self.point_id = keep  # canonical ids of kept points
        self.cells = (rows.reshape(-1)[keep] * grid.n_cols + cols.reshape(-1)[keep]).astype(np.int64)
        # pixel of each kept point: (cam, row, col) without the depth axis
        pid = keep
        cam = pid // (d * h * w)
        rem = pid % (d * h * w)
        yx = rem % (h * w)
        self.pixel = (cam * h * w + yx).astype(np.int64)
        self.n_cells = grid.n_rows * grid.n_cols
        self._build_order()

    def _build_order(self):
        """Canonical reduction order: sort kept points by (cell, point id)."""
        self.order = np.lexsort((self.point_id, self.cells))
        sc = self.cells[self.order]
        self.seg_starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        self.seg_cells = sc[self.seg_starts]

    @property
    def n_kept(self) -> int:
        return len(self.cells)


def _pool_forward(v, w, index: PoolIndex, dtype):
    """(B, Pv, C) values x (B, Pv) weights -> (B, n_cells, C)."""
    B, Pv, C = v.shape
    contrib = v * w[..., None]
    out = np.zeros((B, index.n_cells, C), dtype)
    if dtype == np.float64:
        seg = np.add.reduceat(contrib[:, index.order, :], index.seg_starts, axis=1)
        out[:, index.seg_cells, :] = seg
    else:
        for b in range(B):
            for c in range(C):
                out[b, :, c] = np.bincount(
                    index.cells, weights=contrib[b, :, c], minlength=index.n_cells
                )
    return out


def bev_pool(
    values: Tensor | None,
    weights: Tensor | None,
    index: PoolIndex,
) -> Tensor:
    """Scatter-sum of weight x value over all frustum points into BEV cells.

    values: (B, N, C, h, w) per-pixel features, broadcast over depth bins;
            None means unit values (C = 1).
    weights: (B, N, D, h, w) per-point scalars; None means unit weights.
    Returns (B, C, H', W').
    """
    if values is None and weights is None:
        raise ValueError("bev_pool needs values or weights (or both)")
    n, d, h, w = index.n_cams, index.n_depths, index.fh, index.fw
    ref = values if values is not None else weights
    B = ref.shape[0]
    dtype = ref.dtype.type
    if values is not None:
        if values.shape[0] != B or values.shape[1] != n or values.shape[3:] != (h, w):
            raise ValueError(f"values shape {values.shape} != (B,{n},C,{h},{w})")
        C = values.shape[2]
        vflat = values.data.transpose(0, 1, 3, 4, 2).reshape(B, n * h * w, C)
        v_pts = vflat[:, index.pixel, :]
    else:
        C = 1
        v_pts = np.ones((B, index.n_kept, 1), dtype)
    if weights is not None:
        if weights.shape != (B, n, d, h, w):
            raise ValueError(f"weights shape {weights.shape} != ({B},{n},{d},{h},{w})")
        w_pts = weights.data.reshape(B, -1)[:, index.point_id]
    else:
        w_pts = np.ones((B, index.n_kept), dtype)

    flat = _pool_forward(v_pts, w_pts, index, dtype)
    out = flat.transpose(0, 2, 1).reshape(B, C, index.grid.n_rows, index.grid.n_cols)
    out = np.ascontiguousarray(out)

    def backward(g):
        gflat = np.ascontiguousarray(g.reshape(B, C, -1).transpose(0, 2, 1))  # (B, cells, C)
        g_pts = gflat[:, index.cells, :]  # (B, Pv, C)
        if values is not None and (values.requires_grad or values._backward is not None):
            dv_pts = g_pts * w_pts[..., None]
            dvflat = np.zeros((B, n * h * w, C), g.dtype)
            for b in range(B):
                for c in range(C):
                    dvflat[b, :, c] = np.bincount(
                        index.pixel, weights=dv_pts[b, :, c], minlength=n * h * w
                    )
            dv = dvflat.reshape(B, n, h, w, C).transpose(0, 1, 4, 2, 3)
            accumulate_grad(values, np.ascontiguousarray(dv))
        if weights is not None and (weights.requires_grad or weights._backward is not None):
            dw_pts = (g_pts * v_pts).sum(axis=2)
            dw = np.zeros((B, n * d * h * w), g.dtype)
            dw[:, index.point_id] = dw_pts
            accumulate_grad(weights, dw.reshape(B, n, d, h, w))

    parents = tuple(t for t in (values, weights) if t is not None)
    return make_op(out, parents, backward)


class PointScattering(ndops.Module):
    """Fuse the pooled camera depth mass with the LiDAR prior into a
    C-channel gate field: concat -> 3x3 conv (2 -> C) -> sigmoid."""

    def __init__(self, rng, out_channels: int):
        super().__init__()
        self.h_psi = ndops.Conv2d(rng, 2, out_channels, 3, padding=1)

    def forward(self, d_tilde: Tensor, d_prior: Tensor) -> Tensor:
        if d_tilde.ndim != 4 or d_tilde.shape[1] != 1:
            raise ValueError(f"pooled depth must be (B,1,H',W'), got {d_tilde.shape}")
        if d_prior.shape != d_tilde.shape:
            raise ValueError(
                f"prior shape {d_prior.shape} does not match pooled depth {d_tilde.shape}"
            )
        both = F.concat([d_tilde, d_prior], axis=1)
        return F.sigmoid(self.h_psi(both))


class SelfCalibConv(ndops.Module):
    """Two-branch conv: full-resolution conv gated by a sigmoid of a
    2x-downsampled, convolved, re-upsampled branch."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.main = ndops.Conv2d(rng, channels, channels, 3, padding=1)
        self.gate_conv = ndops.Conv2d(rng, channels, channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        gate = F.sigmoid(F.upsample2x(self.gate_conv(F.max_pool2x2(x))))
        return F.mul(self.main(x), gate)


class Fpn2(ndops.Module):
    """Two-level feature pyramid with lateral 1x1 connections."""

    def __init__(self, rng, channels: int):
        super().__init__()
        c = channels
        self.c1 = ndops.Conv2d(rng, c, c, 3, padding=1)
        self.bn1 = ndops.BatchNorm2d(c)
        self.c2 = ndops.Conv2d(rng, c, c, 3, padding=1)
        self.bn2 = ndops.BatchNorm2d(c)
        self.lat1 = ndops.Conv2d(rng, c, c, 1)
        self.lat2 = ndops.Conv2d(rng, c, c, 1)
        self.smooth = ndops.Conv2d(rng, c, c, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        f1 = F.relu(self.bn1(self.c1(x)))
        f2 = F.relu(self.bn2(self.c2(F.max_pool2x2(f1))))
        merged = F.add(self.lat1(f1), F.upsample2x(self.lat2(f2)))
        return self.smooth(merged)


def calibrate(z_tilde: Tensor, d_bev: Tensor, s_phi: SelfCalibConv, g_eta: Fpn2) -> Tensor:
    """Gate the pooled context by the refined depth field, then calibrate."""
    return g_eta(s_phi(F.mul(z_tilde, d_bev)))
