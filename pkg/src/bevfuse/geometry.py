"""Camera models, frustum generation, and the shared BEV raster geometry.

Conventions, used everywhere:
  * ego frame: x forward, y left, z up; origin at the vehicle center.
  * camera frame: x right, y down, z along the optical axis; depth bins are
    z-planes (not ray lengths).
  * pixel (i, j) has its center at image coordinates (j + 0.5, i + 0.5);
    feature-map pixel (fi, fj) at stride s sits at ((fj + 0.5) s, (fi + 0.5) s).
  * BEV raster: row 0 is max y ("north up"); col 0 is min x. Cells are
    half-open: a point exactly on the max-x or min-y edge is outside.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ndops import Tensor

__all__ = [
    "BevGridSpec",
    "Camera",
    "CameraRig",
    "FrustumSpec",
    "frustum_to_ego",
    "ego_to_bev_cell",
    "fov_segment",
    "segment_map",
    "check_rotation",
    "desk_grid",
    "desk_rig",
    "desk_frustum",
    "paper_grid",
    "paper_rig",
]


def check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    """Raise unless r is a proper rotation (orthonormal, det +1)."""
    r = np.asarray(r, np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation not orthonormal: max |R^T R - I| = {err:.3g}")
    if np.linalg.det(r) < 0:
        raise ValueError("rotation has negative determinant (reflection)")


@dataclass(frozen=True)
class BevGridSpec:
    """Geometry of the shared BEV raster."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    cell_size: float

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        for lo, hi, name in (*[(self.x_range[0], self.x_range[1], "x")], (self.y_range[0], self.y_range[1], "y")):
            if not np.isclose(lo, -hi):
                raise ValueError(f"{name}_range must be symmetric about the origin, got ({lo}, {hi})")
            n = (hi - lo) / self.cell_size
            if not np.isclose(n, round(n)):
                raise ValueError(f"{name}_range not an integer number of cells: {n}")

    @property
    def n_rows(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.cell_size))

    @property
    def n_cols(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.cell_size))

    def cell_of(self, x: float, y: float):
        """Cell (row, col) containing (x, y), or None when outside the raster."""
        if not (self.x_range[0] <= x < self.x_range[1]):
            return None
        if not (self.y_range[0] < y <= self.y_range[1]):
            return None
        col = int(np.floor((x - self.x_range[0]) / self.cell_size))
        row = int(np.floor((self.y_range[1] - y) / self.cell_size))
        # y exactly on an interior grid line belongs to the row below it;
        # y == y_max maps to row 0
        if row == self.n_rows:
            row -= 1
        return row, col

    def cells_of(self, xy: np.ndarray):
        """Vectorized cell_of: returns (rows, cols, inside_mask) for (...,2) input."""
        x, y = xy[..., 0], xy[..., 1]
        inside = (
            (x >= self.x_range[0])
            & (x < self.x_range[1])
            & (y > self.y_range[0])
            & (y <= self.y_range[1])
        )
        cols = np.floor((x - self.x_range[0]) / self.cell_size).astype(np.int64)
        rows = np.floor((self.y_range[1] - y) / self.cell_size).astype(np.int64)
        np.clip(rows, 0, self.n_rows - 1, out=rows)
        np.clip(cols, 0, self.n_cols - 1, out=cols)
        return rows, cols, inside

    def cell_centers(self) -> np.ndarray:
        """(H', W', 2) array of (x, y) cell centers."""
        xs = self.x_range[0] + (np.arange(self.n_cols) + 0.5) * self.cell_size
        ys = self.y_range[1] - (np.arange(self.n_rows) + 0.5) * self.cell_size
        cx, cy = np.meshgrid(xs, ys)
        return np.stack([cx, cy], axis=-1)


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus the rigid ego<-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # 3x3, ego <- camera
    translation: np.ndarray  # (3,), camera center in ego frame
    image_hw: tuple[int, int]

    def __post_init__(self):
        check_rotation(self.rotation)
        h, w = self.image_hw
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image {h}x{w}")


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    def project(self, cam_idx: int, pts_ego: np.ndarray) -> np.ndarray:
        """Ego points (...,3) -> (u, v, depth) in camera cam_idx."""
        cam = self.cameras[cam_idx]
        rel = pts_ego - cam.translation
        p = rel @ cam.rotation  # == R^T applied to rows
        z = p[..., 2]
        u = cam.fx * p[..., 0] / z + cam.cx
        v = cam.fy * p[..., 1] / z + cam.cy
        return np.stack([u, v, z], axis=-1)

    def unproject(self, cam_idx: int, u, v, depth):
        """Pixel coordinates + z-depth -> ego points."""
        cam = self.cameras[cam_idx]
        x = (np.asarray(u) - cam.cx) / cam.fx * depth
        y = (np.asarray(v) - cam.cy) / cam.fy * depth
        p = np.stack(np.broadcast_arrays(x, y, depth), axis=-1)
        return p @ cam.rotation.T + cam.translation


@dataclass(frozen=True)
class FrustumSpec:
    """Discrete depth planes and the feature-map stride of the camera branch."""

    depths: tuple[float, ...]
    stride: int

    def __post_init__(self):
        d = np.asarray(self.depths)
        if d[0] <= 0:
            raise ValueError("depth bins must start above zero")
        if not np.all(np.diff(d) > 0):
            raise ValueError("depth bins must be strictly increasing")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_depths(self) -> int:
        return len(self.depths)

    @staticmethod
    def uniform(d_min: float, d_max: float, step: float, stride: int) -> "FrustumSpec":
        n = int(round((d_max - d_min) / step)) + 1
        return FrustumSpec(tuple(d_min + i * step for i in range(n)), stride)


def frustum_to_ego(rig: CameraRig, cam_idx: int, frustum: FrustumSpec) -> Tensor:
    """Ego-frame 3D point of every (depth bin, feature pixel): [D, H/s, W/s, 3]."""
    if not 0 <= cam_idx < rig.n_cameras:
        raise ValueError(f"camera index {cam_idx} out of range (rig has {rig.n_cameras})")
    cam = rig.cameras[cam_idx]
    h, w = cam.image_hw
    s = frustum.stride
    fh, fw = h // s, w // s
    u = (np.arange(fw) + 0.5) * s
    v = (np.arange(fh) + 0.5) * s
    uu, vv = np.meshgrid(u, v)
    d = np.asarray(frustum.depths)[:, None, None]
    pts = rig.unproject(cam_idx, uu[None], vv[None], np.broadcast_to(d, (frustum.n_depths, fh, fw)))
    return Tensor(pts)


def ego_to_bev_cell(spec: BevGridSpec, xyz) -> tuple[int, int] | None:
    """BEV cell of an ego point; z is ignored. None outside the raster."""
    return spec.cell_of(float(xyz[0]), float(xyz[1]))


def fov_segment(spec: BevGridSpec, row: int, col: int, n_segments: int) -> int:
    """Angular sector of the cell center, in equal arcs starting at +x."""
    if 360 % n_segments:
        raise ValueError(f"n_segments must divide 360, got {n_segments}")
    x = spec.x_range[0] + (col + 0.5) * spec.cell_size
    y = spec.y_range[1] - (row + 0.5) * spec.cell_size
    theta = np.arctan2(y, x) % (2 * np.pi)
    seg = int(theta / (2 * np.pi / n_segments))
    return min(seg, n_segments - 1)


def segment_map(spec: BevGridSpec, n_segments: int) -> np.ndarray:
    """(H', W') int array: fov_segment of every cell."""
    if 360 % n_segments:
        raise ValueError(f"n_segments must divide 360, got {n_segments}")
    c = spec.cell_centers()
    theta = np.arctan2(c[..., 1], c[..., 0]) % (2 * np.pi)
    seg = (theta / (2 * np.pi / n_segments)).astype(np.int64)
    return np.minimum(seg, n_segments - 1)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def _yaw_camera(yaw_deg: float, height: float, fx: float, fy: float, image_hw) -> Camera:
    """Camera at the ego center looking along the given heading, level horizon."""
    t = np.radians(yaw_deg)
    # columns are the camera axes expressed in ego coordinates
    r = np.array(
        [
            [np.sin(t), 0.0, np.cos(t)],
            [-np.cos(t), 0.0, np.sin(t)],
            [0.0, -1.0, 0.0],
        ]
    )
    h, w = image_hw
    return Camera(
        fx=fx,
        fy=fy,
        cx=w / 2.0,
        cy=h / 2.0,
        rotation=r,
        translation=np.array([0.0, 0.0, height]),
        image_hw=(h, w),
    )


def desk_grid() -> BevGridSpec:
    """50m x 50m at 0.5m: 100 x 100 cells."""
    return BevGridSpec((-25.0, 25.0), (-25.0, 25.0), 0.5)


def desk_rig(image_hw=(64, 176), fx: float = 76.8, height: float = 1.6) -> CameraRig:
    """Four cameras at 90-degree yaw spacing (~98 degrees HFOV each)."""
    return CameraRig(tuple(_yaw_camera(yaw, height, fx, fx, image_hw) for yaw in (0, 90, 180, 270)))


def desk_frustum(d_max: float = 30.0, stride: int = 8) -> FrustumSpec:
    return FrustumSpec.uniform(1.0, d_max, 1.0, stride)


def paper_grid() -> BevGridSpec:
    """100m x 100m at 0.5m: 200 x 200 cells (shape-only preset)."""
    return BevGridSpec((-50.0, 50.0), (-50.0, 50.0), 0.5)


def paper_rig() -> CameraRig:
    """Six cameras at 60-degree spacing, 256x704 images (shape-only preset)."""
    return CameraRig(
        tuple(_yaw_camera(yaw, 1.6, 307.2, 307.2, (256, 704)) for yaw in range(0, 360, 60))
    )
