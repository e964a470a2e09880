"""Procedural driving scenes: paired camera renders, LiDAR clouds, and
ground-truth semantic BEV rasters, plus rainy/night corruption models.

Scenes are flat-shaded: the ground plane carries class-colored paint (roads,
dividers, crossings, carparks) and a handful of box obstacles stand on it.
Cameras ray-cast against ground and boxes; the LiDAR scans a fixed
azimuth/elevation pattern against the same surfaces, so every return lies on
an analytic surface. Everything is a pure function of (seed, params): layout
sampling, rendering, scanning, and corruption draw from seeded generators
in a fixed order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndops
from .geometry import BevGridSpec, CameraRig
from .lidar import PointCloud

__all__ = [
    "CLASSES",
    "Road",
    "Carpark",
    "Box",
    "SceneSpec",
    "SceneSample",
    "sample_layout",
    "class_masks",
    "rasterize_labels",
    "generate_scene",
    "corrupt",
    "make_sample",
    "save_sample",
    "load_sample",
    "luminance",
]

CLASSES = ("drivable", "divider", "crossing", "carpark")
CONDITIONS = ("clean", "rainy", "night")

# flat-shaded palette; LiDAR intensity reflects surface reflectivity (paint
# is retroreflective, so divider/crossing return hot)
_GROUND_COLORS = {
    "background": (0.26, 0.30, 0.24),
    "drivable": (0.44, 0.44, 0.46),
    "carpark": (0.30, 0.42, 0.62),
    "divider": (0.85, 0.72, 0.18),
    "crossing": (0.80, 0.80, 0.82),
}
_SKY_COLOR = (0.55, 0.65, 0.80)
_BOX_COLOR = (0.55, 0.22, 0.18)
_INTENSITY = {
    "background": 0.18,
    "drivable": 0.30,
    "carpark": 0.34,
    "crossing": 0.70,
    "divider": 0.85,
    "box": 0.50,
}

_LIDAR_HEIGHT = 1.9
_LIDAR_MAX_RANGE = 45.0
_N_AZIMUTH = 720
_ELEVATIONS_DEG = np.linspace(-30.0, -2.0, 24)
_RENDER_FAR = 120.0
_DIVIDER_WIDTH = 1.2


@dataclass(frozen=True)
class Road:
    angle: float  # radians, direction of travel
    offset: float  # signed perpendicular offset of the centerline from origin
    width: float
    crossing_pos: float | None = None  # longitudinal position of a ped crossing
    crossing_width: float = 3.0


@dataclass(frozen=True)
class Carpark:
    road_idx: int
    side: int  # +1 / -1: which side of the road
    along: float  # longitudinal center
    extent: float  # longitudinal size
    depth: float  # perpendicular size, measured outward from the road edge


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    length: float
    width: float
    height: float
    yaw: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    condition: str
    roads: tuple[Road, ...]
    carparks: tuple[Carpark, ...] = ()
    boxes: tuple[Box, ...] = ()

    def to_dict(self):
        return asdict(self)


@dataclass
class SceneSample:
    """One example: images in [0,1], cloud, binary label raster, metadata.

    ``depths`` carries the per-pixel z-depth buffers from rendering; it is
    consumed by the night corruption and not serialized.
    """

    images: np.ndarray  # (N, H, W, 3) float32
    depths: np.ndarray  # (N, H, W) float32
    cloud: PointCloud
    label: np.ndarray  # (K, H', W') float32 in {0, 1}
    condition: str
    y_mean: float
    spec: SceneSpec


def sample_layout(seed: int, condition: str) -> SceneSpec:
    """Draw road layout, carparks, and obstacles for one scene."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    rng = np.random.default_rng(np.random.SeedSequence([77, seed]))
    roads = []
    a0 = rng.uniform(0, np.pi)
    roads.append(
        Road(
            angle=a0,
            offset=rng.uniform(-8, 8),
            width=rng.uniform(7, 12),
            crossing_pos=rng.uniform(-15, 15) if rng.random() < 0.8 else None,
            crossing_width=rng.uniform(2.5, 4.0),
        )
    )
    if rng.random() < 0.7:
        roads.append(
            Road(
                angle=(a0 + rng.uniform(np.radians(50), np.radians(130))) % np.pi,
                offset=rng.uniform(-10, 10),
                width=rng.uniform(6, 10),
                crossing_pos=rng.uniform(-15, 15) if rng.random() < 0.8 else None,
                crossing_width=rng.uniform(2.5, 4.0),
            )
        )
    carparks = []
    for _ in range(1 + rng.binomial(2, 0.5)):
        carparks.append(
            Carpark(
                road_idx=int(rng.integers(len(roads))),
                side=int(rng.choice([-1, 1])),
                along=rng.uniform(-18, 18),
                extent=rng.uniform(6, 12),
                depth=rng.uniform(5, 8),
            )
        )
    boxes = []
    for _ in range(int(rng.integers(0, 5))):
        r = roads[int(rng.integers(len(roads)))]
        along = rng.uniform(-20, 20)
        lat = r.offset + rng.uniform(-0.3, 0.3) * r.width
        u = np.array([np.cos(r.angle), np.sin(r.angle)])
        n = np.array([-np.sin(r.angle), np.cos(r.angle)])
        c = along * u + lat * n
        if np.hypot(*c) < 4.0:  # keep the ego cell clear
            continue
        boxes.append(
            Box(
                x=float(c[0]),
                y=float(c[1]),
                length=4.2 * rng.uniform(0.9, 1.1),
                width=1.9 * rng.uniform(0.9, 1.1),
                height=1.6 * rng.uniform(0.9, 1.1),
                yaw=float(r.angle + rng.normal(0, 0.05)),
            )
        )
    return SceneSpec(seed=seed, condition=condition, roads=tuple(roads), carparks=tuple(carparks), boxes=tuple(boxes))


# ---------------------------------------------------------------------------
# Analytic ground-plane classes
# ---------------------------------------------------------------------------


def class_masks(spec: SceneSpec, xy: np.ndarray) -> dict[str, np.ndarray]:
    """Boolean mask per class at the query points (..., 2)."""
    x, y = xy[..., 0], xy[..., 1]
    drivable = np.zeros(x.shape, bool)
    divider = np.zeros(x.shape, bool)
    crossing = np.zeros(x.shape, bool)
    carpark = np.zeros(x.shape, bool)
    for r in spec.roads:
        u_lon = x * np.cos(r.angle) + y * np.sin(r.angle)
        u_perp = -x * np.sin(r.angle) + y * np.cos(r.angle)
        on_road = np.abs(u_perp - r.offset) <= r.width / 2
        drivable |= on_road
        divider |= np.abs(u_perp - r.offset) <= _DIVIDER_WIDTH / 2
        if r.crossing_pos is not None:
            crossing |= on_road & (np.abs(u_lon - r.crossing_pos) <= r.crossing_width / 2)
    for cp in spec.carparks:
        r = spec.roads[cp.road_idx]
        u_lon = x * np.cos(r.angle) + y * np.sin(r.angle)
        u_perp = -x * np.sin(r.angle) + y * np.cos(r.angle)
        edge = r.offset + cp.side * r.width / 2
        outward = cp.side * (u_perp - edge)
        carpark |= (np.abs(u_lon - cp.along) <= cp.extent / 2) & (outward >= 0) & (outward <= cp.depth)
    divider &= ~crossing  # crossing paint replaces the center line
    drivable |= carpark  # parking areas are drivable (classes may overlap)
    return {"drivable": drivable, "divider": divider, "crossing": crossing, "carpark": carpark}


def rasterize_labels(spec: SceneSpec, grid: BevGridSpec) -> np.ndarray:
    """(K, H', W') binary raster by cell-center membership."""
    masks = class_masks(spec, grid.cell_centers())
    return np.stack([masks[c].astype(np.float32) for c in CLASSES])


def _texture_noise(x, y, amp=0.035):
    """Deterministic per-half-meter hash noise so the ground is not flat."""
    ix = np.floor(x * 2.0)
    iy = np.floor(y * 2.0)
    h = np.sin(ix * 12.9898 + iy * 78.233) * 43758.5453
    return (h - np.floor(h) - 0.5) * 2 * amp


def _ground_color(spec: SceneSpec, xy: np.ndarray) -> np.ndarray:
    masks = class_masks(spec, xy)
    color = np.empty(xy.shape[:-1] + (3,), np.float64)
    color[...] = _GROUND_COLORS["background"]
    for name in ("drivable", "carpark", "divider", "crossing"):  # paint priority
        color[masks[name]] = _GROUND_COLORS[name]
    color += _texture_noise(xy[..., 0], xy[..., 1])[..., None]
    return np.clip(color, 0.0, 1.0)


def _surface_intensity(spec: SceneSpec, xy: np.ndarray) -> np.ndarray:
    masks = class_masks(spec, xy)
    inten = np.full(xy.shape[:-1], _INTENSITY["background"])
    for name in ("drivable", "carpark", "divider", "crossing"):
        inten[masks[name]] = _INTENSITY[name]
    return inten


def _ray_box_t(origin, dirs, box: Box):
    """Slab test in the box frame; returns t (z-depth/param units) or inf."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    ox, oy = origin[0] - box.x, origin[1] - box.y
    # rotate into the box frame (x along length)
    o_local = np.array([c * ox + s * oy, -s * ox + c * oy, origin[2]])
    dx = c * dirs[..., 0] + s * dirs[..., 1]
    dy = -s * dirs[..., 0] + c * dirs[..., 1]
    dz = dirs[..., 2]
    half = np.array([box.length / 2, box.width / 2, box.height])
    lo = np.array([-half[0], -half[1], 0.0])
    hi = np.array([half[0], half[1], box.height])
    tmin = np.full(dx.shape, -np.inf)
    tmax = np.full(dx.shape, np.inf)
    for d, o, l, h in ((dx, o_local[0], lo[0], hi[0]), (dy, o_local[1], lo[1], hi[1]), (dz, o_local[2], lo[2], hi[2])):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (l - o) / d
            t2 = (h - o) / d
        swap = t1 > t2
        t1, t2 = np.where(swap, t2, t1), np.where(swap, t1, t2)
        parallel = np.abs(d) < 1e-12
        inside = (o >= l) & (o <= h)
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        tmin = np.maximum(tmin, t1)
        tmax = np.minimum(tmax, t2)
    hit = (tmax >= tmin) & (tmax > 0)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where(hit & (t > 0), t, np.inf)


def _render_camera(spec: SceneSpec, rig: CameraRig, cam_idx: int):
    """Flat-shaded render: (H, W, 3) color in [0,1] and (H, W) z-depth."""
    cam = rig.cameras[cam_idx]
    h, w = cam.image_hw
    u = np.arange(w) + 0.5
    v = np.arange(h) + 0.5
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1)
    dirs = dirs_cam @ cam.rotation.T  # t parameterizes camera z-depth
    origin = cam.translation

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    t_best = np.where(t_ground <= _RENDER_FAR, t_ground, np.inf)
    surf = np.where(np.isfinite(t_best), 0, -1)  # 0 ground, -1 sky, 1+i box i
    for i, box in enumerate(spec.boxes):
        tb = _ray_box_t(origin, dirs, box)
        closer = tb < t_best
        t_best = np.where(closer, tb, t_best)
        surf = np.where(closer, 1 + i, surf)

    img = np.empty((h, w, 3), np.float64)
    img[...] = _SKY_COLOR
    ground = surf == 0
    if ground.any():
        pts = origin[None, :2] + t_best[ground, None] * dirs[ground][:, :2]
        img[ground] = _ground_color(spec, pts)
    for i, box in enumerate(spec.boxes):
        m = surf == 1 + i
        if m.any():
            shade = 1.0 - 0.25 * (i % 3) / 3
            img[m] = np.array(_BOX_COLOR) * shade
    depth = np.where(np.isfinite(t_best), t_best, _RENDER_FAR)
    return img, depth


def _scan_lidar(spec: SceneSpec, rng: np.random.Generator) -> PointCloud:
    az = np.arange(_N_AZIMUTH) * (2 * np.pi / _N_AZIMUTH)
    el = np.radians(_ELEVATIONS_DEG)
    aa, ee = np.meshgrid(az, el)
    dirs = np.stack([np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1)
    origin = np.array([0.0, 0.0, _LIDAR_HEIGHT])

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    t_best = t_ground.copy()
    surf = np.zeros(t_best.shape, np.int64)  # 0 ground, 1+i box i
    for i, box in enumerate(spec.boxes):
        tb = _ray_box_t(origin, dirs, box)
        closer = tb < t_best
        t_best = np.where(closer, tb, t_best)
        surf = np.where(closer, 1 + i, surf)

    hit = np.isfinite(t_best) & (t_best <= _LIDAR_MAX_RANGE) & (t_best > 0.5)
    pts = origin + t_best[hit, None] * dirs[hit]
    surf = surf[hit]
    inten = np.where(
        surf > 0,
        _INTENSITY["box"],
        _surface_intensity(spec, pts[:, :2]),
    )
    inten = np.clip(inten + rng.normal(0, 0.03, inten.shape), 0.0, 1.0)
    cloud = np.column_stack([pts, inten])
    return PointCloud(cloud.astype(np.float64))


def luminance(images: np.ndarray) -> float:
    """Mean BT.601 luma (0.299 R + 0.587 G + 0.114 B) over all pixels."""
    w = np.array([0.299, 0.587, 0.114])
    return float(np.tensordot(images, w, axes=([-1], [0])).mean())


def generate_scene(spec: SceneSpec, rig: CameraRig, grid: BevGridSpec) -> SceneSample:
    """Deterministic clean render of a scene (pre-corruption)."""
    rng = np.random.default_rng(np.random.SeedSequence([101, spec.seed]))
    images = np.empty((rig.n_cameras, *rig.cameras[0].image_hw, 3), np.float64)
    depths = np.empty((rig.n_cameras, *rig.cameras[0].image_hw), np.float64)
    for ci in range(rig.n_cameras):
        images[ci], depths[ci] = _render_camera(spec, rig, ci)
    cloud = _scan_lidar(spec, rng)
    label = rasterize_labels(spec, grid)
    if not label.any():
        raise AssertionError("scene produced an empty label raster")
    sample = SceneSample(
        images=images.astype(np.float32),
        depths=depths.astype(np.float32),
        cloud=cloud,
        label=label,
        condition="clean",
        y_mean=0.0,
        spec=spec,
    )
    sample.y_mean = luminance(sample.images)
    return sample


def corrupt(sample: SceneSample, condition: str) -> SceneSample:
    """Apply the rainy or night sensor model; 'clean' is the identity."""
    if condition == "clean":
        return sample
    if condition not in ("rainy", "night"):
        raise ValueError(f"unknown condition {condition!r}; expected clean, rainy, or night")
    rng = np.random.default_rng(np.random.SeedSequence([202, sample.spec.seed]))
    images = sample.images.astype(np.float64)
    n, h, w, _ = images.shape

    if condition == "rainy":
        coverage = rng.uniform(0.02, 0.06)
        for ci in range(n):
            target = int(coverage * h * w)
            painted = 0
            while painted < target:
                u0 = rng.uniform(0, w)
                v0 = rng.uniform(0, h)
                ang = rng.uniform(np.radians(75), np.radians(105))
                length = rng.uniform(8, 28)
                steps = int(length)
                tt = np.arange(steps)
                us = np.clip((u0 + np.cos(ang) * tt).astype(int), 0, w - 1)
                vs = np.clip((v0 + np.sin(ang) * tt).astype(int), 0, h - 1)
                images[ci, vs, us] = rng.uniform(0.80, 0.95)
                painted += steps
        # range-dependent dropout, worst at far range
        r = np.linalg.norm(sample.cloud.points[:, :2], axis=1)
        p_drop = 0.30 * np.clip(r / _LIDAR_MAX_RANGE, 0, 1)
        keep = rng.random(len(r)) >= p_drop
        cloud = PointCloud(sample.cloud.points[keep])
    else:  # night
        gray = 0.38
        fade = np.exp(-sample.depths.astype(np.float64) / 45.0)[..., None]
        images = gray + (images - gray) * fade  # distance-dependent contrast loss
        k = rng.uniform(0.1, 0.3)
        images = images * k
        images = images + rng.normal(0, 0.02, images.shape)
        cloud = sample.cloud  # LiDAR keeps its sensing at night

    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    out = SceneSample(
        images=images,
        depths=sample.depths,
        cloud=cloud,
        label=sample.label,
        condition=condition,
        y_mean=luminance(images),
        spec=sample.spec,
    )
    return out


def make_sample(seed: int, condition: str, rig: CameraRig, grid: BevGridSpec) -> SceneSample:
    """Layout + clean render + corruption, all from (seed, condition)."""
    spec = sample_layout(seed, condition)
    return corrupt(generate_scene(spec, rig, grid), condition)


# ---------------------------------------------------------------------------
# Dataset directory layout: scenes/<split>/<seed>/
# ---------------------------------------------------------------------------


def save_sample(dirpath, sample: SceneSample) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for ci in range(sample.images.shape[0]):
        ndops.write_tensor(d / f"img_{ci}.bbt", sample.images[ci])
    sample.cloud.save(d / "cloud.bbpc")
    ndops.write_tensor(d / "label.bbt", np.ascontiguousarray(sample.label.transpose(1, 2, 0)))
    meta = {
        "condition": sample.condition,
        "y_mean": sample.y_mean,
        "seed": sample.spec.seed,
        "layout": sample.spec.to_dict(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_sample(dirpath):
    """Returns (images (N,H,W,3), cloud, label (K,H',W'), meta dict)."""
    d = Path(dirpath)
    imgs = []
    for ci in range(len(sorted(d.glob("img_*.bbt")))):
        imgs.append(ndops.read_tensor(d / f"img_{ci}.bbt"))
    cloud = PointCloud.load(d / "cloud.bbpc")
    label = ndops.read_tensor(d / "label.bbt").transpose(2, 0, 1)
    meta = json.loads((d / "meta.json").read_text())
    return np.stack(imgs), cloud, np.ascontiguousarray(label), meta
