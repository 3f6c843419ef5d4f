"""Procedural aerial/ground road scene with analytic ground truth.

World frame: x lateral, y up, z along the road. The scene is a textured ground
plane (asphalt road with lane markings and crosswalks, sidewalks, verge) and
box buildings on both sides. Ground truth comes from a z-buffered triangle
rasterizer with flat shading.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numba import njit

from . import io as uio
from .geometry import Z_NEAR, Camera, RigidTransform, look_at, pitch_down, translate_center

log = logging.getLogger(__name__)

SKY = (0.62, 0.74, 0.88)
MANIFEST_HEADER = "SCENE-UC/1"

SPLITS = ("ground-train", "aerial-train", "held-out", "shifted", "shifted-rotated")

GROUND, FACADE, ROOF = 0, 1, 2
_LIGHT = np.array([0.35, 1.0, 0.25]) / np.linalg.norm([0.35, 1.0, 0.25])


@dataclass
class SceneSpec:
    seed: int = 0
    road_length: float = 40.0
    road_width: float = 8.0
    sidewalk_width: float = 2.0
    building_count: int = 10
    building_height_min: float = 4.0
    building_height_max: float = 12.0
    dash_length: float = 3.0
    crosswalk_stripe: float = 0.5
    noise_scale: float = 0.35
    window_spacing: float = 2.5
    n_ground_train: int = 60
    n_aerial_train: int = 40
    n_heldout: int = 12
    ground_heights: tuple = (1.5, 1.8)
    lane_offset: float = -2.0
    test_shift: float = 0.1
    test_pitch: float = 5.0
    aerial_height: float = 10.0
    aerial_pitch: float = 60.0
    aerial_lateral: float = 2.5
    width: int = 240
    height: int = 120
    hfov_deg: float = 90.0
    supersample: int = 2

    def __post_init__(self):
        self.ground_heights = tuple(float(h) for h in self.ground_heights)
        for name in ("road_length", "road_width", "sidewalk_width", "dash_length", "crosswalk_stripe",
                     "noise_scale", "window_spacing", "aerial_height", "building_height_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.building_height_max < self.building_height_min:
            raise ValueError("building_height_max < building_height_min")
        if self.building_count < 0:
            raise ValueError("building_count must be >= 0")
        if not all(h > 0 for h in self.ground_heights) or not self.ground_heights:
            raise ValueError("ground_heights must be positive")
        if not 0 < self.aerial_pitch < 90:
            raise ValueError("aerial_pitch must be in (0, 90) degrees")
        if not 0 <= self.test_pitch < 90:
            raise ValueError("test_pitch must be in [0, 90) degrees")
        nh = len(self.ground_heights)
        if self.n_ground_train % nh or self.n_heldout % nh:
            raise ValueError("ground camera counts must be divisible by the number of heights")
        if self.width < 1 or self.height < 1 or self.supersample < 1:
            raise ValueError("image size and supersample must be >= 1")

    @property
    def test_heights(self):
        return tuple(h + self.test_shift for h in self.ground_heights)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        kinds = {f.name: f.default for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ValueError(f"unknown scene spec key: {k}")
            out[k] = uio.coerce(v, kinds[k]) if isinstance(v, str) else v
        return cls(**out)


# --------------------------------------------------------------------------
# geometry


@dataclass
class Surfaces:
    kind: np.ndarray  # (S,) GROUND / FACADE / ROOF
    origin: np.ndarray  # (S, 3)
    u_axis: np.ndarray  # (S, 3)
    v_axis: np.ndarray  # (S, 3)
    normal: np.ndarray  # (S, 3)
    base: np.ndarray  # (S, 3) base albedo

    def __len__(self):
        return len(self.kind)


def _quad(p0, p1, p2, p3):
    return [(p0, p1, p2), (p0, p2, p3)]


def build_geometry(spec: SceneSpec, rng):
    tris, tri_surf = [], []
    kinds, origins, uax, vax, normals, bases = [], [], [], [], [], []

    def add_surface(kind, origin, u, v, n, base, quads):
        sid = len(kinds)
        kinds.append(kind)
        origins.append(origin)
        uax.append(u)
        vax.append(v)
        normals.append(n)
        bases.append(base)
        for q in quads:
            for t in _quad(*q):
                tris.append(t)
                tri_surf.append(sid)

    # ground plane, tessellated so near-plane clipping stays local
    x0, x1 = -30.0, 30.0
    z0, z1 = -30.0, spec.road_length + 40.0
    xs = np.linspace(x0, x1, 11)
    zs = np.linspace(z0, z1, int(np.ceil((z1 - z0) / 6.0)) + 1)
    quads = []
    for i in range(len(xs) - 1):
        for j in range(len(zs) - 1):
            quads.append((
                (xs[i], 0.0, zs[j]), (xs[i], 0.0, zs[j + 1]),
                (xs[i + 1], 0.0, zs[j + 1]), (xs[i + 1], 0.0, zs[j]),
            ))
    add_surface(GROUND, np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0]),
                np.array([0.3, 0.3, 0.3]), quads)

    edge = spec.road_width / 2 + spec.sidewalk_width + 0.5
    sides = [-1.0, 1.0]
    cursors = {s: -10.0 + rng.uniform(0, 4) for s in sides}
    for b in range(spec.building_count):
        side = sides[b % 2]
        length = rng.uniform(6.0, 12.0)
        depth = rng.uniform(6.0, 10.0)
        height = rng.uniform(spec.building_height_min, spec.building_height_max)
        za = cursors[side]
        zb = za + length
        cursors[side] = zb + rng.uniform(2.0, 5.0)
        xa, xb = (edge, edge + depth) if side > 0 else (-edge - depth, -edge)
        base = np.array([rng.uniform(0.45, 0.8), rng.uniform(0.4, 0.7), rng.uniform(0.35, 0.6)])
        # four walls, outward normals, v axis up
        walls = [
            ((xa, 0, za), (xb, 0, za), np.array([0, 0, -1.0]), np.array([1.0, 0, 0])),
            ((xb, 0, zb), (xa, 0, zb), np.array([0, 0, 1.0]), np.array([-1.0, 0, 0])),
            ((xa, 0, zb), (xa, 0, za), np.array([-1.0, 0, 0]), np.array([0, 0, -1.0])),
            ((xb, 0, za), (xb, 0, zb), np.array([1.0, 0, 0]), np.array([0, 0, 1.0])),
        ]
        for p, q, n, u in walls:
            p = np.array(p, dtype=float)
            q = np.array(q, dtype=float)
            up = np.array([0, height, 0])
            add_surface(FACADE, p, u, np.array([0, 1.0, 0]), n, base, [(p, p + up, q + up, q)])
        roof = (np.array([xa, height, za]), np.array([xa, height, zb]),
                np.array([xb, height, zb]), np.array([xb, height, za]))
        add_surface(ROOF, roof[0], np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), np.array([0, 1.0, 0]),
                    base * 0.55, [roof])

    tris = np.array([[np.asarray(v, dtype=float) for v in t] for t in tris])
    surfaces = Surfaces(np.array(kinds), np.array(origins, float), np.array(uax, float),
                        np.array(vax, float), np.array(normals, float), np.array(bases, float))
    return tris, np.array(tri_surf, dtype=np.int64), surfaces


# --------------------------------------------------------------------------
# ground-truth rasterizer


@njit(cache=True)
def _raster_triangles(tris, R, t, fx, fy, cx, cy, width, height, near, zbuf, idbuf):
    poly = np.empty((4, 3))
    v = np.empty((3, 3))
    for k in range(tris.shape[0]):
        for i in range(3):
            for r in range(3):
                v[i, r] = R[r, 0] * tris[k, i, 0] + R[r, 1] * tris[k, i, 1] + R[r, 2] * tris[k, i, 2] + t[r]
        n = 0
        for i in range(3):
            j = (i + 1) % 3
            a_in = v[i, 2] >= near
            b_in = v[j, 2] >= near
            if a_in:
                poly[n] = v[i]
                n += 1
            if a_in != b_in:
                s = (near - v[i, 2]) / (v[j, 2] - v[i, 2])
                for r in range(3):
                    poly[n, r] = v[i, r] + s * (v[j, r] - v[i, r])
                poly[n, 2] = near
                n += 1
        if n < 3:
            continue
        for f in range(1, n - 1):
            ax = fx * poly[0, 0] / poly[0, 2] + cx
            ay = fy * poly[0, 1] / poly[0, 2] + cy
            bx = fx * poly[f, 0] / poly[f, 2] + cx
            by = fy * poly[f, 1] / poly[f, 2] + cy
            qx = fx * poly[f + 1, 0] / poly[f + 1, 2] + cx
            qy = fy * poly[f + 1, 1] / poly[f + 1, 2] + cy
            area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            if abs(area) < 1e-12:
                continue
            iza = 1.0 / poly[0, 2]
            izb = 1.0 / poly[f, 2]
            izc = 1.0 / poly[f + 1, 2]
            xmin = max(0, int(np.ceil(min(ax, bx, qx))))
            xmax = min(width - 1, int(np.floor(max(ax, bx, qx))))
            ymin = max(0, int(np.ceil(min(ay, by, qy))))
            ymax = min(height - 1, int(np.floor(max(ay, by, qy))))
            for y in range(ymin, ymax + 1):
                for x in range(xmin, xmax + 1):
                    w0 = ((bx - x) * (qy - y) - (by - y) * (qx - x)) / area
                    w1 = ((qx - x) * (ay - y) - (qy - y) * (ax - x)) / area
                    w2 = 1.0 - w0 - w1
                    if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                        continue
                    iz = w0 * iza + w1 * izb + w2 * izc
                    if iz <= 0:
                        continue
                    z = 1.0 / iz
                    if z < zbuf[y, x]:
                        zbuf[y, x] = z
                        idbuf[y, x] = k


def rasterize(tris, camera: Camera, scale: int = 1):
    """Z-buffer the triangles; returns (depth with inf for no hit, triangle id or -1).

    ``scale`` renders a supersampled buffer whose pixel (i, j) center maps to
    low-res coordinate ((i + 0.5) / scale - 0.5, ...).
    """
    W, H = camera.width * scale, camera.height * scale
    zbuf = np.full((H, W), np.inf)
    idbuf = np.full((H, W), -1, dtype=np.int64)
    fx, fy = camera.fx * scale, camera.fy * scale
    cx = camera.cx * scale + 0.5 * (scale - 1)
    cy = camera.cy * scale + 0.5 * (scale - 1)
    _raster_triangles(tris, camera.R, camera.t, fx, fy, cx, cy, W, H, Z_NEAR, zbuf, idbuf)
    return zbuf, idbuf


# --------------------------------------------------------------------------
# procedural albedo


def _hash01(ix, iy, seed):
    h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
    h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F) + np.uint64(seed * 0x165667B19E3779F9 % 2**64)
    h ^= h >> np.uint64(29)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(32)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def value_noise(x, y, scale, seed):
    """Smooth lattice noise in [0, 1]."""
    fx = np.asarray(x, dtype=np.float64) / scale
    fy = np.asarray(y, dtype=np.float64) / scale
    ix = np.floor(fx)
    iy = np.floor(fy)
    tx = fx - ix
    ty = fy - iy
    tx = tx * tx * (3 - 2 * tx)
    ty = ty * ty * (3 - 2 * ty)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    a = _hash01(ix, iy, seed)
    b = _hash01(ix + 1, iy, seed)
    c = _hash01(ix, iy + 1, seed)
    d = _hash01(ix + 1, iy + 1, seed)
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def _ground_albedo(x, z, spec: SceneSpec):
    s = spec.seed
    half = spec.road_width / 2
    ax = np.abs(x)
    out = np.empty(x.shape + (3,))
    fine = value_noise(x, z, spec.noise_scale * 0.25, s + 1) - 0.5
    mid = value_noise(x, z, spec.noise_scale * 2.0, s + 2) - 0.5
    coarse = value_noise(x, z, 6.0, s + 3) - 0.5

    road = ax < half
    g = 0.3 + 0.1 * fine + 0.08 * mid + 0.1 * coarse
    out[...] = np.stack([g, g, g * 1.04], axis=-1)

    side = (ax >= half) & (ax < half + spec.sidewalk_width)
    tile = ((np.mod(x, 1.0) < 0.05) | (np.mod(z, 1.0) < 0.05))
    sw = 0.62 + 0.06 * fine - 0.12 * tile
    out[side] = np.stack([sw, sw * 0.98, sw * 0.94], axis=-1)[side]

    verge = ax >= half + spec.sidewalk_width
    vg = value_noise(x, z, 1.5, s + 4)
    vcol = np.stack([0.3 + 0.15 * vg + 0.08 * fine, 0.42 + 0.12 * vg + 0.08 * fine, 0.2 + 0.05 * vg], axis=-1)
    out[verge] = vcol[verge]

    white = np.array([0.92, 0.92, 0.9])
    yellow = np.array([0.95, 0.78, 0.2])
    centre = road & (ax < 0.08) & (np.mod(z, 2 * spec.dash_length) < spec.dash_length)
    out[centre] = yellow
    edge_line = road & (ax > half - 0.35) & (ax < half - 0.2)
    out[edge_line] = white
    cw = np.zeros_like(road)
    for zc in (spec.road_length * 0.25, spec.road_length * 0.75):
        cw |= road & (np.abs(z - zc) < 1.6) & (np.mod(x + 100.0, 2 * spec.crosswalk_stripe) < spec.crosswalk_stripe)
    out[cw] = white
    stop = road & (np.abs(z - spec.road_length * 0.5) < 0.2) & (x > 0) & (x < half - 0.35)
    out[stop] = white
    return out


def _facade_albedo(u, v, base, spec: SceneSpec, sid):
    s = spec.seed
    ws = spec.window_spacing
    noise = value_noise(u, v + 31.0 * sid, 0.7, s + 5) - 0.5
    out = base * (1.0 + 0.15 * noise)[:, None]
    floor_line = np.mod(v, 3.0) < 0.18
    out[floor_line] *= 0.7
    win = (np.mod(u, ws) > 0.25 * ws) & (np.mod(u, ws) < 0.75 * ws) & (np.mod(v, 3.0) > 0.9) & (np.mod(v, 3.0) < 2.4) & (v > 2.5)
    glass = np.array([0.16, 0.22, 0.3]) + 0.08 * value_noise(u, v, 3.0, s + 6)[:, None]
    out[win] = glass[win]
    door = (v < 2.2) & (np.mod(u, 3 * ws) > 1.0) & (np.mod(u, 3 * ws) < 2.2)
    out[door] = np.array([0.25, 0.17, 0.1])
    return out


def _roof_albedo(u, v, base, spec, sid):
    n = value_noise(u, v + 17.0 * sid, 0.8, spec.seed + 7)
    vent = (np.mod(u, 4.0) < 1.0) & (np.mod(v, 5.0) < 1.0)
    out = base * (0.85 + 0.3 * n)[:, None]
    out[vent] = np.array([0.55, 0.55, 0.55])
    return out


def shade_points(points, surf_ids, surfaces: Surfaces, spec: SceneSpec):
    """Flat-shaded albedo at world points lying on the given surfaces."""
    points = np.asarray(points, dtype=np.float64)
    out = np.zeros((len(points), 3))
    for sid in np.unique(surf_ids):
        m = surf_ids == sid
        p = points[m]
        rel = p - surfaces.origin[sid]
        u = rel @ surfaces.u_axis[sid]
        v = rel @ surfaces.v_axis[sid]
        kind = surfaces.kind[sid]
        if kind == GROUND:
            col = _ground_albedo(p[:, 0], p[:, 2], spec)
        elif kind == FACADE:
            col = _facade_albedo(u, v, surfaces.base[sid], spec, sid)
        else:
            col = _roof_albedo(u, v, surfaces.base[sid], spec, sid)
        shade = 0.6 + 0.4 * max(0.0, float(surfaces.normal[sid] @ _LIGHT))
        out[m] = col * shade
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# bundle


@dataclass
class SceneBundle:
    spec: SceneSpec
    triangles: np.ndarray
    tri_surface: np.ndarray
    surfaces: Surfaces
    cameras: dict = field(default_factory=dict)  # split -> list of (id, Camera)
    images: dict = field(default_factory=dict)  # id -> H x W x 3
    depths: dict = field(default_factory=dict)  # id -> H x W, NaN where no surface
    surface_ids: dict = field(default_factory=dict)  # id -> H x W, -1 where no surface
    points: np.ndarray = None
    point_colors: np.ndarray = None
    background: tuple = SKY

    def camera(self, cam_id):
        for cams in self.cameras.values():
            for cid, cam in cams:
                if cid == cam_id:
                    return cam
        raise KeyError(cam_id)

    def split(self, name):
        if name not in self.cameras:
            raise KeyError(f"no split {name!r}; have {sorted(self.cameras)}")
        return self.cameras[name]

    def render_truth(self, camera: Camera):
        """(image, depth, surface id map) for an arbitrary camera."""
        return render_truth(self, camera)


def render_truth(scene, camera: Camera):
    spec = scene.spec
    ss = spec.supersample
    zb, ib = rasterize(scene.triangles, camera, ss)
    hit = ib >= 0
    v, u = np.nonzero(hit)
    low_u = (u + 0.5) / ss - 0.5
    low_v = (v + 0.5) / ss - 0.5
    pts = camera.unproject(np.stack([low_u, low_v], axis=-1), zb[hit])
    sids = scene.tri_surface[ib[hit]]
    hi = np.empty(zb.shape + (3,))
    hi[...] = np.asarray(scene.background)
    hi[hit] = shade_points(pts, sids, scene.surfaces, spec)
    H, W = camera.height, camera.width
    image = hi.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    image = uio.quantize8(image)
    zl, il = rasterize(scene.triangles, camera, 1)
    depth = np.where(il >= 0, zl, np.nan)
    surf = np.where(il >= 0, scene.tri_surface[np.maximum(il, 0)], -1)
    return image, depth, surf


def _camera(spec: SceneSpec, pose: RigidTransform) -> Camera:
    f = spec.width / 2.0 / np.tan(np.deg2rad(spec.hfov_deg) / 2.0)
    return Camera(f, f, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width, spec.height, pose)


def _trajectories(spec: SceneSpec):
    heights = spec.ground_heights
    n_pos = (spec.n_ground_train + spec.n_heldout) // len(heights)
    n_held = spec.n_heldout // len(heights)
    zs = np.linspace(2.0, spec.road_length - 2.0, n_pos)
    held = set(np.round(np.linspace(0, n_pos - 1, n_held + 2)[1:-1]).astype(int).tolist()) if n_held else set()
    ground, heldout = [], []
    for h in heights:
        for k, z in enumerate(zs):
            eye = np.array([spec.lane_offset, h, z])
            pose = look_at(eye, eye + np.array([0.0, 0.0, 1.0]))
            (heldout if k in held else ground).append(pose)
    aerial = []
    n_lat = 2 if spec.n_aerial_train > 1 else 1
    n_along = int(np.ceil(spec.n_aerial_train / n_lat))
    pitch = np.deg2rad(spec.aerial_pitch)
    look = np.array([0.0, -np.sin(pitch), np.cos(pitch)])
    lat = [-spec.aerial_lateral, spec.aerial_lateral] if n_lat == 2 else [0.0]
    back = spec.aerial_height / np.tan(pitch)
    for k, z in enumerate(np.linspace(-back, spec.road_length - back, n_along)):
        for x in lat:
            if len(aerial) < spec.n_aerial_train:
                eye = np.array([x, spec.aerial_height, z])
                aerial.append(look_at(eye, eye + look))
    return ground, aerial, heldout


def make_test_variants(bundle: SceneBundle, spec: SceneSpec | None = None, render_gt=True):
    """Elevated (+shift) and elevated + pitched-down copies of every held-out camera."""
    spec = spec or bundle.spec
    shifted, rotated = [], []
    for cid, cam in bundle.split("held-out"):
        pose = translate_center(cam.pose, [0.0, spec.test_shift, 0.0])
        shifted.append((cid.replace("h", "s", 1), cam.with_pose(pose)))
        rotated.append((cid.replace("h", "r", 1), cam.with_pose(pitch_down(pose, spec.test_pitch))))
    bundle.cameras["shifted"] = shifted
    bundle.cameras["shifted-rotated"] = rotated
    if render_gt:
        for cid, cam in shifted + rotated:
            _store_truth(bundle, cid, cam)
    return shifted, rotated


def _store_truth(bundle, cid, cam):
    img, depth, surf = render_truth(bundle, cam)
    if not np.any(surf >= 0):
        raise ValueError(f"camera {cid} sees no geometry")
    bundle.images[cid] = img
    bundle.depths[cid] = depth
    bundle.surface_ids[cid] = surf


def visible_mask(points, point_surface, camera: Camera, depth, surf, rel_tol=0.02, abs_tol=0.05):
    """Depth-buffer visibility of surface points from one camera."""
    pix, z, front = camera.project(points)
    out = np.zeros(len(points), dtype=bool)
    ui = np.round(np.nan_to_num(pix[:, 0], nan=-1.0)).astype(np.int64)
    vi = np.round(np.nan_to_num(pix[:, 1], nan=-1.0)).astype(np.int64)
    inside = front & (ui >= 0) & (ui < camera.width) & (vi >= 0) & (vi < camera.height)
    idx = np.nonzero(inside)[0]
    d = depth[vi[idx], ui[idx]]
    s = surf[vi[idx], ui[idx]]
    same_surface = s == point_surface[idx]
    close = np.abs(np.nan_to_num(d, nan=np.inf) - z[idx]) <= abs_tol + rel_tol * z[idx]
    out[idx] = same_surface | close
    return out


def sample_surface_points(bundle: SceneBundle, count, rng):
    tris = bundle.triangles
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    k = rng.choice(len(tris), size=count, p=area / area.sum())
    a = rng.random(count)
    b = rng.random(count)
    flip = a + b > 1
    a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
    pts = tris[k, 0] + a[:, None] * e1[k] + b[:, None] * e2[k]
    return pts, bundle.tri_surface[k]


def sample_init_points(bundle: SceneBundle, count: int, min_views: int = 2, seed=None, cameras=None):
    """Area-uniform surface samples seen by at least ``min_views`` ground cameras.

    Stands in for an SfM reconstruction from the ground imagery; colors are
    the shaded albedo at each sample.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(bundle.spec.seed + 7919 if seed is None else seed)
    cams = bundle.split("ground-train") if cameras is None else cameras
    truths = []
    for cid, cam in cams:
        if cid in bundle.depths:
            truths.append((cam, bundle.depths[cid], bundle.surface_ids[cid]))
        else:
            _, d, s = render_truth(bundle, cam)
            truths.append((cam, d, s))
    chosen_p, chosen_s = [], []
    have = 0
    for _ in range(40):
        pts, sids = sample_surface_points(bundle, max(4 * count, 1000), rng)
        views = np.zeros(len(pts), dtype=np.int64)
        for cam, d, s in truths:
            views += visible_mask(pts, sids, cam, d, s)
        keep = views >= min_views
        chosen_p.append(pts[keep])
        chosen_s.append(sids[keep])
        have += int(keep.sum())
        if have >= count:
            break
    pts = np.concatenate(chosen_p)[:count]
    sids = np.concatenate(chosen_s)[:count]
    if len(pts) == 0:
        raise ValueError(f"no surface point is visible from {min_views} ground cameras")
    if len(pts) < count:
        log.warning("only %d of %d requested init points are visible", len(pts), count)
    return pts, shade_points(pts, sids, bundle.surfaces, bundle.spec)


def road_covisibility(bundle: SceneBundle, n=2000, rng=None):
    """Fraction of road-surface samples seen by at least one ground and one aerial camera."""
    rng = rng or np.random.default_rng(bundle.spec.seed + 104729)
    spec = bundle.spec
    half = spec.road_width / 2
    pts = np.stack([rng.uniform(-half, half, n), np.zeros(n), rng.uniform(0, spec.road_length, n)], axis=1)
    sids = np.zeros(n, dtype=np.int64)  # the ground plane is surface 0

    def seen(split):
        m = np.zeros(n, dtype=bool)
        for cid, cam in bundle.split(split):
            m |= visible_mask(pts, sids, cam, bundle.depths[cid], bundle.surface_ids[cid])
        return m

    return float(np.mean(seen("ground-train") & seen("aerial-train")))


def generate(spec: SceneSpec, init_points: int = 6000, check_covisibility=True) -> SceneBundle:
    """Build the scene, camera splits, ground truth and initialization cloud (deterministic in seed)."""
    rng = np.random.default_rng(spec.seed)
    tris, tri_surf, surfaces = build_geometry(spec, rng)
    bundle = SceneBundle(spec, tris, tri_surf, surfaces)
    ground, aerial, held = _trajectories(spec)
    bundle.cameras["ground-train"] = [(f"g{i:03d}", _camera(spec, p)) for i, p in enumerate(ground)]
    bundle.cameras["aerial-train"] = [(f"a{i:03d}", _camera(spec, p)) for i, p in enumerate(aerial)]
    bundle.cameras["held-out"] = [(f"h{i:03d}", _camera(spec, p)) for i, p in enumerate(held)]
    for split in ("ground-train", "aerial-train", "held-out"):
        for cid, cam in bundle.cameras[split]:
            _store_truth(bundle, cid, cam)
    make_test_variants(bundle, spec)
    if check_covisibility:
        frac = road_covisibility(bundle)
        if frac < 0.5:
            raise ValueError(f"only {frac:.0%} of the road is seen from both ground and aerial cameras")
    if init_points:
        bundle.points, bundle.point_colors = sample_init_points(bundle, init_points)
    return bundle


# --------------------------------------------------------------------------
# manifest


def _camera_line(cid, split, cam: Camera, image, depth):
    q = cam.pose.rotation
    t = cam.pose.translation
    nums = [cam.width, cam.height] + [repr(float(x)) for x in (cam.fx, cam.fy, cam.cx, cam.cy, *q, *t)]
    return " ".join(["camera", cid, split, *map(str, nums), image, depth])


def save_bundle(bundle: SceneBundle, out_dir) -> Path:
    """Write images, depth maps, point cloud and a SCENE-UC/1 manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for k, v in bundle.spec.to_dict().items():
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"spec {k}={v!r}" if isinstance(v, float) else f"spec {k}={v}")
    lines.append("background " + " ".join(repr(float(c)) for c in bundle.background))
    if bundle.points is not None:
        uio.write_points(out / "points.bin", bundle.points, bundle.point_colors)
        lines.append("points points.bin")
    for split in SPLITS:
        for cid, cam in bundle.cameras.get(split, []):
            img = f"images/{cid}.png"
            dep = f"depth/{cid}.ucmap"
            uio.write_png(out / img, bundle.images[cid])
            uio.write_ucmap(out / dep, bundle.depths[cid])
            lines.append(_camera_line(cid, split, cam, img, dep))
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass
class ManifestView:
    id: str
    split: str
    camera: Camera
    image_path: Path
    depth_path: Path

    def image(self, dtype=np.float32):
        return uio.read_png(self.image_path, dtype)

    def depth(self):
        return uio.read_ucmap(self.depth_path)[0]


@dataclass
class Manifest:
    path: Path
    spec: SceneSpec
    background: tuple
    views: list
    points_path: Path | None

    def split(self, name):
        views = [v for v in self.views if v.split == name]
        if not views:
            raise KeyError(f"manifest {self.path} has no {name!r} views")
        return views

    def view(self, cam_id):
        for v in self.views:
            if v.id == cam_id:
                return v
        raise KeyError(f"no camera {cam_id!r} in {self.path}")

    def points(self):
        if self.points_path is None:
            raise ValueError(f"manifest {self.path} lists no point cloud")
        return uio.read_points(self.points_path)


def load_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ValueError(f"{path}: missing {MANIFEST_HEADER} header")
    root = path.parent
    spec_kv, views, points, bg = {}, [], None, SKY
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "spec":
            k, v = line[len("spec "):].split("=", 1)
            spec_kv[k.strip()] = v.strip()
        elif tag == "background":
            bg = tuple(float(x) for x in parts[1:4])
        elif tag == "points":
            points = root / parts[1]
        elif tag == "camera":
            if len(parts) != 18:
                raise ValueError(f"{path}:{lineno}: camera line needs 17 fields, got {len(parts) - 1}")
            cid, split = parts[1], parts[2]
            w, h = int(parts[3]), int(parts[4])
            fx, fy, cx, cy, qw, qx, qy, qz, tx, ty, tz = map(float, parts[5:16])
            cam = Camera(fx, fy, cx, cy, w, h, RigidTransform([qw, qx, qy, qz], [tx, ty, tz]))
            views.append(ManifestView(cid, split, cam, root / parts[16], root / parts[17]))
        else:
            raise ValueError(f"{path}:{lineno}: unknown record {tag!r}")
    return Manifest(path, SceneSpec.from_dict(spec_kv), bg, views, points)
