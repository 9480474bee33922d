"""Analytic tabletop scenes, a ray-casting renderer, and placement predicates.

World frame: the table top is the plane z = 0, +z points up.  Objects are
boxes, vertical cylinders and spheres resting on the table; their pose z is
the height of the geometric center (half height, or the sphere radius).
"""

from __future__ import annotations

import enum
import functools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateSceneError, InvalidInputError
from .imgproc import ColorSpace, Image, write_ppm

AMBIENT = 0.3
DEFAULT_RESOLUTION = (256, 256)
# label values in RenderOutput.labels; object k of the scene has label k
LABEL_NONE = -1
LABEL_TABLE = -2
TABLE_ID = "__table__"
_EPS = 1e-9
_TOUCH_TOL = 1e-12


class Shape(str, enum.Enum):
    BOX = "BOX"
    CYLINDER = "CYLINDER"
    SPHERE = "SPHERE"


_N_DIMS = {Shape.BOX: 3, Shape.CYLINDER: 2, Shape.SPHERE: 1}


def _vec(v, n, name):
    try:
        out = tuple(float(x) for x in v)
    except TypeError as exc:
        raise InvalidInputError(f"{name} must be a sequence of {n} numbers") from exc
    if len(out) != n or not all(math.isfinite(x) for x in out):
        raise InvalidInputError(f"{name} must be {n} finite numbers, got {v!r}")
    return out


def _color(v, name="color"):
    c = _vec(v, 3, name)
    if any(x < 0 or x > 1 for x in c):
        raise InvalidInputError(f"{name} components must lie in [0, 1], got {c}")
    return c


def rest_height(shape: Shape, dims: Sequence[float]) -> float:
    """Center height of an object resting on the table."""
    shape = Shape(shape)
    if shape is Shape.SPHERE:
        return dims[0]
    return (dims[2] if shape is Shape.BOX else dims[1]) / 2.0


@dataclass(frozen=True)
class ObjectSpec:
    id: str
    shape: Shape
    dims: tuple[float, ...]
    color: tuple[float, float, float]
    pose: tuple[float, float, float, float]  # x, y, z, yaw

    def __post_init__(self):
        shape = Shape(self.shape)
        object.__setattr__(self, "shape", shape)
        dims = _vec(self.dims, _N_DIMS[shape], f"{self.id}.dims")
        if any(d <= 0 for d in dims):
            raise InvalidInputError(f"{self.id}: dims must be positive, got {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "color", _color(self.color, f"{self.id}.color"))
        pose = _vec(self.pose, 4, f"{self.id}.pose")
        object.__setattr__(self, "pose", pose)
        if abs(pose[2] - rest_height(shape, dims)) > 1e-9:
            raise InvalidInputError(
                f"{self.id}: z={pose[2]} but an object resting on the table needs z={rest_height(shape, dims)}"
            )

    @classmethod
    def on_table(cls, id, shape, dims, color, x, y, yaw=0.0) -> "ObjectSpec":
        shape = Shape(shape)
        dims = tuple(float(d) for d in dims)
        return cls(id, shape, dims, color, (float(x), float(y), rest_height(shape, dims), float(yaw)))

    @property
    def x(self) -> float:
        return self.pose[0]

    @property
    def y(self) -> float:
        return self.pose[1]

    @property
    def yaw(self) -> float:
        return self.pose[3]

    @property
    def center(self) -> np.ndarray:
        return np.array(self.pose[:3])

    @property
    def height(self) -> float:
        if self.shape is Shape.BOX:
            return self.dims[2]
        if self.shape is Shape.CYLINDER:
            return self.dims[1]
        return 2.0 * self.dims[0]

    @property
    def bounding_radius(self) -> float:
        """Radius of the smallest circle around the footprint."""
        if self.shape is Shape.BOX:
            return 0.5 * math.hypot(self.dims[0], self.dims[1])
        return self.dims[0]

    def moved(self, x: float, y: float, yaw: float | None = None) -> "ObjectSpec":
        return replace(self, pose=(x, y, self.pose[2], self.yaw if yaw is None else yaw))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "shape": self.shape.value,
            "dims": list(self.dims),
            "color": list(self.color),
            "pose": list(self.pose),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        return cls(str(d["id"]), Shape(d["shape"]), tuple(d["dims"]), tuple(d["color"]), tuple(d["pose"]))


@dataclass(frozen=True)
class CameraSpec:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    vertical_fov: float
    resolution: tuple[int, int] = DEFAULT_RESOLUTION  # width, height
    light_dir: tuple[float, float, float] = (0.3, -0.4, 1.0)  # toward the light

    def __post_init__(self):
        pos = _vec(self.position, 3, "camera position")
        look = _vec(self.look_at, 3, "camera look_at")
        if pos == look:
            raise InvalidInputError("camera position and look_at coincide")
        if not 0 < self.vertical_fov < math.pi:
            raise InvalidInputError(f"vertical_fov must be in (0, pi), got {self.vertical_fov}")
        w, h = (int(r) for r in self.resolution)
        if w < 1 or h < 1:
            raise InvalidInputError(f"resolution must be positive, got {self.resolution}")
        light = _vec(self.light_dir, 3, "light_dir")
        if not any(light):
            raise InvalidInputError("light_dir must be nonzero")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "look_at", look)
        object.__setattr__(self, "vertical_fov", float(self.vertical_fov))
        object.__setattr__(self, "resolution", (w, h))
        object.__setattr__(self, "light_dir", light)

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) unit vectors; world +z is up unless looking straight down/up."""
        f = np.subtract(self.look_at, self.position)
        f = f / np.linalg.norm(f)
        world_up = np.array([0.0, 0.0, 1.0])
        if abs(f[2]) > 1 - 1e-9:
            world_up = np.array([0.0, 1.0, 0.0])
        r = np.cross(f, world_up)
        r = r / np.linalg.norm(r)
        u = np.cross(r, f)
        return f, r, u

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "look_at": list(self.look_at),
            "vertical_fov": self.vertical_fov,
            "resolution": list(self.resolution),
            "light_dir": list(self.light_dir),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(
            tuple(d["position"]),
            tuple(d["look_at"]),
            float(d["vertical_fov"]),
            tuple(d.get("resolution", DEFAULT_RESOLUTION)),
            tuple(d.get("light_dir", (0.3, -0.4, 1.0))),
        )


@functools.lru_cache(maxsize=16)
def _ray_directions(cam: CameraSpec) -> np.ndarray:
    f, r, u = cam.basis()
    w, h = cam.resolution
    tan_half = math.tan(cam.vertical_fov / 2.0)
    # integer numerators keep pixel offsets exactly antisymmetric about the center
    sx = (2.0 * np.arange(w) + 1.0 - w) / w * (tan_half * w / h)
    sy = (h - (2.0 * np.arange(h) + 1.0)) / h * tan_half
    d = f[None, None, :] + sx[None, :, None] * r[None, None, :] + sy[:, None, None] * u[None, None, :]
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    d.flags.writeable = False
    return d


@dataclass(frozen=True)
class SceneSpec:
    table_extent: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax
    objects: tuple[ObjectSpec, ...]
    target_id: str
    robot_cam: CameraSpec
    top_cam: CameraSpec
    background_color: tuple[float, float, float] = (0.80, 0.82, 0.85)
    table_color: tuple[float, float, float] = (0.55, 0.42, 0.30)
    # task objects other than the target (e.g. the plate in a put task); not distractors
    anchor_ids: tuple[str, ...] = ()

    def __post_init__(self):
        ext = _vec(self.table_extent, 4, "table_extent")
        if not (ext[0] < ext[1] and ext[2] < ext[3]):
            raise InvalidInputError(f"table_extent must be (xmin, xmax, ymin, ymax), got {ext}")
        object.__setattr__(self, "table_extent", ext)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "anchor_ids", tuple(self.anchor_ids))
        object.__setattr__(self, "background_color", _color(self.background_color, "background_color"))
        object.__setattr__(self, "table_color", _color(self.table_color, "table_color"))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"object ids must be unique: {ids}")
        if self.target_id not in ids:
            raise InvalidInputError(f"target {self.target_id!r} is not among the objects")
        for a in self.anchor_ids:
            if a not in ids or a == self.target_id:
                raise InvalidInputError(f"anchor {a!r} must be a non-target object of the scene")
        for o in self.objects:
            if not footprint_inside(o, ext):
                raise InvalidInputError(f"object {o.id!r} footprint leaves the table")

    def object(self, object_id: str) -> ObjectSpec:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise InvalidInputError(f"no object {object_id!r} in scene")

    @property
    def target(self) -> ObjectSpec:
        return self.object(self.target_id)

    @property
    def task_ids(self) -> tuple[str, ...]:
        return (self.target_id,) + self.anchor_ids

    @property
    def distractors(self) -> tuple[ObjectSpec, ...]:
        task = set(self.task_ids)
        return tuple(o for o in self.objects if o.id not in task)

    def with_objects(self, objects: Iterable[ObjectSpec]) -> "SceneSpec":
        return replace(self, objects=tuple(objects))

    def only(self, keep: Iterable[str]) -> "SceneSpec":
        keep = set(keep) | {self.target_id}
        objs = tuple(o for o in self.objects if o.id in keep)
        return replace(self, objects=objs, anchor_ids=tuple(a for a in self.anchor_ids if a in keep))

    def without(self, drop: Iterable[str]) -> "SceneSpec":
        drop = set(drop)
        return self.only(o.id for o in self.objects if o.id not in drop)

    def to_dict(self) -> dict:
        return {
            "table_extent": list(self.table_extent),
            "table_color": list(self.table_color),
            "background_color": list(self.background_color),
            "target_id": self.target_id,
            "anchor_ids": list(self.anchor_ids),
            "objects": [o.to_dict() for o in self.objects],
            "robot_cam": self.robot_cam.to_dict(),
            "top_cam": self.top_cam.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            table_extent=tuple(d["table_extent"]),
            objects=tuple(ObjectSpec.from_dict(o) for o in d["objects"]),
            target_id=str(d["target_id"]),
            robot_cam=CameraSpec.from_dict(d["robot_cam"]),
            top_cam=CameraSpec.from_dict(d["top_cam"]),
            background_color=tuple(d.get("background_color", (0.80, 0.82, 0.85))),
            table_color=tuple(d.get("table_color", (0.55, 0.42, 0.30))),
            anchor_ids=tuple(d.get("anchor_ids", ())),
        )


def save_scene(scene: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_scene(path) -> SceneSpec:
    return SceneSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class RenderOutput:
    color: Image
    depth: np.ndarray  # ray distance in meters, inf where nothing is hit
    labels: np.ndarray  # object index, LABEL_TABLE or LABEL_NONE
    ids: tuple[str, ...] = field(default=())

    def object_id(self, row: int, col: int) -> str | None:
        """Id at a pixel: an object id, TABLE_ID for the table, or None for background."""
        lab = int(self.labels[row, col])
        if lab == LABEL_NONE:
            return None
        if lab == LABEL_TABLE:
            return TABLE_ID
        return self.ids[lab]

    def mask(self, object_id: str) -> np.ndarray:
        if object_id == TABLE_ID:
            return self.labels == LABEL_TABLE
        if object_id not in self.ids:
            return np.zeros(self.labels.shape, dtype=bool)
        return self.labels == self.ids.index(object_id)

    def pixel_count(self, object_id: str) -> int:
        return int(np.count_nonzero(self.mask(object_id)))


# --- ray / primitive intersection -------------------------------------------
# Each returns (t, normal) for rays o + t*d; t = inf where the primitive is missed.


def _hit_sphere(o, d, obj):
    c = obj.center
    r = obj.dims[0]
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > _EPS), t, np.inf)
    p = o + t[:, None] * d
    n = (p - c) / r
    return t, n


def _hit_cylinder(o, d, obj):
    r, h = obj.dims
    cx, cy = obj.x, obj.y
    ox, oy, oz = o[0] - cx, o[1] - cy, o[2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - r * r
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_side = (-b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(a > 0, a, 1.0)
    z = oz + t_side * dz
    t_side = np.where(ok & (t_side > _EPS) & (z >= 0) & (z <= h), t_side, np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (h - oz) / dz
    px = ox + t_cap * dx
    py = oy + t_cap * dy
    t_cap = np.where((dz != 0) & (t_cap > _EPS) & (px * px + py * py <= r * r), t_cap, np.inf)

    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    n = np.zeros_like(d)
    side_p = o + t_side[:, None] * d
    n[:, 0] = (side_p[:, 0] - cx) / r
    n[:, 1] = (side_p[:, 1] - cy) / r
    n[use_cap] = (0.0, 0.0, 1.0)
    return t, n


def _hit_box(o, d, obj):
    w, dep, h = obj.dims
    half = np.array([w / 2, dep / 2, h / 2])
    cos_y, sin_y = math.cos(obj.yaw), math.sin(obj.yaw)
    # world -> box frame is a rotation by -yaw about z
    rel = o - obj.center
    ol = np.array([cos_y * rel[0] + sin_y * rel[1], -sin_y * rel[0] + cos_y * rel[1], rel[2]])
    dl = np.stack([cos_y * d[:, 0] + sin_y * d[:, 1], -sin_y * d[:, 0] + cos_y * d[:, 1], d[:, 2]], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > _EPS)
    t = np.where(hit, t_near, np.inf)
    nl = np.zeros_like(d)
    rows = np.arange(len(d))
    nl[rows, axis] = -np.sign(dl[rows, axis])
    n = np.stack([cos_y * nl[:, 0] - sin_y * nl[:, 1], sin_y * nl[:, 0] + cos_y * nl[:, 1], nl[:, 2]], axis=1)
    return t, n


_HIT = {Shape.SPHERE: _hit_sphere, Shape.CYLINDER: _hit_cylinder, Shape.BOX: _hit_box}


def _hit_table(o, d, extent):
    xmin, xmax, ymin, ymax = extent
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[2] / d[:, 2]
    px = o[0] + t * d[:, 0]
    py = o[1] + t * d[:, 1]
    ok = (d[:, 2] < 0) & (t > _EPS) & (px >= xmin) & (px <= xmax) & (py >= ymin) & (py <= ymax)
    return np.where(ok, t, np.inf)


def _raycast(scene: SceneSpec, cam: CameraSpec, objects=None):
    """Nearest-hit depth, labels and normals for every pixel (flattened)."""
    objects = scene.objects if objects is None else objects
    dirs = _ray_directions(cam).reshape(-1, 3)
    o = np.asarray(cam.position, dtype=np.float64)
    n_pix = len(dirs)
    depth = _hit_table(o, dirs, scene.table_extent)
    labels = np.where(np.isfinite(depth), LABEL_TABLE, LABEL_NONE)
    normals = np.zeros((n_pix, 3))
    normals[:, 2] = 1.0
    for k, obj in enumerate(objects):
        # cull to rays passing within the object's bounding sphere
        oc = obj.center - o
        along = dirs @ oc
        radius = math.hypot(obj.bounding_radius, obj.height / 2.0) + 1e-6
        cand = np.flatnonzero(((oc @ oc) - along * along <= radius * radius) & (along > -radius))
        if cand.size == 0:
            continue
        t, nrm = _HIT[obj.shape](o, dirs[cand], obj)
        closer = t < depth[cand]
        if closer.any():
            idx = cand[closer]
            depth[idx] = t[closer]
            labels[idx] = k
            normals[idx] = nrm[closer]
    return depth, labels, normals


def render(scene: SceneSpec, cam: CameraSpec) -> RenderOutput:
    """Ray-cast the scene from ``cam`` with Lambert shading and an ambient floor."""
    depth, labels, normals = _raycast(scene, cam)
    w, h = cam.resolution
    palette = np.array([o.color for o in scene.objects] + [scene.table_color, scene.background_color])
    # labels -1 (none) and -2 (table) index the last two palette rows
    base = palette[np.where(labels >= 0, labels, len(palette) + labels)]
    light = np.asarray(cam.light_dir)
    lambert = np.clip(normals @ (light / np.linalg.norm(light)), 0.0, 1.0)
    shade = AMBIENT + (1.0 - AMBIENT) * lambert
    shade = np.where(labels == LABEL_NONE, 1.0, shade)
    rgb = np.clip(base * shade[:, None], 0.0, 1.0)
    color = Image(rgb.reshape(h, w, 3).transpose(2, 0, 1), ColorSpace.SRGB)
    depth = depth.reshape(h, w)
    depth.flags.writeable = False
    labels = labels.reshape(h, w).astype(np.int32)
    labels.flags.writeable = False
    return RenderOutput(color, depth, labels, tuple(o.id for o in scene.objects))


def render_labels(scene: SceneSpec, cam: CameraSpec, objects=None) -> np.ndarray:
    """Label buffer only (no shading); ``objects`` defaults to the scene's objects."""
    _, labels, _ = _raycast(scene, cam, objects)
    return labels


def save_render(out: RenderOutput, path) -> None:
    write_ppm(path, out.color)


# --- geometric predicates ----------------------------------------------------


def footprint_inside(obj: ObjectSpec, extent) -> bool:
    xmin, xmax, ymin, ymax = extent
    r = obj.bounding_radius
    tol = 1e-12
    return obj.x - r >= xmin - tol and obj.x + r <= xmax + tol and obj.y - r >= ymin - tol and obj.y + r <= ymax + tol


def footprint_gap(a: ObjectSpec, b: ObjectSpec) -> float:
    """Clearance between the bounding circles of two footprints (negative on overlap)."""
    return math.hypot(a.x - b.x, a.y - b.y) - (a.bounding_radius + b.bounding_radius)


def occlusion_ratio(scene: SceneSpec, cam: CameraSpec, target_id: str | None = None) -> float:
    """Fraction of the target's isolated projection hidden by other objects."""
    target_id = scene.target_id if target_id is None else target_id
    scene.object(target_id)
    idx = [o.id for o in scene.objects].index(target_id)
    isolated = np.count_nonzero(render_labels(scene, cam, (scene.objects[idx],)) == 0)
    if isolated == 0:
        raise DegenerateSceneError(f"target {target_id!r} is not visible from the camera even in isolation")
    visible = np.count_nonzero(render_labels(scene, cam) == idx)
    return 1.0 - visible / isolated


def has_grasp_affordance(scene: SceneSpec, target_id: str | None = None, clearance: float = 0.04) -> bool:
    """True iff the clearance cylinder around the target touches no other object.

    The cylinder has radius (target bounding radius + clearance) and spans from
    the table to ``clearance`` above the target top.  Other objects are
    approximated by their vertical bounding cylinders; tangency is not an
    intersection.
    """
    target = scene.object(scene.target_id if target_id is None else target_id)
    radius = target.bounding_radius + clearance
    # Both the clearance cylinder and every object start at the table, so their
    # vertical extents always overlap and only the horizontal test remains.
    for other in scene.objects:
        if other.id == target.id:
            continue
        d = math.hypot(other.x - target.x, other.y - target.y)
        if d < radius + other.bounding_radius - _TOUCH_TOL:
            return False
    return True
