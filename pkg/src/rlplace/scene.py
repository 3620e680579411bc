"""Synthetic intersection scenarios: occluders, candidate mounts, scripted traffic.

A scenario is a cross intersection centred in a rectangular extent. Each arm
carries one inbound and one outbound lane (right-hand traffic). Vehicles are
kinematic boxes driving straight or turning at constant speed and wrap around
their route so every frame holds the same vehicle count; they may overlap.
Buildings (occluders) stand on a jittered lattice of lots in the four
quadrants and never touch the road band. Candidate
LiDAR mounts sit on poles spaced uniformly along a ring around the junction.

Everything is a pure function of ``(seed, params)``.
"""

import json
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .exceptions import ParameterError, ParseError, RLPlaceIOError, ValidationError, VersionError
from .geometry import bev_corners, clip_convex, polygon_area, wrap_angle

SCENARIO_VERSION = "rlplace.scenario/1"

# lane geometry, meters
LANE_OFFSET = 2.0
TURN_CORNER = 8.0
ROAD_CLEARANCE = 12.0
ARM_MARGIN = 4.0
VEHICLE_CLEARANCE = 0.25
LOT_SIZE = 22.0


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValidationError(f"non-finite Vec3 {self}")

    def as_array(self):
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class Pose:
    """Position plus heading about +z. ``name`` tags the coordinate frame it defines."""

    position: Vec3
    yaw: float
    name: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))


@dataclass(frozen=True)
class OrientedBox:
    center: Vec3
    half_extents: Vec3
    yaw: float

    def __post_init__(self):
        h = self.half_extents
        if not (h.x > 0 and h.y > 0 and h.z > 0):
            raise ValidationError(f"half extents must be positive, got {h}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def corners_bev(self):
        return bev_corners(self.center.x, self.center.y, self.half_extents.x,
                           self.half_extents.y, self.yaw)

    def translated(self, dx, dy, dz=0.0):
        c = self.center
        return OrientedBox(Vec3(c.x + dx, c.y + dy, c.z + dz), self.half_extents, self.yaw)


@dataclass(frozen=True)
class CandidateMount:
    id: int
    pose: Pose

    @property
    def frame_name(self):
        return f"mount:{self.id}"


@dataclass(frozen=True)
class Vehicle:
    vehicle_id: int
    box: OrientedBox


@dataclass(frozen=True)
class TrafficFrame:
    index: int
    vehicles: tuple


@dataclass(frozen=True)
class GridSpec:
    """Regular BEV grid. Cell (i, j) spans x0 + j*cell .. x0 + (j+1)*cell, rows along y."""

    x0: float
    y0: float
    cell_size: float
    height: int
    width: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValidationError("cell_size must be positive")
        if self.height <= 0 or self.width <= 0:
            raise ValidationError("grid must have at least one cell")

    @property
    def shape(self):
        return (self.height, self.width)

    def world_to_cell(self, x, y):
        """Cell index containing (x, y), or ``None`` when outside the grid."""
        j = math.floor((x - self.x0) / self.cell_size)
        i = math.floor((y - self.y0) / self.cell_size)
        if 0 <= i < self.height and 0 <= j < self.width:
            return (i, j)
        return None

    def cells_of(self, xy):
        """Vectorised ``world_to_cell``; returns (i, j) int arrays, -1 where outside."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        j = np.floor((xy[:, 0] - self.x0) / self.cell_size)
        i = np.floor((xy[:, 1] - self.y0) / self.cell_size)
        inside = (i >= 0) & (i < self.height) & (j >= 0) & (j < self.width)
        i = np.where(inside, i, -1).astype(np.int64)
        j = np.where(inside, j, -1).astype(np.int64)
        return i, j

    def cell_center(self, i, j):
        return (self.x0 + (j + 0.5) * self.cell_size, self.y0 + (i + 0.5) * self.cell_size)

    def cell_polygon(self, i, j):
        x = self.x0 + j * self.cell_size
        y = self.y0 + i * self.cell_size
        c = self.cell_size
        return [(x, y), (x + c, y), (x + c, y + c), (x, y + c)]

    def covers(self, extent):
        x_min, x_max, y_min, y_max = extent
        return (self.x0 <= x_min and self.y0 <= y_min
                and self.x0 + self.width * self.cell_size >= x_max
                and self.y0 + self.height * self.cell_size >= y_max)


@dataclass(frozen=True)
class Scenario:
    seed: int
    extent: tuple
    occluders: tuple
    mounts: tuple
    frames: tuple
    grid: GridSpec

    @property
    def n_mounts(self):
        return len(self.mounts)

    @property
    def mount_ids(self):
        return [m.id for m in self.mounts]

    def mount(self, mount_id):
        for m in self.mounts:
            if m.id == mount_id:
                return m
        raise ParameterError(f"mount {mount_id} not in scenario")

    def frame(self, index):
        if not 0 <= index < len(self.frames):
            raise ParameterError(f"frame index {index} out of range [0, {len(self.frames)})")
        return self.frames[index]


@dataclass(frozen=True)
class SceneParams:
    n_mounts: int = 15
    n_vehicles: int = 10
    n_frames: int = 20
    extent: tuple = (-80.0, 80.0, -80.0, 80.0)
    occluder_count: int = 32
    mast_height: float = 5.0
    cell_size: float = 2.0
    frame_dt: float = 0.5
    mount_ring: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    def to_dict(self):
        return {f.name: (list(getattr(self, f.name)) if f.name == "extent" else getattr(self, f.name))
                for f in fields(self)}


def _check_extent(extent):
    if len(extent) != 4:
        raise ParameterError("extent must be (x_min, x_max, y_min, y_max)")
    x_min, x_max, y_min, y_max = extent
    if not all(math.isfinite(v) for v in extent) or not (x_max > x_min and y_max > y_min):
        raise ParameterError(f"degenerate or inverted extent {extent}")


def build_roi_grid(extent, cell_size):
    """Grid anchored at (x_min, y_min) covering ``extent`` with square cells."""
    _check_extent(extent)
    if not (cell_size > 0 and math.isfinite(cell_size)):
        raise ParameterError(f"cell_size must be positive, got {cell_size}")
    x_min, x_max, y_min, y_max = extent
    height = math.ceil((y_max - y_min) / cell_size)
    width = math.ceil((x_max - x_min) / cell_size)
    return GridSpec(float(x_min), float(y_min), float(cell_size), int(height), int(width))


# -- procedural generation ---------------------------------------------------

def _route_polyline(arm_length, turn, step=0.25):
    """Route entering from the south arm heading north, in junction coordinates."""
    o, c, L = LANE_OFFSET, TURN_CORNER, arm_length
    entry = np.column_stack([np.full(2, o), [-L, -c]])
    if turn == "straight":
        return np.array([[o, -L], [o, L]])
    if turn == "right":
        center, radius, a0, a1 = np.array([c, -c]), c - o, math.pi, math.pi / 2
        tail = np.array([[c, -o], [L, -o]])
    else:
        center, radius, a0, a1 = np.array([-c, -c]), c + o, 0.0, math.pi / 2
        tail = np.array([[-c, o], [-L, o]])
    n = max(8, int(abs(a1 - a0) * radius / step))
    ang = np.linspace(a0, a1, n)
    arc = center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return np.vstack([entry, arc[1:-1], tail])


def _rotate2(points, angle):
    c, s = math.cos(angle), math.sin(angle)
    return points @ np.array([[c, -s], [s, c]]).T


class _Route:
    def __init__(self, arm, turn, arm_length):
        pts = _rotate2(_route_polyline(arm_length, turn), arm * math.pi / 2)
        seg = np.diff(pts, axis=0)
        seglen = np.hypot(seg[:, 0], seg[:, 1])
        keep = seglen > 1e-9
        self.points = np.vstack([pts[:1], pts[1:][keep]])
        seg = seg[keep]
        self.cum = np.concatenate([[0.0], np.cumsum(seglen[keep])])
        self.heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.length = float(self.cum[-1])

    def at(self, s):
        s = s % self.length
        k = int(np.searchsorted(self.cum, s, side="right") - 1)
        k = min(max(k, 0), len(self.heading) - 1)
        t = (s - self.cum[k]) / (self.cum[k + 1] - self.cum[k])
        p = self.points[k] + t * (self.points[k + 1] - self.points[k])
        return float(p[0]), float(p[1]), float(self.heading[k])


def _ring_positions(n, half_x, half_y, phase):
    """``n`` points spaced uniformly along a rectangle's perimeter, starting at ``phase``."""
    perim = 4.0 * (half_x + half_y)
    out = []
    for k in range(n):
        s = (phase + k / n) * perim % perim
        if s < 2 * half_x:
            out.append((-half_x + s, -half_y))
            continue
        s -= 2 * half_x
        if s < 2 * half_y:
            out.append((half_x, -half_y + s))
            continue
        s -= 2 * half_y
        if s < 2 * half_x:
            out.append((half_x - s, half_y))
            continue
        s -= 2 * half_x
        out.append((-half_x, half_y - s))
    return out


def _push_off_road(x, y):
    """Move a pole that would stand on the carriageway to the kerb."""
    kerb = LANE_OFFSET + 3.0
    if abs(x) < kerb:
        x = math.copysign(kerb, x if x != 0 else 1.0)
    if abs(y) < kerb:
        y = math.copysign(kerb, y if y != 0 else 1.0)
    return x, y


def _occluder_ok(box, cx0, cy0, extent, placed, mounts_xy):
    corners = box.corners_bev()
    rel = corners - np.array([cx0, cy0])
    if np.any(np.abs(rel) < ROAD_CLEARANCE):
        return False
    if not (np.all(np.sign(rel[:, 0]) == np.sign(rel[0, 0]))
            and np.all(np.sign(rel[:, 1]) == np.sign(rel[0, 1]))):
        return False
    x_min, x_max, y_min, y_max = extent
    if (corners[:, 0].min() < x_min or corners[:, 0].max() > x_max
            or corners[:, 1].min() < y_min or corners[:, 1].max() > y_max):
        return False
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    for mx, my in mounts_xy:
        dx, dy = mx - box.center.x, my - box.center.y
        u, v = c * dx + s * dy, -s * dx + c * dy
        if abs(u) < box.half_extents.x + 2.0 and abs(v) < box.half_extents.y + 2.0:
            return False
    for other in placed:
        if polygon_area(clip_convex(corners, other.corners_bev())) > 0.0:
            return False
    return True


def _place_occluders(rng, params, cx0, cy0, half_x, half_y, mounts_xy):
    """Buildings on a jittered lattice of lots filling the four quadrants.

    Lots are ``LOT_SIZE`` squares between the road band and the extent edge;
    ``occluder_count`` lots are drawn without replacement. A lot whose
    building would touch the road band, the extent or a pole is redrawn.
    """
    lots = []
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            nx = int((half_x - ROAD_CLEARANCE) // LOT_SIZE)
            ny = int((half_y - ROAD_CLEARANCE) // LOT_SIZE)
            for a in range(nx):
                for b in range(ny):
                    lots.append((sx, sy, ROAD_CLEARANCE + (a + 0.5) * LOT_SIZE,
                                 ROAD_CLEARANCE + (b + 0.5) * LOT_SIZE))
    order = rng.permutation(len(lots))
    occluders = []
    for k in order:
        if len(occluders) == params.occluder_count:
            break
        sx, sy, ux, uy = lots[k]
        for _ in range(20):
            hx = rng.uniform(0.25, 0.45) * LOT_SIZE
            hy = rng.uniform(0.25, 0.45) * LOT_SIZE
            hz = rng.uniform(2.0, 7.5)
            jx, jy = rng.uniform(-0.05, 0.05, size=2) * LOT_SIZE
            yaw = rng.uniform(-0.2, 0.2)
            box = OrientedBox(Vec3(float(cx0 + sx * (ux + jx)), float(cy0 + sy * (uy + jy)), float(hz)),
                              Vec3(float(hx), float(hy), float(hz)), float(yaw))
            if _occluder_ok(box, cx0, cy0, params.extent, occluders, mounts_xy):
                occluders.append(box)
                break
    if len(occluders) < params.occluder_count:
        raise ParameterError(f"only {len(occluders)} of {params.occluder_count} occluders fit the extent")
    return occluders


def generate_scene(seed, params=None, **overrides):
    """Build a scenario deterministically from ``seed`` and ``params``.

    Keyword overrides are merged into ``params`` (a :class:`SceneParams`).
    """
    params = params or SceneParams()
    if overrides:
        params = SceneParams(**{**params.to_dict(), **overrides})
    _check_extent(params.extent)
    for name in ("n_mounts", "n_frames"):
        if int(getattr(params, name)) < 1:
            raise ParameterError(f"{name} must be >= 1")
    if params.n_vehicles < 0 or params.occluder_count < 0:
        raise ParameterError("counts must be non-negative")
    if not params.mast_height > 0:
        raise ParameterError("mast_height must be positive")
    if not 0 < params.mount_ring <= 1:
        raise ParameterError("mount_ring must be in (0, 1]")

    x_min, x_max, y_min, y_max = params.extent
    cx0, cy0 = (x_min + x_max) / 2, (y_min + y_max) / 2
    half_x, half_y = (x_max - x_min) / 2, (y_max - y_min) / 2
    arm_length = min(half_x, half_y) - ARM_MARGIN
    if arm_length <= TURN_CORNER + 1.0:
        raise ParameterError("extent too small for an intersection")

    rng = np.random.default_rng(np.uint64(seed % 2**64))

    phase = float(rng.uniform(0.0, 1.0))
    ring = _ring_positions(params.n_mounts, params.mount_ring * half_x,
                           params.mount_ring * half_y, phase)
    mounts = []
    mounts_xy = []
    for k, (rx, ry) in enumerate(ring):
        rx, ry = _push_off_road(rx, ry)
        x, y = cx0 + rx, cy0 + ry
        yaw = math.atan2(cy0 - y, cx0 - x)
        pose = Pose(Vec3(x, y, float(params.mast_height)), yaw, name=f"mount:{k}")
        mounts.append(CandidateMount(k, pose))
        mounts_xy.append((x, y))

    occluders = _place_occluders(rng, params, cx0, cy0, half_x, half_y, mounts_xy)

    routes = {}
    plans = []
    for vid in range(params.n_vehicles):
        arm = int(rng.integers(0, 4))
        turn = ("straight", "left", "right")[int(rng.integers(0, 3))]
        route = routes.setdefault((arm, turn), _Route(arm, turn, arm_length))
        speed = float(rng.uniform(6.0, 12.0))
        start = float(rng.uniform(0.0, route.length))
        size = Vec3(float(rng.uniform(2.0, 2.5)), float(rng.uniform(0.85, 1.0)),
                    float(rng.uniform(0.7, 0.85)))
        plans.append((vid, route, speed, start, size))

    frames = []
    for f in range(params.n_frames):
        t = f * params.frame_dt
        vehicles = []
        for vid, route, speed, start, size in plans:
            x, y, heading = route.at(start + speed * t)
            center = Vec3(cx0 + x, cy0 + y, VEHICLE_CLEARANCE + size.z)
            vehicles.append(Vehicle(vid, OrientedBox(center, size, heading)))
        frames.append(TrafficFrame(f, tuple(vehicles)))

    grid = build_roi_grid(params.extent, params.cell_size)
    return Scenario(int(seed), tuple(params.extent), tuple(occluders), tuple(mounts),
                    tuple(frames), grid)


# -- serialization -----------------------------------------------------------

def _vec(v):
    return [v.x, v.y, v.z]


def _box_dict(b):
    return {"center": _vec(b.center), "half_extents": _vec(b.half_extents), "yaw": b.yaw}


def scenario_to_dict(s):
    return {
        "version": SCENARIO_VERSION,
        "seed": s.seed,
        "extent": list(s.extent),
        "occluders": [_box_dict(b) for b in s.occluders],
        "mounts": [{"id": m.id, "position": _vec(m.pose.position), "yaw": m.pose.yaw}
                   for m in s.mounts],
        "frames": [{"index": fr.index,
                    "vehicles": [{"vehicle_id": v.vehicle_id, "box": _box_dict(v.box)}
                                 for v in fr.vehicles]}
                   for fr in s.frames],
        "grid": {"origin": [s.grid.x0, s.grid.y0], "cell_size": s.grid.cell_size,
                 "height": s.grid.height, "width": s.grid.width},
    }


def dumps_scenario(s):
    return json.dumps(scenario_to_dict(s), sort_keys=True, indent=1) + "\n"


def _as_vec(seq):
    if len(seq) != 3:
        raise ValidationError(f"expected 3 components, got {seq!r}")
    return Vec3(float(seq[0]), float(seq[1]), float(seq[2]))


def _as_box(d):
    return OrientedBox(_as_vec(d["center"]), _as_vec(d["half_extents"]), float(d["yaw"]))


def validate_scenario(s):
    """Check every Scenario invariant; raise :class:`ValidationError` on the first breach."""
    try:
        _check_extent(s.extent)
    except ParameterError as exc:
        raise ValidationError(str(exc)) from None
    if not s.mounts:
        raise ValidationError("scenario needs at least one mount")
    if not s.frames:
        raise ValidationError("scenario needs at least one frame")
    ids = [m.id for m in s.mounts]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate mount ids {ids}")
    if sorted(ids) != list(range(len(ids))):
        raise ValidationError(f"mount ids must be 0..N-1 without gaps, got {ids}")
    for m in s.mounts:
        if not m.pose.position.z > 0:
            raise ValidationError(f"mount {m.id} mast height must be positive")
    x_min, x_max, y_min, y_max = s.extent
    tol = 1e-9
    for k, fr in enumerate(s.frames):
        if fr.index != k:
            raise ValidationError(f"frame {k} carries index {fr.index}")
        vids = [v.vehicle_id for v in fr.vehicles]
        if len(set(vids)) != len(vids):
            raise ValidationError(f"duplicate vehicle ids in frame {k}")
        for v in fr.vehicles:
            c = v.box.corners_bev()
            if (c[:, 0].min() < x_min - tol or c[:, 0].max() > x_max + tol
                    or c[:, 1].min() < y_min - tol or c[:, 1].max() > y_max + tol):
                raise ValidationError(f"vehicle {v.vehicle_id} in frame {k} leaves the extent")
    if not s.grid.covers(s.extent):
        raise ValidationError("grid does not cover the extent")
    return s


def scenario_from_dict(d):
    if not isinstance(d, dict):
        raise ParseError("scenario document must be a JSON object")
    version = d.get("version")
    if version != SCENARIO_VERSION:
        raise VersionError(f"unknown scenario version {version!r}")
    try:
        g = d["grid"]
        grid = GridSpec(float(g["origin"][0]), float(g["origin"][1]), float(g["cell_size"]),
                        int(g["height"]), int(g["width"]))
        mounts = tuple(
            CandidateMount(int(m["id"]), Pose(_as_vec(m["position"]), float(m["yaw"]),
                                              name=f"mount:{int(m['id'])}"))
            for m in d["mounts"])
        frames = tuple(
            TrafficFrame(int(fr["index"]),
                         tuple(Vehicle(int(v["vehicle_id"]), _as_box(v["box"]))
                               for v in fr["vehicles"]))
            for fr in d["frames"])
        s = Scenario(int(d["seed"]), tuple(float(v) for v in d["extent"]),
                     tuple(_as_box(b) for b in d["occluders"]), mounts, frames, grid)
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed scenario field: {exc!r}") from None
    return validate_scenario(s)


def save_scenario(s, path):
    text = dumps_scenario(s)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise RLPlaceIOError(f"cannot write scenario to {path}: {exc}") from exc


def load_scenario(path):
    if not os.path.exists(path):
        raise RLPlaceIOError(f"no such scenario file: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"cannot parse {path}: {exc}") from None
    except OSError as exc:
        raise RLPlaceIOError(str(exc)) from exc
    return scenario_from_dict(doc)
