"""Deterministic ray-cast LiDAR simulation and point-cloud plumbing.

Points carry an integer label: ``STATIC`` (-1) for ground and occluder
returns, otherwise the id of the vehicle that produced the return. Clouds are
tagged with the name of the coordinate frame they are expressed in.
"""

import csv
import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import FrameError, ParameterError, ParseError, RLPlaceIOError, VersionError
from .geometry import rotation_z
from .scene import Pose, Vec3

STATIC = -1
GROUND = 0
NO_HIT = -1

CLOUD_MAGIC = b"RLPC"
CLOUD_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "<i4")])

WORLD = Pose(Vec3(0.0, 0.0, 0.0), 0.0, name="world")


def worker_count():
    """Thread cap from ``RLP_THREADS`` (default: CPU count)."""
    raw = os.environ.get("RLP_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ParameterError(f"RLP_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class LidarSpec:
    """Spinning LiDAR model. Defaults give 32 x 800 = 25,600 rays per sweep."""

    channels: int = 32
    vertical_fov: tuple = (-30.0, 10.0)
    azimuth_step: float = 0.45
    max_range: float = 100.0
    rotation_hz: float = 20.0
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        lo, hi = self.vertical_fov
        if self.channels <= 0:
            raise ParameterError("channels must be positive")
        if not lo < hi:
            raise ParameterError("vertical_fov min must be below max")
        if not self.azimuth_step > 0:
            raise ParameterError("azimuth_step must be positive")
        if not self.max_range > 0:
            raise ParameterError("max_range must be positive")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be non-negative")

    @property
    def n_azimuth(self):
        return int(round(360.0 / self.azimuth_step))

    @property
    def rays_per_frame(self):
        return self.channels * self.n_azimuth

    def directions(self):
        """Unit ray directions in the sensor frame, channel-major, shape (R, 3)."""
        elev = np.radians(np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.channels))
        az = np.radians(np.arange(self.n_azimuth) * self.azimuth_step)
        ce, se = np.cos(elev)[:, None], np.sin(elev)[:, None]
        d = np.stack([ce * np.cos(az)[None, :], ce * np.sin(az)[None, :],
                      np.broadcast_to(se, (self.channels, az.size))], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class PointCloud:
    frame_id: int
    frame_name: str
    xyz: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if xyz.shape[0] != labels.shape[0]:
            raise ParameterError("xyz and labels lengths differ")
        xyz.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def vehicle_counts(self):
        """Mapping vehicle id -> number of returns."""
        ids, counts = np.unique(self.labels[self.labels != STATIC], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def subset(self, mask):
        return PointCloud(self.frame_id, self.frame_name, self.xyz[mask], self.labels[mask])


@dataclass(frozen=True)
class RangeBox:
    l: float = 140.0
    w: float = 40.0
    h: float = 4.0
    center: Vec3 = Vec3(0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ParameterError("range box dimensions must be positive")


# -- ray casting -------------------------------------------------------------

def ray_box_distance(origins, dirs, box):
    """Slab-method entry distance along each ray into ``box``; ``inf`` on a miss.

    Rays starting inside the box, or hitting it behind the origin, count as misses.
    """
    origins = np.asarray(origins, dtype=float)
    dirs = np.asarray(dirs, dtype=float)
    rot = rotation_z(-box.yaw)
    o = (np.broadcast_to(origins, dirs.shape) - box.center.as_array()) @ rot.T
    d = dirs @ rot.T
    h = box.half_extents.as_array()
    tnear = np.full(d.shape[0], -np.inf)
    tfar = np.full(d.shape[0], np.inf)
    for k in range(3):
        dk, ok = d[:, k], o[:, k]
        flat = dk == 0.0
        safe = np.where(flat, 1.0, dk)
        t1 = (-h[k] - ok) / safe
        t2 = (h[k] - ok) / safe
        lo = np.where(flat, np.where(np.abs(ok) <= h[k], -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(flat, np.where(np.abs(ok) <= h[k], np.inf, -np.inf), np.maximum(t1, t2))
        tnear = np.maximum(tnear, lo)
        tfar = np.minimum(tfar, hi)
    hit = (tnear <= tfar) & (tnear > 0.0)
    return np.where(hit, tnear, np.inf)


def ray_ground_distance(origins, dirs):
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
    dz = dirs[:, 2]
    down = dz < 0.0
    t = np.where(down, -origins[:, 2] / np.where(down, dz, -1.0), np.inf)
    return np.where(t > 0.0, t, np.inf)


def _nearest(t_best, idx_best, t, idx):
    closer = t < t_best
    return np.where(closer, t, t_best), np.where(closer, idx, idx_best)


def cast_rays(origins, dirs, boxes, ground=True):
    """Nearest hit among the ground plane (index 0) and ``boxes`` (indices 1..).

    Ties go to the lower primitive index. Returns ``(t, primitive)`` with
    ``inf`` / ``NO_HIT`` for rays that hit nothing.
    """
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    t_best = np.full(dirs.shape[0], np.inf)
    idx_best = np.full(dirs.shape[0], NO_HIT, dtype=np.int64)
    if ground:
        t_best, idx_best = _nearest(t_best, idx_best, ray_ground_distance(origins, dirs), GROUND)
    for k, box in enumerate(boxes, start=1):
        t_best, idx_best = _nearest(t_best, idx_best, ray_box_distance(origins, dirs, box), k)
    return t_best, idx_best


def _static_hits(scenario, mount, world_dirs):
    origin = mount.pose.position.as_array()
    return cast_rays(origin, world_dirs, scenario.occluders)


def _finish_cast(scenario, frame, mount, spec, local_dirs, world_dirs, t_static, idx_static):
    origin = mount.pose.position.as_array()
    t, idx = t_static, idx_static
    base = 1 + len(scenario.occluders)
    for k, veh in enumerate(frame.vehicles):
        t, idx = _nearest(t, idx, ray_box_distance(origin, world_dirs, veh.box), base + k)
    keep = t <= spec.max_range
    t, idx, d = t[keep], idx[keep], local_dirs[keep]
    vehicle_ids = np.array([v.vehicle_id for v in frame.vehicles], dtype=np.int64)
    labels = np.full(t.shape[0], STATIC, dtype=np.int64)
    is_vehicle = idx >= base
    labels[is_vehicle] = vehicle_ids[idx[is_vehicle] - base]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(_noise_seed(spec.noise_seed, scenario.seed, frame.index, mount.id))
        t = t + rng.normal(0.0, spec.noise_sigma, size=t.shape)
    # sensor frame: the world direction rotated back by -yaw is the local direction
    return PointCloud(frame.index, mount.frame_name, d * t[:, None], labels)


def _noise_seed(*parts):
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def cast_frame(scenario, frame_index, mount, spec=None):
    """Simulate one sweep from ``mount`` in frame ``frame_index``; points in the mount frame."""
    spec = spec or LidarSpec()
    frame = scenario.frame(frame_index)
    if mount not in scenario.mounts:
        raise ParameterError(f"mount {mount.id} does not belong to the scenario")
    local = spec.directions()
    world = local @ rotation_z(mount.pose.yaw).T
    t_s, i_s = _static_hits(scenario, mount, world)
    return _finish_cast(scenario, frame, mount, spec, local, world, t_s, i_s)


class SweepCache:
    """Memoised ``cast_frame`` results for one scenario and sensor model.

    Static geometry is intersected once per mount; only vehicles are re-cast
    per frame. Results are bit-identical to :func:`cast_frame`, followed by
    :func:`crop_in_mount_frame` with ``crop`` (the default 140 x 40 x 4 m
    sensor-frame box; pass ``None`` to keep the full sweep).
    """

    def __init__(self, scenario, spec=None, crop="default"):
        self.scenario = scenario
        self.spec = spec or LidarSpec()
        self.crop = RangeBox() if crop == "default" else crop
        self._local = self.spec.directions()
        self._static = {}
        self._sweeps = {}

    def _static_for(self, mount):
        if mount.id not in self._static:
            world = self._local @ rotation_z(mount.pose.yaw).T
            t, idx = _static_hits(self.scenario, mount, world)
            self._static[mount.id] = (world, t, idx)
        return self._static[mount.id]

    def sweep(self, frame_index, mount_id):
        key = (frame_index, mount_id)
        if key not in self._sweeps:
            mount = self.scenario.mount(mount_id)
            frame = self.scenario.frame(frame_index)
            world, t, idx = self._static_for(mount)
            cloud = _finish_cast(self.scenario, frame, mount, self.spec,
                                 self._local, world, t, idx)
            if self.crop is not None:
                cloud = crop_in_mount_frame(cloud, mount, self.crop)
            self._sweeps[key] = cloud
        return self._sweeps[key]

    def warm(self, frame_indices, mount_ids):
        """Cast every (frame, mount) pair, spreading mounts over ``RLP_THREADS`` workers."""
        mount_ids = list(mount_ids)
        for mid in mount_ids:
            self._static_for(self.scenario.mount(mid))

        def run(mid):
            return [self.sweep(f, mid) for f in frame_indices]

        workers = min(worker_count(), max(1, len(mount_ids)))
        if workers == 1:
            for mid in mount_ids:
                run(mid)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run, mount_ids))


# -- frames and fusion -------------------------------------------------------

def transform_cloud(cloud, from_pose, to_pose):
    """Re-express ``cloud`` (in ``from_pose``'s frame) in ``to_pose``'s frame."""
    if cloud.frame_name != from_pose.name:
        raise FrameError(f"cloud is in frame {cloud.frame_name!r}, not {from_pose.name!r}")
    rot = rotation_z(from_pose.yaw - to_pose.yaw)
    shift = rotation_z(-to_pose.yaw) @ (from_pose.position.as_array() - to_pose.position.as_array())
    xyz = cloud.xyz @ rot.T + shift
    return PointCloud(cloud.frame_id, to_pose.name, xyz, cloud.labels)


def fuse_clouds(clouds):
    """Concatenate clouds that share frame name and frame id (no de-duplication)."""
    clouds = list(clouds)
    if not clouds:
        raise ParameterError("cannot fuse an empty list of clouds")
    head = clouds[0]
    for c in clouds[1:]:
        if c.frame_name != head.frame_name or c.frame_id != head.frame_id:
            raise FrameError("clouds to fuse must share frame_name and frame_id")
    if len(clouds) == 1:
        return head
    return PointCloud(head.frame_id, head.frame_name,
                      np.concatenate([c.xyz for c in clouds]),
                      np.concatenate([c.labels for c in clouds]))


def strip_vehicle_points(cloud):
    """x-hat: the cloud without vehicle returns, static points in original order."""
    return cloud.subset(cloud.labels == STATIC)


def points_in_footprint(xyz, box):
    """Mask of points whose BEV position falls inside ``box``'s footprint."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.center.x
    dy = xyz[:, 1] - box.center.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.half_extents.x) & (np.abs(v) <= box.half_extents.y)


def selective_fusion(target, others, target_boxes):
    """Vehicle-free cloud that refills vehicle footprints from other frames.

    ``target`` and each cloud in ``others`` must share one coordinate frame,
    and ``target_boxes`` (the target frame's vehicles) must be expressed in it.
    Static points from ``others`` are added only where they fall inside a
    target vehicle's footprint, i.e. ground the vehicle hid in ``target``.
    """
    base = strip_vehicle_points(target)
    extra_xyz, extra_labels = [], []
    for other in others:
        if other.frame_name != target.frame_name:
            raise FrameError("selective fusion needs clouds in one frame")
        st = strip_vehicle_points(other)
        mask = np.zeros(len(st), dtype=bool)
        for box in target_boxes:
            mask |= points_in_footprint(st.xyz, box)
        extra_xyz.append(st.xyz[mask])
        extra_labels.append(st.labels[mask])
    if not extra_xyz:
        return base
    return PointCloud(base.frame_id, base.frame_name,
                      np.concatenate([base.xyz] + extra_xyz),
                      np.concatenate([base.labels] + extra_labels))


def crop_to_range(cloud, box=None):
    """Keep points inside the closed range box; z is measured up from the box base."""
    box = box or RangeBox()
    c = box.center
    rel = cloud.xyz - np.array([c.x, c.y, c.z])
    keep = ((np.abs(rel[:, 0]) <= box.l / 2) & (np.abs(rel[:, 1]) <= box.w / 2)
            & (rel[:, 2] >= 0.0) & (rel[:, 2] <= box.h))
    return cloud.subset(keep)


def crop_in_mount_frame(cloud, mount, box=None):
    """Apply a per-LiDAR range box in the sensor frame, its base at ground level.

    The box centre's x/y are offsets in the sensor frame; its z is measured
    from the ground below the mast.
    """
    box = box or RangeBox()
    c = box.center
    return crop_to_range(cloud, RangeBox(box.l, box.w, box.h,
                                         Vec3(c.x, c.y, c.z - mount.pose.position.z)))


# -- file formats ------------------------------------------------------------

def write_cloud(path, cloud):
    """Little-endian RLPC binary: header then (f32 x, f32 y, f32 z, i32 label) records."""
    rec = np.empty(len(cloud), dtype=_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["label"] = cloud.labels
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CLOUD_MAGIC, CLOUD_VERSION, len(cloud), cloud.frame_id))
            fh.write(rec.tobytes())
    except OSError as exc:
        raise RLPlaceIOError(f"cannot write point cloud {path}: {exc}") from exc


def read_cloud(path, frame_name="unknown"):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise RLPlaceIOError(f"cannot read point cloud {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise ParseError("point cloud file shorter than its header")
    magic, version, count, frame_id = _HEADER.unpack_from(blob)
    if magic != CLOUD_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != CLOUD_VERSION:
        raise VersionError(f"unsupported point cloud version {version}")
    body = blob[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise ParseError(f"expected {count} records, found {len(body) / _RECORD.itemsize:g}")
    rec = np.frombuffer(body, dtype=_RECORD)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64)
    return PointCloud(int(frame_id), frame_name, xyz, rec["label"].astype(np.int64))


def write_cloud_csv(path, cloud):
    """Debug export with the same fields as the binary format."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "label"])
            for (x, y, z), lab in zip(cloud.xyz.astype(np.float32).tolist(), cloud.labels.tolist()):
                w.writerow([repr(x), repr(y), repr(z), lab])
    except OSError as exc:
        raise RLPlaceIOError(f"cannot write {path}: {exc}") from exc
