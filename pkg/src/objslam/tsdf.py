"""Per-object TSDF volumes: creation from a detection mask, resizing,
depth integration, foreground-mask fusion, existence and semantics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Intrinsics, Pose, backproject, quat_from_rotation, rotation_from_quat
from .voxel import MAX_WEIGHT, VoxelGrid, fuse_foreground_kernel, integrate_depth_kernel

INIT_RESOLUTION = 64
MAX_RESOLUTION = 128
MAX_OBJECT_SIZE = 3.0
MAX_INIT_DISTANCE = 5.0
MAX_BOX_IOU = 0.5
PADDING_FACTOR = 1.5
PERCENTILE_LOW = 10.0
PERCENTILE_HIGH = 90.0
EROSION_RADIUS_PX = 2
TRUNCATION_VOXELS = 4.0
FOREGROUND_THRESHOLD = 0.5
EXISTENCE_DELETE_BELOW = 0.1
EXISTENCE_MIN_PIXELS = 2500


@dataclass
class ObjectVolume:
    """A cubic TSDF around one object instance.

    pose maps object-frame coordinates (origin at the volume centre) into
    the world frame. edge length = voxel_size * resolution.
    """

    id: int
    pose: Pose
    voxel_size: float
    grid: VoxelGrid
    exist_count: int = 1
    missed_count: int = 1
    class_distribution: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    detection_count: int = 0

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    @property
    def size(self) -> float:
        return self.voxel_size * self.grid.resolution

    @property
    def truncation(self) -> float:
        return TRUNCATION_VOXELS * self.voxel_size

    @property
    def existence_probability(self) -> float:
        return self.exist_count / (self.exist_count + self.missed_count)

    def world_aabb(self):
        """Axis-aligned world box enclosing the (possibly rotated) volume cube."""
        h = 0.5 * self.size
        corners = np.array([[sx * h, sy * h, sz * h]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        w = self.pose.apply(corners)
        return w.min(axis=0), w.max(axis=0)

    def world_to_grid(self, points):
        """World points to continuous grid coordinates (voxel centres at integers)."""
        p = self.pose.inverse().apply(points)
        return p / self.voxel_size + 0.5 * self.resolution - 0.5


def erode_mask(mask, radius: int = EROSION_RADIUS_PX):
    """Binary erosion with a square structuring element of the given radius."""
    if radius <= 0:
        return mask.astype(bool)
    k = 2 * radius + 1
    return ndimage.binary_erosion(mask.astype(bool), structure=np.ones((k, k), dtype=bool))


def mask_cloud_world(mask, depth, camera_pose: Pose, K: Intrinsics, erosion=EROSION_RADIUS_PX):
    """Backproject the eroded mask's valid-depth pixels into world points."""
    m = erode_mask(mask, erosion)
    m = m & np.isfinite(depth) & (depth > 0)
    v, u = np.nonzero(m)
    if len(u) == 0:
        return np.empty((0, 3))
    pts = backproject(K, np.stack([u, v], axis=-1).astype(np.float64), depth[v, u])
    return camera_pose.apply(pts)


def box_iou(lo_a, hi_a, lo_b, hi_b) -> float:
    """Intersection over union of two axis-aligned 3D boxes."""
    lo = np.maximum(lo_a, lo_b)
    hi = np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    vol_a = float(np.prod(np.asarray(hi_a) - lo_a))
    vol_b = float(np.prod(np.asarray(hi_b) - lo_b))
    return inter / (vol_a + vol_b - inter)


def _percentile_box(points):
    p10 = np.percentile(points, PERCENTILE_LOW, axis=0)
    p90 = np.percentile(points, PERCENTILE_HIGH, axis=0)
    centre = 0.5 * (p10 + p90)
    span = float(np.max(np.abs(p90 - p10)))
    return centre, span


def init_object(mask, depth, camera_pose: Pose, K: Intrinsics, existing,
                volume_id: int = 0, label_count: int = 1,
                max_init_distance=MAX_INIT_DISTANCE, max_box_iou=MAX_BOX_IOU,
                erosion=EROSION_RADIUS_PX):
    """Build a fresh volume around a detection mask.

    Returns (volume, None) or (None, reason) with reason one of
    "empty-cloud", "too-far", "overlap".
    """
    cloud = mask_cloud_world(mask, depth, camera_pose, K, erosion)
    if cloud.shape[0] == 0:
        return None, "empty-cloud"
    centre, span = _percentile_box(cloud)
    size = min(PADDING_FACTOR * span, MAX_OBJECT_SIZE)
    if size <= 0:
        return None, "empty-cloud"
    if np.linalg.norm(centre - camera_pose.translation) > max_init_distance:
        return None, "too-far"
    half = 0.5 * size
    lo, hi = centre - half, centre + half
    for other in existing:
        olo, ohi = other.world_aabb()
        if box_iou(lo, hi, olo, ohi) >= max_box_iou:
            return None, "overlap"
    vol = ObjectVolume(
        id=volume_id,
        pose=Pose(np.eye(3), centre),
        voxel_size=size / INIT_RESOLUTION,
        grid=VoxelGrid(INIT_RESOLUTION),
        class_distribution=np.full(label_count, 1.0 / label_count),
    )
    return vol, None


def resize_object(vol: ObjectVolume, new_cloud_world, recon_cloud_world=None):
    """Grow a volume so it encompasses both its current box and the padded
    percentile box of the new mask cloud combined with an eroded point
    cloud raycast from the current reconstruction.

    The centre moves only by integer voxel multiples and the voxel size is
    kept, so surviving voxels land at identical world positions. Returns
    (volume, frame_change, reinitialised): frame_change maps old-frame to
    new-frame coordinates and feeds the pose-graph recentring.
    """
    identity = Pose.identity()
    if recon_cloud_world is not None and len(recon_cloud_world):
        new_cloud_world = np.vstack([new_cloud_world, recon_cloud_world]) \
            if len(new_cloud_world) else np.asarray(recon_cloud_world)
    if new_cloud_world.shape[0] == 0:
        return vol, identity, False
    cloud_obj = vol.pose.inverse().apply(new_cloud_world)
    centre, span = _percentile_box(cloud_obj)
    size_new = min(PADDING_FACTOR * span, MAX_OBJECT_SIZE)
    half_old = 0.5 * vol.size
    lo = np.minimum(centre - 0.5 * size_new, -half_old)
    hi = np.maximum(centre + 0.5 * size_new, half_old)

    v = vol.voxel_size
    c_snap = np.rint(0.5 * (lo + hi) / v) * v
    half_req = float(np.max(np.maximum(hi - c_snap, c_snap - lo)))
    res_new = 2 * int(np.ceil(half_req / v - 1e-9))
    res_new = max(res_new, vol.resolution)
    size_cap = 2 * int(np.floor(0.5 * MAX_OBJECT_SIZE / v))
    if res_new > MAX_RESOLUTION:
        return _reinitialise(vol, new_cloud_world)
    res_new = min(res_new, size_cap)
    if res_new == vol.resolution and np.all(c_snap == 0.0):
        return vol, identity, False

    old = vol.grid
    grid = VoxelGrid(res_new)
    r_old, r_new = vol.resolution, res_new
    shift = np.rint(c_snap / v).astype(int) - (r_new - r_old) // 2
    src_lo = np.maximum(shift, 0)
    src_hi = np.minimum(r_old, r_new + shift)
    if np.all(src_hi > src_lo):
        dst_lo = src_lo - shift
        dst_hi = src_hi - shift
        s = tuple(slice(a, b) for a, b in zip(src_lo, src_hi))
        d = tuple(slice(a, b) for a, b in zip(dst_lo, dst_hi))
        grid.sdf[d] = old.sdf[s]
        grid.weight[d] = old.weight[s]
        grid.fg[d] = old.fg[s]
        grid.bg[d] = old.bg[s]

    frame_change = Pose(np.eye(3), -c_snap)
    vol.pose = vol.pose @ frame_change.inverse()
    vol.grid = grid
    return vol, frame_change, False


def _reinitialise(vol: ObjectVolume, cloud_world):
    """Reset the voxel contents as though the volume were new, keeping the
    object identity, existence counts and semantics."""
    cloud_obj = vol.pose.inverse().apply(cloud_world)
    centre, span = _percentile_box(cloud_obj)
    size = min(PADDING_FACTOR * span, MAX_OBJECT_SIZE)
    if size <= 0:
        return vol, Pose.identity(), False
    frame_change = Pose(np.eye(3), -centre)
    vol.pose = vol.pose @ frame_change.inverse()
    vol.voxel_size = size / INIT_RESOLUTION
    vol.grid = VoxelGrid(INIT_RESOLUTION)
    return vol, frame_change, True


def integrate_depth(vol: ObjectVolume, depth, camera_pose: Pose, K: Intrinsics,
                    valid_fraction=1.0, rmse=0.0,
                    min_valid_fraction=0.5, max_rmse=0.03) -> bool:
    """Fuse one depth image into the volume when the tracking gate passes.

    Returns whether integration ran; a failed gate is a silent skip.
    """
    if valid_fraction < min_valid_fraction or rmse >= max_rmse:
        return False
    t_co = camera_pose.inverse() @ vol.pose
    integrate_depth_kernel(
        vol.grid.sdf, vol.grid.weight, vol.resolution, vol.voxel_size, 0.5 * vol.size,
        np.ascontiguousarray(depth, dtype=np.float64),
        K.fx, K.fy, K.cx, K.cy,
        np.ascontiguousarray(t_co.rotation), np.ascontiguousarray(t_co.translation),
        vol.truncation, MAX_WEIGHT)
    return True


def fuse_foreground(vol: ObjectVolume, mask, depth, camera_pose: Pose, K: Intrinsics):
    """Update per-voxel foreground/background counts from an associated
    detection mask. Voxels outside the image or the truncation band keep
    their counts."""
    t_co = camera_pose.inverse() @ vol.pose
    fuse_foreground_kernel(
        vol.grid.fg, vol.grid.bg, vol.resolution, vol.voxel_size, 0.5 * vol.size,
        np.ascontiguousarray(depth, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
        K.fx, K.fy, K.cx, K.cy,
        np.ascontiguousarray(t_co.rotation), np.ascontiguousarray(t_co.translation),
        vol.truncation)


def foreground_probability(vol: ObjectVolume, index) -> float:
    """Expected foreground probability F/(F+N) of one voxel."""
    i, j, k = index
    f = float(vol.grid.fg[i, j, k])
    n = float(vol.grid.bg[i, j, k])
    return f / (f + n)


def interpolated_foreground(vol: ObjectVolume, grid_coords) -> np.ndarray:
    """Trilinearly interpolated foreground probability at continuous grid
    coordinates (N, 3); the raycaster uses the same corner blend."""
    g = np.asarray(grid_coords, dtype=np.float64)
    prob = vol.grid.fg.astype(np.float64) / (vol.grid.fg.astype(np.float64)
                                             + vol.grid.bg.astype(np.float64))
    return _trilinear(prob, g)


def _trilinear(field3d, coords):
    r = field3d.shape[0]
    c = np.clip(coords, 0.0, r - 1.000001)
    c0 = np.floor(c).astype(int)
    a = c - c0
    out = np.zeros(len(c))
    wsum = np.zeros(len(c))
    for dx in (0, 1):
        wx = a[:, 0] if dx else 1.0 - a[:, 0]
        for dy in (0, 1):
            wy = a[:, 1] if dy else 1.0 - a[:, 1]
            for dz in (0, 1):
                wz = a[:, 2] if dz else 1.0 - a[:, 2]
                w = wx * wy * wz
                wsum += w
                out += w * field3d[c0[:, 0] + dx, c0[:, 1] + dy, c0[:, 2] + dz]
    return out / wsum


def update_existence(vol: ObjectVolume, visible_pixels: int, associated: bool,
                     min_pixels=EXISTENCE_MIN_PIXELS,
                     delete_below=EXISTENCE_DELETE_BELOW) -> bool:
    """Count a detection/non-detection event when the object was clearly
    visible. Returns False when the instance should be deleted."""
    if visible_pixels > min_pixels:
        if associated:
            vol.exist_count += 1
        else:
            vol.missed_count += 1
    return vol.existence_probability >= delete_below


def fuse_semantics(vol: ObjectVolume, class_dist, mode: str = "average"):
    """Fold one detection's class distribution into the volume."""
    d = np.asarray(class_dist, dtype=np.float64)
    if abs(d.sum() - 1.0) > 1e-6:
        raise ValueError("class distribution must sum to 1")
    if mode == "average":
        k = vol.detection_count
        vol.class_distribution = (vol.class_distribution * k + d) / (k + 1)
    elif mode == "multiplicative":
        if vol.detection_count == 0:
            vol.class_distribution = d.copy()
        else:
            prod = vol.class_distribution * d
            vol.class_distribution = prod / prod.sum()
    else:
        raise ValueError(f"unknown semantics mode: {mode}")
    vol.detection_count += 1


def save_volume(vol: ObjectVolume, path_prefix):
    """Dump the raw little-endian voxel records plus a JSON sidecar."""
    prefix = str(path_prefix)
    vol.grid.to_records().tofile(prefix + ".vox")
    q = quat_from_rotation(vol.pose.rotation)
    meta = {
        "id": vol.id,
        "translation": vol.pose.translation.tolist(),
        "quaternion_xyzw": q.tolist(),
        "size": vol.size,
        "resolution": vol.resolution,
        "voxel_size": vol.voxel_size,
        "exist_count": vol.exist_count,
        "missed_count": vol.missed_count,
        "detection_count": vol.detection_count,
        "class_distribution": vol.class_distribution.tolist(),
    }
    with open(prefix + ".json", "w") as f:
        json.dump(meta, f, indent=1)


def load_volume(path_prefix) -> ObjectVolume:
    prefix = str(path_prefix)
    with open(prefix + ".json") as f:
        meta = json.load(f)
    r = meta["resolution"]
    from .voxel import VOXEL_DTYPE

    rec = np.fromfile(prefix + ".vox", dtype=VOXEL_DTYPE).reshape(r, r, r)
    pose = Pose(rotation_from_quat(meta["quaternion_xyzw"]), meta["translation"])
    return ObjectVolume(
        id=meta["id"],
        pose=pose,
        voxel_size=meta["voxel_size"],
        grid=VoxelGrid.from_records(rec),
        exist_count=meta["exist_count"],
        missed_count=meta["missed_count"],
        class_distribution=np.asarray(meta["class_distribution"]),
        detection_count=meta["detection_count"],
    )
