"""Layered rendering of object volumes plus the coarse background into
depth / vertex / normal / instance-index maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, pixel_rays
from .voxel import raycast_volume_kernel

RAY_MIN = 0.1
RAY_MAX = 8.0
SDF_REFINE_THRESHOLD = 0.8
BACKGROUND_BEHIND_SLACK = 0.05

# deterministic palette for instance colouring, keyed by id
_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 190], [0, 128, 128], [170, 110, 40],
], dtype=np.uint8)


@dataclass
class RenderedMaps:
    """Per-pixel render of the layered scene. depth holds ray lengths in
    metres; index is the instance id (0 background, -1 none)."""

    depth: np.ndarray
    vertices: np.ndarray
    normals: np.ndarray
    index: np.ndarray
    valid: np.ndarray
    pixel_counts: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.depth.shape


def instance_colour(instance_id: int) -> np.ndarray:
    return _PALETTE[instance_id % len(_PALETTE)]


def raycast_layered(volumes, background, camera_pose: Pose, K: Intrinsics,
                    ray_min=RAY_MIN, ray_max=RAY_MAX,
                    refine_threshold=SDF_REFINE_THRESHOLD,
                    behind_slack=BACKGROUND_BEHIND_SLACK,
                    fg_threshold=0.5) -> RenderedMaps:
    """Composite render: nearest foreground-accepted zero crossing across
    object volumes, falling back to the coarse background when no object
    hit exists or the nearest one lies more than behind_slack behind the
    background intersection."""
    h, w = K.height, K.width
    dirs_cam = pixel_rays(K)
    dirs = (dirs_cam.reshape(-1, 3) @ camera_pose.rotation.T).astype(np.float64)
    dirs = np.ascontiguousarray(dirs)
    origin = np.ascontiguousarray(camera_pose.translation)

    obj_t = np.full(h * w, ray_max, dtype=np.float64)
    obj_id = np.full(h * w, -1, dtype=np.int32)
    obj_n = np.zeros((h * w, 3), dtype=np.float64)
    for vol in sorted(volumes, key=lambda v: v.id):
        t_ow = vol.pose.inverse()
        raycast_volume_kernel(
            vol.grid.sdf, vol.grid.weight, vol.grid.fg, vol.grid.bg,
            True, fg_threshold,
            vol.resolution, vol.voxel_size, 0.5 * vol.size,
            np.ascontiguousarray(t_ow.rotation), np.ascontiguousarray(t_ow.translation),
            np.ascontiguousarray(vol.pose.rotation),
            origin, dirs, ray_min, ray_max, refine_threshold,
            vol.id, obj_t, obj_id, obj_n)

    if background is not None:
        bg_t = obj_t.copy()
        bg_id = np.full(h * w, -1, dtype=np.int32)
        bg_n = np.zeros((h * w, 3), dtype=np.float64)
        t_ow = background.pose.inverse()
        raycast_volume_kernel(
            background.grid.sdf, background.grid.weight,
            background.grid.fg, background.grid.bg,
            False, fg_threshold,
            background.resolution, background.voxel_size, 0.5 * background.size,
            np.ascontiguousarray(t_ow.rotation), np.ascontiguousarray(t_ow.translation),
            np.ascontiguousarray(background.pose.rotation),
            origin, dirs, ray_min, ray_max, refine_threshold,
            0, bg_t, bg_id, bg_n)
        bg_found = bg_id == 0
        obj_found = obj_id > 0
        # the background intersection wins when there is no foreground hit,
        # or the foreground hit is more than the slack behind it
        use_bg = bg_found & (~obj_found | (obj_t > bg_t + behind_slack))
        t = np.where(use_bg, bg_t, obj_t)
        index = np.where(use_bg, 0, obj_id)
        normals = np.where(use_bg[:, None], bg_n, obj_n)
        found = use_bg | obj_found
    else:
        obj_found = obj_id > 0
        t = obj_t
        index = obj_id
        normals = obj_n
        found = obj_found

    index = np.where(found, index, -1).astype(np.int32)
    depth = np.where(found, t, np.nan)
    verts = np.where(found[:, None], origin[None, :] + t[:, None] * dirs, 0.0)

    ids, counts = np.unique(index[found], return_counts=True)
    maps = RenderedMaps(
        depth=depth.reshape(h, w),
        vertices=verts.reshape(h, w, 3),
        normals=np.where(found[:, None], normals, 0.0).reshape(h, w, 3),
        index=index.reshape(h, w),
        valid=found.reshape(h, w),
        pixel_counts={int(i): int(c) for i, c in zip(ids, counts)},
    )
    return maps


def render_instance_masks(maps: RenderedMaps) -> dict:
    """Binary mask per rendered object instance (background excluded)."""
    out = {}
    for i in maps.pixel_counts:
        if i > 0:
            out[i] = maps.index == i
    return out


def render_rgb(maps: RenderedMaps) -> np.ndarray:
    """Flat instance colours, for debugging output only."""
    h, w = maps.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    for i in maps.pixel_counts:
        rgb[maps.index == i] = instance_colour(i) if i > 0 else np.array([80, 80, 80])
    return rgb
