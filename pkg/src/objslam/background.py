"""Instance-agnostic coarse TSDF used for local tracking and occlusion."""

from __future__ import annotations

import numpy as np

from .geometry import Intrinsics, Pose
from .voxel import MAX_WEIGHT, VoxelGrid, integrate_depth_kernel

BG_RESOLUTION = 256
BG_VOXEL_SIZE = 0.02
BG_FORWARD_OFFSET = 2.56
BG_RESET_DISTANCE = 1.28


class CoarseVolume:
    """A throw-away 256^3 grid at 2 cm voxels, centred a fixed distance
    along the camera's optical axis at creation. Foreground counts are
    unused; the raycaster treats every zero crossing as valid."""

    def __init__(self, centre, creation_pose: Pose,
                 resolution: int = BG_RESOLUTION, voxel_size: float = BG_VOXEL_SIZE):
        self.pose = Pose(np.eye(3), centre)
        self.creation_pose = creation_pose
        self.voxel_size = float(voxel_size)
        self.grid = VoxelGrid(resolution)

    @property
    def resolution(self) -> int:
        return self.grid.resolution

    @property
    def size(self) -> float:
        return self.voxel_size * self.grid.resolution

    @property
    def centre(self):
        return self.pose.translation

    @property
    def truncation(self) -> float:
        return 4.0 * self.voxel_size

    @property
    def id(self) -> int:
        return 0


def init_point(camera_pose: Pose, forward=BG_FORWARD_OFFSET):
    return camera_pose.apply(np.array([0.0, 0.0, forward]))


def init_background(camera_pose: Pose, resolution: int = BG_RESOLUTION,
                    voxel_size: float = BG_VOXEL_SIZE,
                    forward=BG_FORWARD_OFFSET) -> CoarseVolume:
    return CoarseVolume(init_point(camera_pose, forward), camera_pose,
                        resolution, voxel_size)


def needs_reset(vol: CoarseVolume, camera_pose: Pose,
                threshold=BG_RESET_DISTANCE, forward=BG_FORWARD_OFFSET) -> bool:
    """True once the camera's forward point leaves the spherical band
    around the volume centre."""
    return float(np.linalg.norm(vol.centre - init_point(camera_pose, forward))) > threshold


def integrate_background(vol: CoarseVolume, depth, camera_pose: Pose, K: Intrinsics):
    """Ungated weighted-average TSDF update; the coarse volume fuses every
    frame so there is always something to track against."""
    t_co = camera_pose.inverse() @ vol.pose
    integrate_depth_kernel(
        vol.grid.sdf, vol.grid.weight, vol.resolution, vol.voxel_size, 0.5 * vol.size,
        np.ascontiguousarray(depth, dtype=np.float64),
        K.fx, K.fy, K.cx, K.cy,
        np.ascontiguousarray(t_co.rotation), np.ascontiguousarray(t_co.translation),
        vol.truncation, MAX_WEIGHT)
