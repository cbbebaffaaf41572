import numpy as np
import pytest

from objslam.background import init_background, integrate_background
from objslam.geometry import Intrinsics, Pose, pixel_rays
from objslam.raycast import raycast_layered, render_instance_masks
from objslam.synthworld import Primitive, SceneSpec, look_at, render_synth
from objslam.tsdf import ObjectVolume, fuse_foreground, integrate_depth
from objslam.voxel import VoxelGrid

K = Intrinsics(fx=60.0, fy=60.0, cx=20.0, cy=15.0, width=40, height=30)


def sphere_volume(centre=(0.0, 0.0, 1.6), radius=0.3, size=0.9, res=64, vid=1,
                  foreground=True, n_views=12):
    scene = SceneSpec(
        primitives=[Primitive(id=1, shape="sphere", pose=Pose(np.eye(3), centre),
                              dimensions=np.array([radius]), label=0)],
        label_set=["b"])
    vol = ObjectVolume(id=vid, pose=Pose(np.eye(3), centre),
                       voxel_size=size / res, grid=VoxelGrid(res))
    mask = np.ones((K.height, K.width), dtype=bool)
    centre = np.asarray(centre, dtype=np.float64)
    for i in range(n_views):
        theta = 2 * np.pi * i / n_views
        eye = centre + 1.6 * np.array([np.sin(theta), 0.2 * np.sin(2 * theta), -np.cos(theta)])
        pose = look_at(eye, centre, up=(0, 1, 0))
        depth, _, _ = render_synth(scene, pose, K)
        integrate_depth(vol, depth, pose, K)
        if foreground:
            fuse_foreground(vol, mask, depth, pose, K)
    return scene, vol


def _interp_many(field, g, weight=None):
    """Vectorised trilinear interpolation at (N, 3) grid coordinates.
    Returns (values, valid); weight-0 corners invalidate a sample."""
    r = field.shape[0]
    c0 = np.floor(g).astype(int)
    inside = np.all(c0 >= 0, axis=1) & np.all(c0 + 1 < r, axis=1)
    c0c = np.clip(c0, 0, r - 2)
    a = g - c0
    vals = np.zeros(len(g))
    ok = inside.copy()
    for dx in (0, 1):
        wx = a[:, 0] if dx else 1 - a[:, 0]
        for dy in (0, 1):
            wy = a[:, 1] if dy else 1 - a[:, 1]
            for dz in (0, 1):
                wz = a[:, 2] if dz else 1 - a[:, 2]
                idx = (c0c[:, 0] + dx, c0c[:, 1] + dy, c0c[:, 2] + dz)
                vals += wx * wy * wz * field[idx]
                if weight is not None:
                    ok &= weight[idx] > 0
    return vals, ok


def brute_force_reference(volumes, camera_pose, k, step_scale=0.1,
                          ray_min=0.1, ray_max=8.0):
    """Independent dense-marching oracle: fixed tiny steps, all rays in
    lockstep, plain numpy interpolation, nearest accepted crossing wins."""
    dirs = pixel_rays(k).reshape(-1, 3) @ camera_pose.rotation.T
    origin = camera_pose.translation
    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1)

    for vol in volumes:
        step = step_scale * vol.voxel_size
        prob = vol.grid.fg.astype(float) / (vol.grid.fg.astype(float) + vol.grid.bg.astype(float))
        sdf = vol.grid.sdf.astype(float)
        inv_pose = vol.pose.inverse()
        o = inv_pose.apply(origin)
        d = inv_pose.rotate(dirs)
        # march only inside the volume's own box plus one step of margin
        half = 0.5 * vol.size
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-half - o) / d
            tb = (half - o) / d
        lo = np.fmin(ta, tb).max(axis=1)
        hi = np.fmax(ta, tb).min(axis=1)
        t0 = max(ray_min, float(np.nanmin(lo)))
        t1 = min(ray_max, float(np.nanmax(hi)))
        if t1 <= t0:
            continue
        prev_s = np.zeros(len(dirs))
        prev_t = np.zeros(len(dirs))
        prev_ok = np.zeros(len(dirs), dtype=bool)
        for t in np.arange(t0, t1 + step, step):
            g = (o + t * d) / vol.voxel_size + vol.resolution / 2 - 0.5
            s, ok = _interp_many(sdf, g, vol.grid.weight)
            crossing = prev_ok & ok & (prev_s > 0) & (s <= 0)
            if np.any(crossing):
                frac = prev_s[crossing] / (prev_s[crossing] - s[crossing])
                tstar = prev_t[crossing] + (t - prev_t[crossing]) * frac
                gh = ((o[None, :] + tstar[:, None] * d[crossing])
                      / vol.voxel_size + vol.resolution / 2 - 0.5)
                pr, pok = _interp_many(prob, gh)
                accept = pok & (pr > 0.5) & (tstar < best_t[crossing])
                rows = np.flatnonzero(crossing)
                hit_rows = rows[accept]
                best_t[hit_rows] = tstar[accept]
                best_id[hit_rows] = vol.id
            prev_s, prev_t, prev_ok = s, np.full(len(dirs), t), ok
    return best_t.reshape(k.height, k.width), best_id.reshape(k.height, k.width)


def test_sphere_depth_matches_analytic():
    scene, vol = sphere_volume()
    pose = Pose.identity()
    maps = raycast_layered([vol], None, pose, K)
    assert maps.valid[15, 20]
    assert abs(maps.depth[15, 20] - 1.3) < vol.voxel_size / 2
    assert maps.index[15, 20] == 1


def test_prior_foreground_renders_nothing():
    _, vol = sphere_volume(foreground=False)  # counts stay at the (1,1) prior
    maps = raycast_layered([vol], None, Pose.identity(), K)
    assert not maps.valid.any()
    assert np.all(maps.index == -1)


def test_normals_unit_and_outward():
    _, vol = sphere_volume()
    maps = raycast_layered([vol], None, Pose.identity(), K)
    n = maps.normals[maps.valid]
    assert np.abs(np.linalg.norm(n, axis=1) - 1).max() < 1e-4
    # on a sphere seen from -z the visible normals face the camera
    dirs = pixel_rays(K)[maps.valid]
    assert np.all(np.einsum("ij,ij->i", n, dirs) < 0)


def test_two_volumes_nearest_wins_against_oracle():
    _, near = sphere_volume(centre=(0.0, 0.0, 1.5), radius=0.25, size=0.75, vid=1)
    _, far = sphere_volume(centre=(0.15, 0.0, 2.1), radius=0.25, size=0.75, vid=2)
    pose = Pose.identity()
    maps = raycast_layered([near, far], None, pose, K)
    ref_t, ref_id = brute_force_reference([near, far], pose, K)
    both = maps.valid & (ref_id >= 0)
    assert both.sum() > 100
    assert np.mean(maps.index[both] == ref_id[both]) > 0.97
    agree = both & (maps.index == ref_id)
    assert np.abs(maps.depth[agree] - ref_t[agree]).max() < near.voxel_size


def test_occlusion_nearest_hit_property():
    _, near = sphere_volume(centre=(0.0, 0.0, 1.5), radius=0.25, size=0.75, vid=1)
    _, far = sphere_volume(centre=(0.15, 0.0, 2.1), radius=0.25, size=0.75, vid=2)
    pose = Pose.identity()
    layered = raycast_layered([near, far], None, pose, K)
    solo_near = raycast_layered([near], None, pose, K)
    solo_far = raycast_layered([far], None, pose, K)
    for solo in (solo_near, solo_far):
        both = layered.valid & solo.valid
        assert np.all(layered.depth[both] <= solo.depth[both] + near.voxel_size / 2)


def test_raycast_deterministic():
    _, vol = sphere_volume()
    a = raycast_layered([vol], None, Pose.identity(), K)
    b = raycast_layered([vol], None, Pose.identity(), K)
    assert np.array_equal(a.depth, b.depth, equal_nan=True)
    assert np.array_equal(a.index, b.index)
    assert np.array_equal(a.normals, b.normals)


def background_wall(depth_value=2.5, camera=Pose.identity()):
    bg = init_background(camera, resolution=128, voxel_size=0.04)
    depth = np.full((K.height, K.width), depth_value)
    for _ in range(3):
        integrate_background(bg, depth, camera, K)
    return bg


def test_background_fills_when_no_object():
    bg = background_wall(2.5)
    maps = raycast_layered([], bg, Pose.identity(), K)
    assert maps.valid[15, 20]
    assert maps.index[15, 20] == 0
    assert abs(maps.depth[15, 20] - 2.5) < 0.04


def test_object_in_front_of_background_wins():
    bg = background_wall(2.5)
    _, vol = sphere_volume(centre=(0.0, 0.0, 1.6))
    maps = raycast_layered([vol], bg, Pose.identity(), K)
    assert maps.index[15, 20] == 1
    assert abs(maps.depth[15, 20] - 1.3) < vol.voxel_size


def test_foreground_hit_far_behind_background_loses():
    # wall at 1.2 m occludes a sphere whose surface starts at 1.3 m
    bg = background_wall(1.2)
    _, vol = sphere_volume(centre=(0.0, 0.0, 1.6))
    maps = raycast_layered([vol], bg, Pose.identity(), K)
    assert maps.index[15, 20] == 0
    assert abs(maps.depth[15, 20] - 1.2) < 0.04


def test_instance_masks():
    maps = raycast_layered([], None, Pose.identity(), K)
    assert render_instance_masks(maps) == {}
    _, vol = sphere_volume()
    maps = raycast_layered([vol], None, Pose.identity(), K)
    masks = render_instance_masks(maps)
    assert set(masks) == {1}
    assert masks[1].sum() == maps.pixel_counts[1]
    _, second = sphere_volume(centre=(0.6, 0.0, 1.6), vid=2)
    maps = raycast_layered([vol, second], None, Pose.identity(), K)
    masks = render_instance_masks(maps)
    if 1 in masks and 2 in masks:
        assert not np.any(masks[1] & masks[2])


def test_empty_volume_list_valid():
    maps = raycast_layered([], None, Pose.identity(), K)
    assert not maps.valid.any()
    assert np.all(np.isnan(maps.depth))
