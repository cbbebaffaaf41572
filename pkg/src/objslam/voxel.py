"""Truncated signed-distance voxel grids and their hot loops.

Each voxel carries 10 bytes: float32 signed distance (normalised by the
truncation band), uint16 fusion weight, and uint16 foreground / background
detection counts acting as beta-distribution shape parameters. The numba
kernels below do per-voxel integration and per-ray marching; everything
else stays in numpy.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

VOXEL_DTYPE = np.dtype([("sdf", "<f4"), ("weight", "<u2"), ("fg", "<u2"), ("bg", "<u2")])
MAX_WEIGHT = 65535
MAX_COUNT = 65535


class VoxelGrid:
    """Cubic grid of TSDF voxels, voxel (i,j,k) centred at
    ((i,j,k) + 0.5) * voxel_size - edge/2 in the volume frame."""

    def __init__(self, resolution: int):
        r = int(resolution)
        self.resolution = r
        self.sdf = np.ones((r, r, r), dtype=np.float32)
        self.weight = np.zeros((r, r, r), dtype=np.uint16)
        self.fg = np.ones((r, r, r), dtype=np.uint16)
        self.bg = np.ones((r, r, r), dtype=np.uint16)

    @property
    def nbytes(self) -> int:
        return self.sdf.nbytes + self.weight.nbytes + self.fg.nbytes + self.bg.nbytes

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid.__new__(VoxelGrid)
        g.resolution = self.resolution
        g.sdf = self.sdf.copy()
        g.weight = self.weight.copy()
        g.fg = self.fg.copy()
        g.bg = self.bg.copy()
        return g

    def to_records(self) -> np.ndarray:
        """Interleaved little-endian records, 10 bytes per voxel."""
        rec = np.empty(self.sdf.shape, dtype=VOXEL_DTYPE)
        rec["sdf"] = self.sdf
        rec["weight"] = self.weight
        rec["fg"] = self.fg
        rec["bg"] = self.bg
        return rec

    @staticmethod
    def from_records(rec: np.ndarray) -> "VoxelGrid":
        g = VoxelGrid.__new__(VoxelGrid)
        g.resolution = rec.shape[0]
        g.sdf = np.ascontiguousarray(rec["sdf"])
        g.weight = np.ascontiguousarray(rec["weight"])
        g.fg = np.ascontiguousarray(rec["fg"])
        g.bg = np.ascontiguousarray(rec["bg"])
        return g


@njit(cache=True, parallel=True)
def integrate_depth_kernel(sdf, weight, resolution, voxel_size, half_edge,
                           depth, fx, fy, cx, cy,
                           R_co, t_co, mu, max_weight):
    """Weighted-average TSDF update from one depth image.

    A voxel is touched when it projects onto a valid depth pixel and the
    measurement lies less than mu behind it. Each thread owns whole x
    slabs, so the parallel loop stays bit-deterministic.
    """
    height, width = depth.shape
    dzx = R_co[0, 2] * voxel_size
    dzy = R_co[1, 2] * voxel_size
    dzz = R_co[2, 2] * voxel_size
    for i in prange(resolution):
        x_o = (i + 0.5) * voxel_size - half_edge
        for j in range(resolution):
            y_o = (j + 0.5) * voxel_size - half_edge
            z_o = 0.5 * voxel_size - half_edge
            x_c = R_co[0, 0] * x_o + R_co[0, 1] * y_o + R_co[0, 2] * z_o + t_co[0]
            y_c = R_co[1, 0] * x_o + R_co[1, 1] * y_o + R_co[1, 2] * z_o + t_co[1]
            z_c = R_co[2, 0] * x_o + R_co[2, 1] * y_o + R_co[2, 2] * z_o + t_co[2]
            for k in range(resolution):
                if z_c > 0.0:
                    u = int(np.rint(fx * x_c / z_c + cx))
                    v = int(np.rint(fy * y_c / z_c + cy))
                    if 0 <= u < width and 0 <= v < height:
                        d = depth[v, u]
                        if d > 0.0 and np.isfinite(d):
                            eta = d - z_c
                            if eta > -mu:
                                s = eta / mu
                                if s > 1.0:
                                    s = 1.0
                                w = weight[i, j, k]
                                sdf[i, j, k] = (sdf[i, j, k] * w + s) / (w + 1.0)
                                if w < max_weight:
                                    weight[i, j, k] = w + 1
                x_c += dzx
                y_c += dzy
                z_c += dzz


@njit(cache=True, parallel=True)
def fuse_foreground_kernel(fg, bg, resolution, voxel_size, half_edge,
                           depth, mask, fx, fy, cx, cy, R_co, t_co, mu):
    """Increment per-voxel foreground/background counts from a binary mask,
    for voxels inside the same truncation test as depth integration."""
    height, width = depth.shape
    for i in prange(resolution):
        x_o = (i + 0.5) * voxel_size - half_edge
        for j in range(resolution):
            y_o = (j + 0.5) * voxel_size - half_edge
            for k in range(resolution):
                z_o = (k + 0.5) * voxel_size - half_edge
                x_c = R_co[0, 0] * x_o + R_co[0, 1] * y_o + R_co[0, 2] * z_o + t_co[0]
                y_c = R_co[1, 0] * x_o + R_co[1, 1] * y_o + R_co[1, 2] * z_o + t_co[1]
                z_c = R_co[2, 0] * x_o + R_co[2, 1] * y_o + R_co[2, 2] * z_o + t_co[2]
                if z_c <= 0.0:
                    continue
                u = int(np.rint(fx * x_c / z_c + cx))
                v = int(np.rint(fy * y_c / z_c + cy))
                if u < 0 or u >= width or v < 0 or v >= height:
                    continue
                d = depth[v, u]
                if not (d > 0.0 and np.isfinite(d)):
                    continue
                eta = d - z_c
                if eta <= -mu:
                    continue
                if mask[v, u]:
                    if fg[i, j, k] < MAX_COUNT:
                        fg[i, j, k] += 1
                else:
                    if bg[i, j, k] < MAX_COUNT:
                        bg[i, j, k] += 1


@njit(cache=True, inline="always")
def _tri_setup(gx, gy, gz, resolution):
    x0 = int(np.floor(gx))
    y0 = int(np.floor(gy))
    z0 = int(np.floor(gz))
    ok = (x0 >= 0 and y0 >= 0 and z0 >= 0 and
          x0 + 1 < resolution and y0 + 1 < resolution and z0 + 1 < resolution)
    return x0, y0, z0, gx - x0, gy - y0, gz - z0, ok


@njit(cache=True, inline="always")
def trilinear_sdf(sdf, weight, resolution, gx, gy, gz):
    """Interpolated signed distance at grid coordinates; invalid unless all
    eight corner voxels have been observed."""
    x0, y0, z0, ax, ay, az, ok = _tri_setup(gx, gy, gz, resolution)
    if not ok:
        return 0.0, False
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                if weight[x0 + dx, y0 + dy, z0 + dz] == 0:
                    return 0.0, False
    v = 0.0
    for dx in range(2):
        wx = ax if dx == 1 else 1.0 - ax
        for dy in range(2):
            wy = ay if dy == 1 else 1.0 - ay
            for dz in range(2):
                wz = az if dz == 1 else 1.0 - az
                v += wx * wy * wz * sdf[x0 + dx, y0 + dy, z0 + dz]
    return v, True


@njit(cache=True, inline="always")
def trilinear_sdf_clamped(sdf, resolution, gx, gy, gz):
    """Interpolated signed distance ignoring observation weights, with
    coordinates clamped to the grid. Used for surface gradients."""
    lim = resolution - 1.000001
    if gx < 0.0:
        gx = 0.0
    if gy < 0.0:
        gy = 0.0
    if gz < 0.0:
        gz = 0.0
    if gx > lim:
        gx = lim
    if gy > lim:
        gy = lim
    if gz > lim:
        gz = lim
    x0 = int(np.floor(gx))
    y0 = int(np.floor(gy))
    z0 = int(np.floor(gz))
    ax = gx - x0
    ay = gy - y0
    az = gz - z0
    v = 0.0
    for dx in range(2):
        wx = ax if dx == 1 else 1.0 - ax
        for dy in range(2):
            wy = ay if dy == 1 else 1.0 - ay
            for dz in range(2):
                wz = az if dz == 1 else 1.0 - az
                v += wx * wy * wz * sdf[x0 + dx, y0 + dy, z0 + dz]
    return v


@njit(cache=True, inline="always")
def trilinear_foreground(fg, bg, resolution, gx, gy, gz):
    """Interpolated foreground probability F/(F+N); defined everywhere the
    coordinates sit inside the corner lattice."""
    x0, y0, z0, ax, ay, az, ok = _tri_setup(gx, gy, gz, resolution)
    if not ok:
        return 0.0, False
    v = 0.0
    wsum = 0.0
    for dx in range(2):
        wx = ax if dx == 1 else 1.0 - ax
        for dy in range(2):
            wy = ay if dy == 1 else 1.0 - ay
            for dz in range(2):
                wz = az if dz == 1 else 1.0 - az
                f = float(fg[x0 + dx, y0 + dy, z0 + dz])
                n = float(bg[x0 + dx, y0 + dy, z0 + dz])
                w = wx * wy * wz
                wsum += w
                v += w * (f / (f + n))
    # normalising keeps a constant field exactly constant, so the strict
    # decision threshold cannot leak on the uninformative prior
    return v / wsum, True


@njit(cache=True, parallel=True)
def raycast_volume_kernel(sdf, weight, fg, bg, use_foreground, fg_threshold,
                          resolution, voxel_size, half_edge,
                          R_ow, t_ow, R_wo,
                          origin, dirs,
                          t_min, t_max, refine_threshold,
                          volume_id, best_t, best_id, best_normals):
    """March every ray through one volume, keeping the nearest accepted
    zero crossing across volumes.

    Rays are clipped to the volume's box in its own frame, stepped at one
    voxel (half a voxel once the interpolated distance drops below
    refine_threshold), and a positive-to-negative crossing is refined with
    one linear interpolation. With use_foreground the crossing must also
    have interpolated foreground probability above fg_threshold. best_t
    doubles as the search cap so no ray marches past an earlier hit.
    """
    n = dirs.shape[0]
    inv = 1.0 / voxel_size
    half_idx = resolution * 0.5 - 0.5
    ox = R_ow[0, 0] * origin[0] + R_ow[0, 1] * origin[1] + R_ow[0, 2] * origin[2] + t_ow[0]
    oy = R_ow[1, 0] * origin[0] + R_ow[1, 1] * origin[1] + R_ow[1, 2] * origin[2] + t_ow[1]
    oz = R_ow[2, 0] * origin[0] + R_ow[2, 1] * origin[1] + R_ow[2, 2] * origin[2] + t_ow[2]
    for p in prange(n):
        # ray in the volume frame
        dx, dy, dz = dirs[p, 0], dirs[p, 1], dirs[p, 2]
        rx = R_ow[0, 0] * dx + R_ow[0, 1] * dy + R_ow[0, 2] * dz
        ry = R_ow[1, 0] * dx + R_ow[1, 1] * dy + R_ow[1, 2] * dz
        rz = R_ow[2, 0] * dx + R_ow[2, 1] * dy + R_ow[2, 2] * dz

        # slab clip against the cube [-half_edge, half_edge]^3
        t0 = t_min
        t1 = t_max
        if best_t[p] < t1:
            t1 = best_t[p]
        degenerate = False
        for axis in range(3):
            if axis == 0:
                o, d = ox, rx
            elif axis == 1:
                o, d = oy, ry
            else:
                o, d = oz, rz
            if abs(d) < 1e-12:
                if o < -half_edge or o > half_edge:
                    degenerate = True
                    break
            else:
                ta = (-half_edge - o) / d
                tb = (half_edge - o) / d
                if ta > tb:
                    ta, tb = tb, ta
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
        if degenerate or t1 <= t0:
            continue

        t = t0
        prev_valid = False
        prev_s = 0.0
        prev_t = 0.0
        step = voxel_size
        while t <= t1:
            gx = (ox + t * rx) * inv + half_idx
            gy = (oy + t * ry) * inv + half_idx
            gz = (oz + t * rz) * inv + half_idx
            s, ok = trilinear_sdf(sdf, weight, resolution, gx, gy, gz)
            if ok:
                if prev_valid and prev_s > 0.0 and s <= 0.0:
                    tstar = prev_t + (t - prev_t) * prev_s / (prev_s - s)
                    hx = (ox + tstar * rx) * inv + half_idx
                    hy = (oy + tstar * ry) * inv + half_idx
                    hz = (oz + tstar * rz) * inv + half_idx
                    accept = True
                    if use_foreground:
                        prob, pok = trilinear_foreground(fg, bg, resolution, hx, hy, hz)
                        accept = pok and prob > fg_threshold
                    if accept and tstar < best_t[p]:
                        # surface normal from the distance-field gradient
                        nx = (trilinear_sdf_clamped(sdf, resolution, hx + 0.5, hy, hz)
                              - trilinear_sdf_clamped(sdf, resolution, hx - 0.5, hy, hz))
                        ny = (trilinear_sdf_clamped(sdf, resolution, hx, hy + 0.5, hz)
                              - trilinear_sdf_clamped(sdf, resolution, hx, hy - 0.5, hz))
                        nz = (trilinear_sdf_clamped(sdf, resolution, hx, hy, hz + 0.5)
                              - trilinear_sdf_clamped(sdf, resolution, hx, hy, hz - 0.5))
                        norm = np.sqrt(nx * nx + ny * ny + nz * nz)
                        if norm < 1e-12:
                            nx, ny, nz = -rx, -ry, -rz
                            norm = 1.0
                        nx /= norm
                        ny /= norm
                        nz /= norm
                        best_t[p] = tstar
                        best_id[p] = volume_id
                        best_normals[p, 0] = R_wo[0, 0] * nx + R_wo[0, 1] * ny + R_wo[0, 2] * nz
                        best_normals[p, 1] = R_wo[1, 0] * nx + R_wo[1, 1] * ny + R_wo[1, 2] * nz
                        best_normals[p, 2] = R_wo[2, 0] * nx + R_wo[2, 1] * ny + R_wo[2, 2] * nz
                        break
                prev_valid = True
                prev_s = s
                prev_t = t
                step = 0.5 * voxel_size if s < refine_threshold else voxel_size
            else:
                prev_valid = False
                step = voxel_size
            t += step
