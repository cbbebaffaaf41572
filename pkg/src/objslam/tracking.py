"""Frame-to-model tracking: bilateral preprocessing, coarse-to-fine
projective point-to-plane ICP, per-instance partitioned normal equations,
and the lost-tracking test."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, se3_exp
from .raycast import RenderedMaps

PYRAMID_LEVELS = 3
GN_ITERATIONS = 5
MAX_CORRESPONDENCE_DIST = 0.1
NORMAL_DOT_MIN = 0.8
LOST_RMSE = 0.05
LOST_INSTANCE_COVERAGE = 0.1
LOST_MIN_VALID_FRACTION = 0.5
CONDITION_LIMIT = 1e8
EDGE_SPREAD_LIMIT = 0.05
BILATERAL_WINDOW = 7
BILATERAL_SIGMA_SPACE = 3.0
BILATERAL_SIGMA_RANGE = 0.03


@dataclass
class PyramidLevel:
    depth: np.ndarray
    vertices: np.ndarray
    normals: np.ndarray
    valid_vertex: np.ndarray
    valid_normal: np.ndarray
    intrinsics: Intrinsics


@dataclass
class FramePyramid:
    levels: list

    @property
    def full(self) -> PyramidLevel:
        return self.levels[0]


@dataclass
class TargetSystem:
    """Partitioned normal equations for one render target (object id or 0
    for the background)."""

    jtj: np.ndarray
    jtr: np.ndarray
    error: float
    count: int
    rendered: int

    @property
    def rmse(self) -> float:
        return float(np.sqrt(self.error / self.count)) if self.count else np.inf

    @property
    def valid_fraction(self) -> float:
        return self.count / self.rendered if self.rendered else 0.0


@dataclass
class TrackingResult:
    pose: Pose
    per_target: dict
    icp_rmse: float
    valid_fraction: float
    instance_coverage: float
    valid_count: int = 0
    global_jtj: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    global_jtr: np.ndarray = field(default_factory=lambda: np.zeros(6))
    degenerate: bool = False
    level_errors: dict = field(default_factory=dict)

    def quality(self, target_id: int):
        """(valid_fraction, rmse) for one target; (0, inf) if untracked."""
        sys = self.per_target.get(target_id)
        if sys is None:
            return 0.0, np.inf
        return sys.valid_fraction, sys.rmse


def bilateral_filter(depth, window=BILATERAL_WINDOW,
                     sigma_space=BILATERAL_SIGMA_SPACE,
                     sigma_range=BILATERAL_SIGMA_RANGE):
    """Edge-preserving depth smoothing; invalid pixels contribute nothing
    and stay invalid."""
    d = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    d0 = np.where(valid, d, 0.0)
    half = window // 2
    pad_d = np.pad(d0, half)
    pad_v = np.pad(valid, half)
    h, w = d.shape
    acc = np.zeros_like(d0)
    weights = np.zeros_like(d0)
    for di in range(-half, half + 1):
        for dj in range(-half, half + 1):
            sd = pad_d[half + di:half + di + h, half + dj:half + dj + w]
            sv = pad_v[half + di:half + di + h, half + dj:half + dj + w]
            ws = np.exp(-(di * di + dj * dj) / (2 * sigma_space**2))
            wr = np.exp(-((sd - d0) ** 2) / (2 * sigma_range**2))
            wgt = ws * wr * sv
            acc += wgt * sd
            weights += wgt
    out = np.where(valid & (weights > 0), acc / np.maximum(weights, 1e-30), 0.0)
    return out


def vertex_map(depth, K: Intrinsics):
    """Backprojection of every valid depth pixel, camera frame."""
    valid = np.isfinite(depth) & (depth > 0)
    u, v = np.meshgrid(np.arange(K.width), np.arange(K.height))
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    verts = np.stack([x, y, depth], axis=-1)
    verts[~valid] = 0.0
    return verts, valid


def normal_map(vertices, valid):
    """Normals from the cross product of central differences, oriented
    toward the camera. A pixel loses its normal when any of its four
    neighbours is invalid."""
    h, w = valid.shape
    n = np.zeros_like(vertices)
    ok = np.zeros_like(valid)
    dx = vertices[1:-1, 2:] - vertices[1:-1, :-2]
    dy = vertices[2:, 1:-1] - vertices[:-2, 1:-1]
    cross = np.cross(dy, dx)
    norm = np.linalg.norm(cross, axis=-1)
    neigh = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
             & valid[1:-1, 1:-1] & (norm > 1e-12))
    with np.errstate(invalid="ignore"):
        unit = cross / norm[..., None]
    n[1:-1, 1:-1][neigh] = unit[neigh]
    ok[1:-1, 1:-1] = neigh
    return n, ok


def downsample_depth(depth, valid):
    """2x2 block average over the valid entries of each block."""
    h, w = depth.shape
    d = np.where(valid, depth, 0.0).reshape(h // 2, 2, w // 2, 2)
    v = valid.reshape(h // 2, 2, w // 2, 2)
    counts = v.sum(axis=(1, 3))
    sums = d.sum(axis=(1, 3))
    out = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return out, counts > 0


def preprocess_frame(depth, K: Intrinsics, levels=PYRAMID_LEVELS,
                     bilateral=True) -> FramePyramid:
    """Bilateral-filtered depth, vertex and normal maps, and a coarse-to-
    fine pyramid built by averaging valid depths. Image dimensions must be
    divisible by 2**(levels-1) * 2."""
    if depth.shape[0] % 2 ** (levels - 1) or depth.shape[1] % 2 ** (levels - 1):
        raise ValueError("depth dimensions must be divisible by the pyramid factor")
    d = bilateral_filter(depth) if bilateral else np.asarray(depth, dtype=np.float64)
    out = []
    valid = np.isfinite(d) & (d > 0)
    for level in range(levels):
        k = K.scaled(level)
        verts, vvalid = vertex_map(np.where(valid, d, 0.0), k)
        norms, nvalid = normal_map(verts, vvalid)
        out.append(PyramidLevel(d, verts, norms, vvalid, nvalid, k))
        if level + 1 < levels:
            d, valid = downsample_depth(d, valid)
    return FramePyramid(levels=out)


@dataclass
class _RefLevel:
    vertices: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    intrinsics: Intrinsics


def _downsample_reference(level: _RefLevel, k: Intrinsics) -> _RefLevel:
    h, w = level.valid.shape
    v = level.valid.reshape(h // 2, 2, w // 2, 2)
    counts = v.sum(axis=(1, 3)).astype(np.float64)
    ok = counts > 0
    verts = np.where(level.valid[..., None], level.vertices, 0.0)
    verts = verts.reshape(h // 2, 2, w // 2, 2, 3).sum(axis=(1, 3))
    norms = np.where(level.valid[..., None], level.normals, 0.0)
    norms = norms.reshape(h // 2, 2, w // 2, 2, 3).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        verts = verts / counts[..., None]
        nl = np.linalg.norm(norms, axis=-1)
        norms = norms / nl[..., None]
    ok = ok & (nl > 1e-12)
    verts[~ok] = 0.0
    norms[~ok] = 0.0
    return _RefLevel(verts, norms, ok, k)


def _associate(ref: _RefLevel, ref_pose_inv: Pose, live: PyramidLevel, T: Pose,
               max_dist, normal_dot_min, edge_limit=EDGE_SPREAD_LIMIT):
    """Projective data association at one level. The reference maps are
    read bilinearly at the continuous projected coordinate (nearest pixel
    where the 2x2 neighbourhood is not fully valid), which keeps the
    reassociation fixed point sub-pixel. Returns live-pixel rows of the
    point-to-plane system plus the nearest reference pixel of each row."""
    lv = live.valid_vertex & live.valid_normal
    pts_l = live.vertices[lv]
    nrm_l = live.normals[lv]
    p_w = pts_l @ T.rotation.T + T.translation
    n_w = nrm_l @ T.rotation.T
    p_r = p_w @ ref_pose_inv.rotation.T + ref_pose_inv.translation

    k = ref.intrinsics
    z = p_r[:, 2]
    ok = z > 1e-9
    zsafe = np.where(ok, z, 1.0)
    uf = k.fx * p_r[:, 0] / zsafe + k.cx
    vf = k.fy * p_r[:, 1] / zsafe + k.cy
    u = np.rint(uf).astype(np.int64)
    v = np.rint(vf).astype(np.int64)
    ok &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    u = np.clip(u, 0, k.width - 1)
    v = np.clip(v, 0, k.height - 1)
    ok &= ref.valid[v, u]

    # bilinear reference lookup where all four neighbours are valid
    u0 = np.clip(np.floor(uf).astype(np.int64), 0, k.width - 2)
    v0 = np.clip(np.floor(vf).astype(np.int64), 0, k.height - 2)
    au = np.clip(uf - u0, 0.0, 1.0)[:, None]
    av = np.clip(vf - v0, 0.0, 1.0)[:, None]
    four_ok = (ref.valid[v0, u0] & ref.valid[v0, u0 + 1]
               & ref.valid[v0 + 1, u0] & ref.valid[v0 + 1, u0 + 1])
    corners = np.stack([ref.vertices[v0, u0], ref.vertices[v0, u0 + 1],
                        ref.vertices[v0 + 1, u0], ref.vertices[v0 + 1, u0 + 1]], axis=1)
    v_r = ((1 - av) * ((1 - au) * corners[:, 0] + au * corners[:, 1])
           + av * ((1 - au) * corners[:, 2] + au * corners[:, 3]))
    n_r = ((1 - av) * ((1 - au) * ref.normals[v0, u0] + au * ref.normals[v0, u0 + 1])
           + av * ((1 - au) * ref.normals[v0 + 1, u0] + au * ref.normals[v0 + 1, u0 + 1]))
    nn = np.linalg.norm(n_r, axis=-1, keepdims=True)
    bilinear = four_ok & (nn[:, 0] > 1e-6)
    n_r = np.where(bilinear[:, None], n_r / np.maximum(nn, 1e-30), ref.normals[v, u])
    v_r = np.where(bilinear[:, None], v_r, ref.vertices[v, u])

    # a correspondence must not straddle a rendered depth edge: silhouette
    # pixels otherwise anchor large wrong-surface residuals
    spread = np.linalg.norm(corners - corners.mean(axis=1, keepdims=True),
                            axis=-1).max(axis=1)
    ok &= four_ok & (spread < edge_limit)

    diff = v_r - p_w
    ok &= np.linalg.norm(diff, axis=-1) < max_dist
    ok &= np.einsum("ij,ij->i", n_r, n_w) > normal_dot_min

    r = np.einsum("ij,ij->i", n_r[ok], diff[ok])
    jac = np.hstack([-n_r[ok], -np.cross(p_w[ok], n_r[ok])])
    return r, jac, u[ok], v[ok], int(lv.sum())


def _solve_gn(jtj, jtr, condition_limit=CONDITION_LIMIT):
    """Gauss-Newton step from the normal equations; None when degenerate."""
    eig = np.linalg.eigvalsh(jtj)
    if eig[0] <= 0 or eig[-1] / eig[0] > condition_limit:
        return None
    return np.linalg.solve(jtj, -jtr)


def icp_track(ref: RenderedMaps, live: FramePyramid, init: Pose,
              iterations=GN_ITERATIONS,
              max_dist=MAX_CORRESPONDENCE_DIST,
              normal_dot_min=NORMAL_DOT_MIN,
              condition_limit=CONDITION_LIMIT) -> TrackingResult:
    """Coarse-to-fine point-to-plane ICP of the live pyramid against the
    layered render, with a final full-resolution pass that partitions the
    normal equations per render target.

    The reference must have been rendered from the init pose; updates are
    left-multiplicative (pose <- exp(step) * pose).
    """
    k0 = live.full.intrinsics
    ref_pose_inv = init.inverse()
    ref_valid = ref.valid & (np.linalg.norm(ref.normals, axis=-1) > 0.5)
    ref_levels = [_RefLevel(ref.vertices, ref.normals, ref_valid, k0)]
    for level in range(1, len(live.levels)):
        ref_levels.append(_downsample_reference(ref_levels[-1],
                                                k0.scaled(level)))

    T = init
    degenerate = False
    level_errors = {}
    for level in range(len(live.levels) - 1, -1, -1):
        # coarse pixels cover more surface, so the depth-edge rejection
        # threshold scales with the level's pixel footprint
        edge_limit = EDGE_SPREAD_LIMIT * 640.0 / ref_levels[level].intrinsics.width
        r, jac, _, _, _ = _associate(ref_levels[level], ref_pose_inv,
                                     live.levels[level], T, max_dist,
                                     normal_dot_min, edge_limit)
        if len(r) < 6:
            if level == 0:
                degenerate = True
            level_errors[level] = []
            continue
        err = float(r @ r)
        errs = [err]
        for _ in range(iterations):
            step = _solve_gn(jac.T @ jac, jac.T @ r, condition_limit)
            if step is None:
                # a singular finest-level system means the frame is lost;
                # a coarse level simply skips its remaining iterations
                if level == 0:
                    degenerate = True
                break
            if np.linalg.norm(step) < 1e-7:
                break
            T_try = se3_exp(step) @ T
            r2, jac2, _, _, _ = _associate(ref_levels[level], ref_pose_inv,
                                           live.levels[level], T_try, max_dist,
                                           normal_dot_min, edge_limit)
            if len(r2) < 6:
                break
            err2 = float(r2 @ r2)
            # keep the energy non-increasing under reassociation; a step
            # that raises it means convergence within sampling noise
            if err2 > err + 1e-12:
                break
            T, r, jac, err = T_try, r2, jac2, err2
            errs.append(err)
        level_errors[level] = errs

    # full-resolution pass at the converged pose, partitioned by target
    edge_limit0 = EDGE_SPREAD_LIMIT * 640.0 / ref_levels[0].intrinsics.width
    r, jac, u, v, live_count = _associate(ref_levels[0], ref_pose_inv,
                                          live.full, T, max_dist,
                                          normal_dot_min, edge_limit0)
    targets = ref.index[v, u]
    per_target = {}
    rendered = dict(ref.pixel_counts)
    for tid in np.unique(targets):
        rows = targets == tid
        jt = jac[rows]
        per_target[int(tid)] = TargetSystem(
            jtj=jt.T @ jt, jtr=jt.T @ r[rows],
            error=float(r[rows] @ r[rows]), count=int(rows.sum()),
            rendered=rendered.get(int(tid), 0))
    level_errors[0] = level_errors.get(0, []) + [float(r @ r)]

    total_error = float(r @ r)
    count = len(r)
    instance_pixels = sum(c for i, c in ref.pixel_counts.items() if i > 0)
    h, w = ref.shape
    return TrackingResult(
        pose=T,
        per_target=per_target,
        icp_rmse=float(np.sqrt(total_error / count)) if count else np.inf,
        valid_fraction=count / live_count if live_count else 0.0,
        instance_coverage=instance_pixels / float(h * w),
        valid_count=count,
        global_jtj=jac.T @ jac,
        global_jtr=jac.T @ r,
        degenerate=degenerate,
        level_errors=level_errors,
    )


def tracking_lost(result: TrackingResult,
                  lost_rmse=LOST_RMSE,
                  coverage_threshold=LOST_INSTANCE_COVERAGE,
                  min_valid_fraction=LOST_MIN_VALID_FRACTION) -> bool:
    """Lost when the global RMSE blows up, or instance volumes cover at
    least a tenth of the image yet under half the pixels track validly."""
    if result.degenerate:
        return True
    if result.icp_rmse > lost_rmse:
        return True
    return (result.instance_coverage >= coverage_threshold
            and result.valid_fraction < min_valid_fraction)
