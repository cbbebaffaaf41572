"""Synthetic RGB-D generation: analytic primitive scenes, ground-truth
trajectories, exact depth/instance rendering, and signed-distance oracles
for evaluating the reconstruction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (Intrinsics, Pose, pixel_rays, quat_from_rotation,
                       rotation_from_quat, so3_exp, so3_log)
from .raycast import RenderedMaps

_LIGHT_DIR = np.array([0.3, -0.5, -0.8]) / np.linalg.norm([0.3, -0.5, -0.8])


@dataclass
class Primitive:
    """One analytic shape. dimensions: sphere -> (radius,), box -> half
    extents (3,), plane -> unused (the plane is the local z=0 plane with
    normal +z)."""

    id: int
    shape: str
    pose: Pose
    dimensions: np.ndarray
    label: int
    detectable: bool = True

    def __post_init__(self):
        self.dimensions = np.atleast_1d(np.asarray(self.dimensions, dtype=np.float64))
        if self.shape not in ("sphere", "box", "plane"):
            raise ValueError(f"unknown primitive shape: {self.shape}")
        if self.shape != "plane" and np.any(self.dimensions <= 0):
            raise ValueError("primitive dimensions must be positive")

    def sdf(self, points):
        """Exact signed distance, vectorised over (N, 3) world points."""
        p = self.pose.inverse().apply(np.atleast_2d(points))
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - self.dimensions[0]
        if self.shape == "box":
            q = np.abs(p) - self.dimensions[:3]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        return p[:, 2]

    def intersect(self, origins, dirs):
        """Smallest positive ray parameter per ray, inf where missed."""
        inv = self.pose.inverse()
        o = inv.apply(origins)
        d = inv.rotate(dirs)
        t = np.full(len(d), np.inf)
        if self.shape == "sphere":
            r = self.dimensions[0]
            b = np.einsum("ij,ij->i", o, d)
            c = np.einsum("ij,ij->i", o, o) - r * r
            disc = b * b - c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            near = np.where(t0 > 0, t0, t1)
            hit = ok & (near > 0)
            t[hit] = near[hit]
        elif self.shape == "box":
            h = self.dimensions[:3]
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (-h - o) / d
                tb = (h - o) / d
            lo = np.fmin(ta, tb)
            hi = np.fmax(ta, tb)
            parallel_miss = (np.abs(d) < 1e-15) & (np.abs(o) > h)
            lo[np.abs(d) < 1e-15] = -np.inf
            hi[np.abs(d) < 1e-15] = np.inf
            t_enter = lo.max(axis=-1)
            t_exit = hi.min(axis=-1)
            near = np.where(t_enter > 0, t_enter, t_exit)
            hit = (t_enter <= t_exit) & (near > 0) & ~parallel_miss.any(axis=-1)
            t[hit] = near[hit]
        else:
            dz = d[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                tp = -o[:, 2] / dz
            hit = (np.abs(dz) > 1e-15) & (tp > 0)
            t[hit] = tp[hit]
        return t

    def normal_at(self, points):
        """Outward unit normals at (N, 3) world surface points."""
        p = self.pose.inverse().apply(np.atleast_2d(points))
        if self.shape == "sphere":
            n = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
        elif self.shape == "box":
            q = np.abs(p) / self.dimensions[:3]
            n = np.zeros_like(p)
            axis = q.argmax(axis=-1)
            n[np.arange(len(p)), axis] = np.sign(p[np.arange(len(p)), axis])
        else:
            n = np.tile([0.0, 0.0, 1.0], (len(p), 1))
        return n @ self.pose.rotation.T


@dataclass
class SceneSpec:
    primitives: list
    label_set: list

    def __post_init__(self):
        ids = [p.id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise ValueError("primitive ids must be unique")

    def by_id(self, pid: int) -> Primitive:
        for p in self.primitives:
            if p.id == pid:
                return p
        raise KeyError(pid)


def analytic_sdf(scene: SceneSpec, points):
    """Signed distance to the union of all primitives."""
    p = np.atleast_2d(points)
    d = np.full(len(p), np.inf)
    for prim in scene.primitives:
        d = np.minimum(d, prim.sdf(p))
    return d if np.asarray(points).ndim > 1 else float(d[0])


@dataclass
class DepthNoise:
    """Gaussian depth noise with sigma(d) = base + quad * d^2, plus
    millimetre quantisation."""

    base: float = 0.0
    quad: float = 0.0
    quantise_mm: bool = True


def render_synth(scene: SceneSpec, pose: Pose, K: Intrinsics,
                 noise: DepthNoise | None = None, rng=None):
    """Exact per-pixel ray casting. Returns (depth, rgb, index) where depth
    is the camera-frame z in metres (0 = no hit) and index holds primitive
    ids (0 = no hit)."""
    dirs_cam = pixel_rays(K).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.tile(pose.translation, (len(dirs), 1))

    best_t = np.full(len(dirs), np.inf)
    index = np.zeros(len(dirs), dtype=np.int32)
    for prim in scene.primitives:
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        index[closer] = prim.id

    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t * dirs_cam[:, 2], 0.0)

    rgb = np.zeros((len(dirs), 3), dtype=np.uint8)
    points = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    for prim in scene.primitives:
        sel = index == prim.id
        if not sel.any():
            continue
        n = prim.normal_at(points[sel])
        shade = 0.25 + 0.75 * np.clip(-n @ _LIGHT_DIR, 0.0, 1.0)
        base = _primitive_colour(prim.id)
        rgb[sel] = np.clip(shade[:, None] * base[None, :], 0, 255).astype(np.uint8)

    if noise is not None and (noise.base > 0 or noise.quad > 0 or noise.quantise_mm):
        if rng is None:
            rng = np.random.default_rng(0)
        sigma = noise.base + noise.quad * depth**2
        jitter = np.where(hit, rng.normal(0.0, 1.0, len(depth)) * sigma, 0.0)
        depth = np.where(hit, depth + jitter, 0.0)
        if noise.quantise_mm:
            depth = np.round(depth * 1000.0) / 1000.0
        depth = np.maximum(depth, 0.0)

    h, w = K.height, K.width
    return depth.reshape(h, w), rgb.reshape(h, w, 3), index.reshape(h, w)


def _primitive_colour(pid: int) -> np.ndarray:
    rng = np.random.default_rng(1000 + pid)
    return rng.integers(64, 255, 3).astype(np.float64)


def render_reference_maps(scene: SceneSpec, pose: Pose, K: Intrinsics) -> RenderedMaps:
    """Ground-truth rendered maps (world-frame vertices/normals, exact ray
    lengths), shaped like the TSDF raycaster output for oracle tests."""
    dirs_cam = pixel_rays(K).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.tile(pose.translation, (len(dirs), 1))
    best_t = np.full(len(dirs), np.inf)
    index = np.full(len(dirs), -1, dtype=np.int32)
    for prim in scene.primitives:
        t = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        index[closer] = prim.id
    hit = np.isfinite(best_t)
    points = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    normals = np.zeros_like(points)
    for prim in scene.primitives:
        sel = index == prim.id
        if sel.any():
            normals[sel] = prim.normal_at(points[sel])
    # report the visible side: normals face the camera
    flip = np.einsum("ij,ij->i", normals, dirs) > 0
    normals[flip] *= -1.0
    h, w = K.height, K.width
    ids, counts = np.unique(index[hit], return_counts=True)
    return RenderedMaps(
        depth=np.where(hit, best_t, np.nan).reshape(h, w),
        vertices=points.reshape(h, w, 3),
        normals=normals.reshape(h, w, 3),
        index=np.where(hit, index, -1).reshape(h, w).astype(np.int32),
        valid=hit.reshape(h, w),
        pixel_counts={int(i): int(c) for i, c in zip(ids, counts)},
    )


@dataclass
class TrajectorySpec:
    """Keyframed camera path with linear translation and geodesic rotation
    interpolation, plus the per-frame odometry noise magnitudes applied by
    the pipeline's drift simulation."""

    times: np.ndarray
    poses: list
    sigma_t: float = 0.0
    sigma_r: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe timestamps must be strictly increasing")

    def pose_at(self, t: float) -> Pose:
        ts = self.times
        if t <= ts[0]:
            return self.poses[0]
        if t >= ts[-1]:
            return self.poses[-1]
        i = int(np.searchsorted(ts, t, side="right")) - 1
        a, b = self.poses[i], self.poses[i + 1]
        s = (t - ts[i]) / (ts[i + 1] - ts[i])
        trans = (1 - s) * a.translation + s * b.translation
        w = so3_log(a.rotation.T @ b.rotation)
        rot = a.rotation @ so3_exp(s * w)
        return Pose(rot, trans)

    def frame_poses(self, n_frames: int, fps: float = 30.0):
        """(timestamps, poses) sampled uniformly over the keyframe span."""
        span = self.times[-1] - self.times[0]
        ts = self.times[0] + span * np.arange(n_frames) / max(n_frames - 1, 1)
        stamps = np.arange(n_frames) / fps
        return stamps, [self.pose_at(t) for t in ts]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose with +z toward the target and +y roughly opposite up."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    y = -np.asarray(up, dtype=np.float64)
    x = np.cross(y, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def default_intrinsics(width=160, height=120) -> Intrinsics:
    f = 0.85 * width
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                      width=width, height=height)


LOOP_PRESETS = {
    "loop-small": dict(n_frames=300, n_objects=10, radius=3.0, height=1.7,
                       table_radius=1.05, loops=2),
    "loop-tiny": dict(n_frames=60, n_objects=4, radius=3.2, height=1.9,
                      table_radius=0.9, loops=2),
}


def loop_sequence(preset: str, seed: int = 0, sigma_t: float = 0.0, sigma_r: float = 0.0):
    """Deterministic tabletop scene plus a trajectory circling it, ending
    where it started so the second pass re-observes the first loop's
    objects."""
    if preset not in LOOP_PRESETS:
        raise KeyError(f"unknown preset: {preset}")
    cfg = LOOP_PRESETS[preset]
    rng = np.random.default_rng(seed)

    labels = ["ball", "crate", "cone", "mug", "block", "floor"]
    prims = [Primitive(id=1, shape="plane", pose=Pose(), dimensions=np.array([1.0]),
                       label=labels.index("floor"), detectable=False)]
    n = cfg["n_objects"]
    for i in range(n):
        angle = 2 * np.pi * i / n + rng.uniform(-0.1, 0.1)
        rad = cfg["table_radius"] * rng.uniform(0.6, 1.0)
        cx, cy = rad * np.cos(angle), rad * np.sin(angle)
        if i % 2 == 0:
            r = rng.uniform(0.20, 0.28)
            prims.append(Primitive(
                id=i + 2, shape="sphere", pose=Pose(np.eye(3), [cx, cy, r]),
                dimensions=np.array([r]), label=rng.integers(0, 5)))
        else:
            h = rng.uniform(0.17, 0.26, 3)
            yaw = rng.uniform(0, np.pi)
            rot = so3_exp([0, 0, yaw])
            prims.append(Primitive(
                id=i + 2, shape="box", pose=Pose(rot, [cx, cy, h[2]]),
                dimensions=h, label=rng.integers(0, 5)))
    scene = SceneSpec(primitives=prims, label_set=labels)

    keys = []
    n_keys = 8 * cfg["loops"] + 1
    for i in range(n_keys):
        theta = 2 * np.pi * cfg["loops"] * i / (n_keys - 1)
        eye = np.array([cfg["radius"] * np.cos(theta),
                        cfg["radius"] * np.sin(theta),
                        cfg["height"]])
        keys.append(look_at(eye, np.array([0.0, 0.0, 0.3])))
    traj = TrajectorySpec(times=np.arange(n_keys, dtype=np.float64),
                          poses=keys, sigma_t=sigma_t, sigma_r=sigma_r)
    return scene, traj


def scene_landmarks(scene: SceneSpec, per_primitive: int = 40, seed: int = 7):
    """Stable surface points with unique ids, used by the oracle feature
    source. Returns (points (N,3) world, landmark ids, primitive ids)."""
    rng = np.random.default_rng(seed)
    pts, lids, pids = [], [], []
    next_id = 0
    for prim in scene.primitives:
        if not prim.detectable:
            continue
        if prim.shape == "sphere":
            d = rng.normal(size=(per_primitive, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            local = d * prim.dimensions[0]
        elif prim.shape == "box":
            h = prim.dimensions[:3]
            local = rng.uniform(-1, 1, (per_primitive, 3)) * h
            axis = rng.integers(0, 3, per_primitive)
            sign = rng.choice([-1.0, 1.0], per_primitive)
            local[np.arange(per_primitive), axis] = sign * h[axis]
        else:
            continue
        pts.append(prim.pose.apply(local))
        lids.extend(range(next_id, next_id + per_primitive))
        pids.extend([prim.id] * per_primitive)
        next_id += per_primitive
    if not pts:
        return np.empty((0, 3)), np.empty(0, dtype=int), np.empty(0, dtype=int)
    return np.vstack(pts), np.asarray(lids), np.asarray(pids)


class SynthFrameSource:
    """Frame stream rendered on the fly from a scene and trajectory;
    deterministic for a fixed seed."""

    def __init__(self, scene: SceneSpec, traj: TrajectorySpec, K: Intrinsics,
                 n_frames: int, fps: float = 30.0,
                 depth_noise: DepthNoise | None = None, seed: int = 0):
        self.scene = scene
        self.trajectory = traj
        self.intrinsics = K
        self.fps = fps
        self.depth_noise = depth_noise
        self.seed = seed
        self.timestamps, self.gt_poses = traj.frame_poses(n_frames, fps)

    def __len__(self):
        return len(self.gt_poses)

    def frames(self):
        from .io_formats import Frame

        rng = np.random.default_rng([self.seed, 77])
        for k, (ts, pose) in enumerate(zip(self.timestamps, self.gt_poses)):
            depth, rgb, _ = render_synth(self.scene, pose, self.intrinsics,
                                         noise=self.depth_noise, rng=rng)
            yield Frame(index=k, timestamp=float(ts), rgb=rgb, depth=depth)

    def ground_truth(self):
        from .io_formats import TrajectoryRecord

        return TrajectoryRecord.from_poses(self.timestamps, self.gt_poses)


# ---------------------------------------------------------------------------
# human-editable spec files

def save_scene(scene: SceneSpec, path):
    """Line format: "labels a b c" then per primitive
    "primitive id shape label detectable tx ty tz qx qy qz qw dims..."."""
    with open(path, "w") as f:
        f.write("# synthetic scene\n")
        f.write("labels " + " ".join(scene.label_set) + "\n")
        for p in scene.primitives:
            q = [float(x) for x in quat_from_rotation(p.pose.rotation)]
            t = [float(x) for x in p.pose.translation]
            dims = " ".join(repr(float(x)) for x in p.dimensions)
            f.write(f"primitive {p.id} {p.shape} {p.label} {int(p.detectable)} "
                    f"{t[0]!r} {t[1]!r} {t[2]!r} "
                    f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} {dims}\n")


def load_scene(path) -> SceneSpec:
    labels, prims = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "labels":
                labels = parts[1:]
            elif parts[0] == "primitive":
                pid, shape, label, det = int(parts[1]), parts[2], int(parts[3]), bool(int(parts[4]))
                vals = [float(x) for x in parts[5:]]
                pose = Pose(rotation_from_quat(vals[3:7]), vals[:3])
                prims.append(Primitive(id=pid, shape=shape, pose=pose,
                                       dimensions=np.asarray(vals[7:]), label=label,
                                       detectable=det))
    return SceneSpec(primitives=prims, label_set=labels)


def save_trajectory_spec(traj: TrajectorySpec, path):
    """Line format: "noise sigma_t sigma_r" then per keyframe
    "keyframe t tx ty tz qx qy qz qw"."""
    with open(path, "w") as f:
        f.write("# camera trajectory\n")
        f.write(f"noise {float(traj.sigma_t)!r} {float(traj.sigma_r)!r}\n")
        for t, p in zip(traj.times, traj.poses):
            q = [float(x) for x in quat_from_rotation(p.rotation)]
            tr = [float(x) for x in p.translation]
            f.write(f"keyframe {float(t)!r} {tr[0]!r} {tr[1]!r} {tr[2]!r} "
                    f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n")


def load_trajectory_spec(path) -> TrajectorySpec:
    times, poses = [], []
    sigma_t = sigma_r = 0.0
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "noise":
                sigma_t, sigma_r = float(parts[1]), float(parts[2])
            elif parts[0] == "keyframe":
                vals = [float(x) for x in parts[1:]]
                times.append(vals[0])
                poses.append(Pose(rotation_from_quat(vals[4:8]), vals[1:4]))
    return TrajectorySpec(times=np.asarray(times), poses=poses,
                          sigma_t=sigma_t, sigma_r=sigma_r)
