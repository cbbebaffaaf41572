"""Wide-baseline relocalisation: per-object keypoint snapshots, rigid
3D-3D RANSAC per object, then joint refinement over all matched objects."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Pose

SNAPSHOT_MIN_ANGLE_DEG = 15.0
CLASS_GATE_DOT = 0.6
OBJECT_MIN_INLIERS = 5
OBJECT_INLIER_DIST = 0.02
JOINT_MIN_INLIERS = 50
JOINT_INLIER_DIST = 0.05
RANSAC_ITERATIONS = 200


class DegenerateGeometry(ValueError):
    """Correspondence set is collinear or too small for a rigid fit."""


@dataclass
class FeatureSet:
    """Detected keypoints of one frame: pixel positions, camera-frame 3D
    points (valid depth only), and matcher-opaque descriptors."""

    pixels: np.ndarray
    points: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.points)


class FeatureInterface:
    """Pluggable detector/descriptor pair. Implementations must be
    deterministic for fixed inputs."""

    def detect(self, rgb, depth, K, frame_index=None) -> FeatureSet:
        raise NotImplementedError

    def match(self, desc_a, desc_b):
        """Index pairs (i, j) of corresponding descriptors."""
        raise NotImplementedError


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


class HarrisBinaryFeatures(FeatureInterface):
    """Harris-score corner maxima with a binary intensity-comparison patch
    descriptor, matched by Hamming distance under a ratio test."""

    def __init__(self, threshold=10.0, max_features=500, patch=15,
                 n_bits=256, ratio=0.8, seed=12345):
        self.threshold = threshold
        self.max_features = max_features
        self.patch = patch
        self.ratio = ratio
        rng = np.random.default_rng(seed)
        half = patch // 2
        self.offsets = rng.integers(-half, half + 1, size=(n_bits, 4))

    def detect(self, rgb, depth, K, frame_index=None) -> FeatureSet:
        gray = np.asarray(rgb, dtype=np.float64).mean(axis=-1)
        ix = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
        iy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
        sxx = ndimage.gaussian_filter(ix * ix, 2.0)
        syy = ndimage.gaussian_filter(iy * iy, 2.0)
        sxy = ndimage.gaussian_filter(ix * iy, 2.0)
        response = sxx * syy - sxy**2 - 0.06 * (sxx + syy) ** 2
        maxima = (response == ndimage.maximum_filter(response, size=5))
        maxima &= response > self.threshold
        half = self.patch // 2
        maxima[:half + 1, :] = maxima[-half - 1:, :] = False
        maxima[:, :half + 1] = maxima[:, -half - 1:] = False
        v, u = np.nonzero(maxima)
        if len(u) == 0:
            return FeatureSet(np.empty((0, 2)), np.empty((0, 3)),
                              np.empty((0, 32), dtype=np.uint8))
        order = np.argsort(-response[v, u], kind="stable")[:self.max_features]
        v, u = v[order], u[order]
        d = np.asarray(depth, dtype=np.float64)[v, u]
        ok = np.isfinite(d) & (d > 0)
        v, u, d = v[ok], u[ok], d[ok]
        points = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)
        desc = self._describe(gray, u, v)
        return FeatureSet(np.stack([u, v], axis=-1).astype(np.float64), points, desc)

    def _describe(self, gray, u, v):
        a = gray[v[:, None] + self.offsets[None, :, 1],
                 u[:, None] + self.offsets[None, :, 0]]
        b = gray[v[:, None] + self.offsets[None, :, 3],
                 u[:, None] + self.offsets[None, :, 2]]
        bits = (a > b).astype(np.uint8)
        return np.packbits(bits, axis=1)

    def match(self, desc_a, desc_b):
        if len(desc_a) == 0 or len(desc_b) == 0:
            return np.empty((0, 2), dtype=int)
        xor = np.bitwise_xor(desc_a[:, None, :], desc_b[None, :, :])
        dist = _POPCOUNT[xor].sum(axis=-1).astype(np.float64)
        pairs = []
        for i in range(len(desc_a)):
            row = dist[i]
            j = int(np.argmin(row))
            best = row[j]
            row2 = np.delete(row, j)
            second = row2.min() if len(row2) else np.inf
            if best < self.ratio * second:
                pairs.append((i, j))
        return np.asarray(pairs, dtype=int).reshape(-1, 2)


class OracleFeatures(FeatureInterface):
    """Ground-truth landmark features for deterministic tests: fixed 3D
    points on the synthetic primitives, identified by landmark id."""

    def __init__(self, landmarks_world, landmark_ids, gt_poses, occlusion_tol=0.02):
        self.landmarks = np.asarray(landmarks_world, dtype=np.float64)
        self.ids = np.asarray(landmark_ids)
        self.gt_poses = gt_poses
        self.occlusion_tol = occlusion_tol

    def detect(self, rgb, depth, K, frame_index=None) -> FeatureSet:
        pose = self.gt_poses[frame_index]
        p_c = pose.inverse().apply(self.landmarks)
        ok = p_c[:, 2] > 1e-6
        z = np.where(ok, p_c[:, 2], 1.0)
        u = np.rint(K.fx * p_c[:, 0] / z + K.cx).astype(int)
        v = np.rint(K.fy * p_c[:, 1] / z + K.cy).astype(int)
        ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        uc = np.clip(u, 0, K.width - 1)
        vc = np.clip(v, 0, K.height - 1)
        d = np.asarray(depth, dtype=np.float64)[vc, uc]
        ok &= np.isfinite(d) & (d > 0) & (np.abs(d - p_c[:, 2]) < self.occlusion_tol)
        return FeatureSet(
            pixels=np.stack([u[ok], v[ok]], axis=-1).astype(np.float64),
            points=p_c[ok],
            descriptors=self.ids[ok])

    def match(self, desc_a, desc_b):
        if len(desc_a) == 0 or len(desc_b) == 0:
            return np.empty((0, 2), dtype=int)
        pos = {int(d): j for j, d in enumerate(desc_b)}
        pairs = [(i, pos[int(d)]) for i, d in enumerate(desc_a) if int(d) in pos]
        return np.asarray(pairs, dtype=int).reshape(-1, 2)


# ---------------------------------------------------------------------------
# snapshots

@dataclass
class Snapshot:
    object_id: int
    camera_in_object: np.ndarray
    points: np.ndarray        # (N, 3) object frame
    descriptors: np.ndarray
    class_dist: np.ndarray

    @property
    def view_direction(self):
        n = np.linalg.norm(self.camera_in_object)
        return self.camera_in_object / n if n > 0 else self.camera_in_object


class SnapshotStore:
    def __init__(self):
        self.by_object: dict[int, list] = {}

    def snapshots(self, object_id: int):
        return self.by_object.get(object_id, [])

    def object_ids(self):
        return sorted(self.by_object)

    def drop_object(self, object_id: int):
        self.by_object.pop(object_id, None)

    def apply_frame_change(self, object_id: int, frame_change: Pose):
        """Keep snapshot geometry consistent when a volume is recentred."""
        for snap in self.by_object.get(object_id, []):
            snap.points = frame_change.apply(snap.points)
            snap.camera_in_object = frame_change.apply(snap.camera_in_object)


def maybe_add_snapshot(store: SnapshotStore, object_id: int, camera_pose: Pose,
                       object_pose: Pose, features: FeatureSet, class_dist,
                       min_angle_deg=SNAPSHOT_MIN_ANGLE_DEG) -> bool:
    """Store a snapshot unless one already exists within the minimum view
    angle. Keypoints are transformed into the object frame."""
    if len(features) == 0:
        return False
    cam_in_obj = (object_pose.inverse() @ camera_pose).translation
    norm = np.linalg.norm(cam_in_obj)
    if norm < 1e-9:
        return False
    direction = cam_in_obj / norm
    threshold = np.cos(np.deg2rad(min_angle_deg))
    for snap in store.by_object.get(object_id, []):
        if float(direction @ snap.view_direction) > threshold:
            return False
    t_oc = object_pose.inverse() @ camera_pose
    store.by_object.setdefault(object_id, []).append(Snapshot(
        object_id=object_id,
        camera_in_object=cam_in_obj,
        points=t_oc.apply(features.points),
        descriptors=np.array(features.descriptors),
        class_dist=np.asarray(class_dist, dtype=np.float64).copy(),
    ))
    return True


# ---------------------------------------------------------------------------
# rigid 3D-3D estimation

def estimate_rigid_3d3d(src, dst) -> Pose:
    """Least-squares rigid transform with dst ~ R @ src + t: centroid
    alignment plus rotation from the SVD of the cross-covariance,
    reflection-corrected. Raises DegenerateGeometry for collinear sets."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or src.shape != dst.shape:
        raise DegenerateGeometry("need at least 3 correspondences")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= max(1e-9 * S[0], 1e-15):
        raise DegenerateGeometry("correspondences are collinear")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cd - R @ cs)


def ransac_rigid(src, dst, inlier_dist, min_inliers,
                 iterations=RANSAC_ITERATIONS, rng=None):
    """Rigid RANSAC with 3-point minimal samples, inlier-count
    maximisation and a least-squares refit on the winning inlier set.
    Returns (pose, inlier_mask) or None."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    if n < 3:
        return None
    if rng is None:
        rng = np.random.default_rng(0)
    best_count = 0
    best_mask = None
    for _ in range(iterations):
        idx = rng.choice(n, size=3, replace=False)
        try:
            model = estimate_rigid_3d3d(src[idx], dst[idx])
        except DegenerateGeometry:
            continue
        err = np.linalg.norm(dst - model.apply(src), axis=1)
        mask = err < inlier_dist
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < max(min_inliers, 3):
        return None
    try:
        refined = estimate_rigid_3d3d(src[best_mask], dst[best_mask])
    except DegenerateGeometry:
        return None
    final_mask = np.linalg.norm(dst - refined.apply(src), axis=1) < inlier_dist
    if int(final_mask.sum()) < min_inliers:
        return None
    return refined, final_mask


# ---------------------------------------------------------------------------
# relocalisation

@dataclass
class RelocResult:
    success: bool
    pose: Pose | None = None
    reason: str | None = None
    matched_objects: list = field(default_factory=list)
    joint_inliers: int = 0


def relocalize(store: SnapshotStore, features: FeatureSet, volume_table: dict,
               matcher: FeatureInterface, rng=None,
               detection_dist=None,
               class_gate=CLASS_GATE_DOT,
               object_min_inliers=OBJECT_MIN_INLIERS,
               object_inlier_dist=OBJECT_INLIER_DIST,
               joint_min_inliers=JOINT_MIN_INLIERS,
               joint_inlier_dist=JOINT_INLIER_DIST,
               iterations=RANSAC_ITERATIONS) -> RelocResult:
    """Per-object 3D-3D RANSAC against snapshot keypoints, then a joint
    RANSAC over every matched object's correspondences for the camera pose.

    volume_table maps object id to (world pose, class distribution). When
    detection_dist is None (no fresh detections while lost) the class gate
    is skipped and every object with snapshots is a candidate.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    candidates = []
    for oid in store.object_ids():
        if oid not in volume_table:
            continue
        pose, class_dist = volume_table[oid]
        if detection_dist is not None:
            if float(np.dot(class_dist, detection_dist)) <= class_gate:
                continue
        candidates.append(oid)
    if not candidates or len(features) == 0:
        return RelocResult(False, reason="no-candidates")

    matched = []
    pool_src, pool_dst = [], []
    for oid in candidates:
        snaps = store.snapshots(oid)
        pts = np.vstack([s.points for s in snaps])
        descs = np.concatenate([s.descriptors for s in snaps])
        pairs = matcher.match(features.descriptors, descs)
        if len(pairs) < 3:
            continue
        src = features.points[pairs[:, 0]]
        dst_obj = pts[pairs[:, 1]]
        fit = ransac_rigid(src, dst_obj, object_inlier_dist,
                           object_min_inliers, iterations, rng)
        if fit is None:
            continue
        matched.append(oid)
        world_pose = volume_table[oid][0]
        pool_src.append(src)
        pool_dst.append(world_pose.apply(dst_obj))
    if not matched:
        return RelocResult(False, reason="per-object-fail")

    src = np.vstack(pool_src)
    dst = np.vstack(pool_dst)
    fit = ransac_rigid(src, dst, joint_inlier_dist, joint_min_inliers,
                       iterations, rng)
    if fit is None:
        return RelocResult(False, reason="joint-fail", matched_objects=matched)
    pose, inliers = fit
    return RelocResult(True, pose=pose, matched_objects=matched,
                       joint_inliers=int(inliers.sum()))
