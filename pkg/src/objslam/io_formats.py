"""Dataset ingestion (TUM RGB-D layout), trajectory files, ATE evaluation,
and the little-endian 16-bit raster used for masks and debug dumps."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import Pose, quat_from_rotation, rotation_from_quat

TUM_DEPTH_SCALE = 5000.0
ASSOCIATION_MAX_DT = 0.02

U16_MAGIC = b"U16R"


@dataclass
class Frame:
    """One RGB-D observation."""

    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray


@dataclass
class TrajectoryRecord:
    timestamps: np.ndarray = field(default_factory=lambda: np.empty(0))
    translations: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    quaternions: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        if len(self.timestamps) and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if len(self.quaternions):
            norms = np.linalg.norm(self.quaternions, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("quaternions must be unit norm")

    def __len__(self):
        return len(self.timestamps)

    @staticmethod
    def from_poses(timestamps, poses) -> "TrajectoryRecord":
        return TrajectoryRecord(
            timestamps=np.asarray(timestamps, dtype=np.float64),
            translations=np.array([p.translation for p in poses]).reshape(-1, 3),
            quaternions=np.array([quat_from_rotation(p.rotation) for p in poses]).reshape(-1, 4),
        )

    def pose(self, i: int) -> Pose:
        return Pose(rotation_from_quat(self.quaternions[i]), self.translations[i])


def write_trajectory(record: TrajectoryRecord, path):
    """One line per pose: "timestamp tx ty tz qx qy qz qw", 6 decimals."""
    with open(path, "w") as f:
        for i in range(len(record)):
            vals = [record.timestamps[i], *record.translations[i], *record.quaternions[i]]
            f.write(" ".join(f"{v:.6f}" for v in vals) + "\n")


def read_trajectory(path) -> TrajectoryRecord:
    ts, t, q = [], [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            vals = [float(x) for x in parts]
            ts.append(vals[0])
            t.append(vals[1:4])
            qn = np.asarray(vals[4:8])
            q.append(qn / np.linalg.norm(qn))
    if not ts:
        return TrajectoryRecord()
    return TrajectoryRecord(np.asarray(ts), np.asarray(t), np.asarray(q))


def _match_timestamps(a, b, max_dt=ASSOCIATION_MAX_DT):
    """Nearest-neighbour pairing of two sorted timestamp arrays."""
    pairs = []
    for i, t in enumerate(a):
        j = int(np.searchsorted(b, t))
        best, best_dt = None, max_dt
        for cand in (j - 1, j):
            if 0 <= cand < len(b):
                dt = abs(b[cand] - t)
                if dt <= best_dt:
                    best, best_dt = cand, dt
        if best is not None:
            pairs.append((i, best))
    return pairs


@dataclass
class AteResult:
    rmse: float
    pairs: int
    rotation_rmse_deg: float


def ate_details(estimate: TrajectoryRecord, truth: TrajectoryRecord,
                max_dt=ASSOCIATION_MAX_DT) -> AteResult:
    """Absolute trajectory error: timestamp association, least-squares
    rigid alignment of the estimated onto the true translations, RMS of
    the residual norms. Rotation error is reported as diagnostics only."""
    pairs = _match_timestamps(estimate.timestamps, truth.timestamps, max_dt)
    if len(pairs) < 3:
        raise ValueError("too few matched pose pairs for ATE")
    e = estimate.translations[[i for i, _ in pairs]]
    g = truth.translations[[j for _, j in pairs]]
    ce = e.mean(axis=0)
    cg = g.mean(axis=0)
    H = (e - ce).T @ (g - cg)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cg - R @ ce
    resid = (e @ R.T + t) - g
    rmse = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))

    angles = []
    for i, j in pairs:
        re = R @ rotation_from_quat(estimate.quaternions[i])
        rg = rotation_from_quat(truth.quaternions[j])
        c = np.clip(0.5 * (np.trace(re.T @ rg) - 1.0), -1.0, 1.0)
        angles.append(np.degrees(np.arccos(c)))
    return AteResult(rmse=rmse, pairs=len(pairs),
                     rotation_rmse_deg=float(np.sqrt(np.mean(np.square(angles)))))


def ate_rmse(estimate: TrajectoryRecord, truth: TrajectoryRecord,
             max_dt=ASSOCIATION_MAX_DT) -> float:
    return ate_details(estimate, truth, max_dt).rmse


# ---------------------------------------------------------------------------
# 16-bit raster: magic "U16R", u32 LE width, u32 LE height, then row-major
# little-endian uint16 payload

def write_u16_raster(path, image):
    img = np.ascontiguousarray(image, dtype="<u2")
    with open(path, "wb") as f:
        f.write(U16_MAGIC)
        f.write(struct.pack("<II", img.shape[1], img.shape[0]))
        f.write(img.tobytes())


def read_u16_raster(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != U16_MAGIC:
            raise ValueError(f"{path}: not a U16R raster")
        w, h = struct.unpack("<II", f.read(8))
        payload = f.read(2 * w * h)
        if len(payload) != 2 * w * h:
            raise ValueError(f"{path}: truncated raster payload")
        return np.frombuffer(payload, dtype="<u2").reshape(h, w).copy()


# ---------------------------------------------------------------------------
# TUM RGB-D directory layout

def _read_file_list(path):
    entries = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            entries.append((float(parts[0]), parts[1]))
    return entries


class TumSequence:
    """Streaming reader for the benchmark layout: rgb.txt / depth.txt list
    timestamped image paths; rgb and depth are paired by nearest timestamp
    within the association window and unmatched frames are skipped."""

    def __init__(self, directory, max_dt=ASSOCIATION_MAX_DT):
        self.directory = str(directory)
        rgb_list = _read_file_list(os.path.join(self.directory, "rgb.txt"))
        depth_list = _read_file_list(os.path.join(self.directory, "depth.txt"))
        rgb_ts = np.array([t for t, _ in rgb_list])
        depth_ts = np.array([t for t, _ in depth_list])
        pairs = _match_timestamps(rgb_ts, depth_ts, max_dt)
        used = set()
        self.pairs = []
        for i, j in pairs:
            if j in used:
                continue
            used.add(j)
            self.pairs.append((rgb_list[i], depth_list[j]))
        self.skipped = len(rgb_list) - len(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def frames(self):
        for k, ((ts, rgb_path), (_, depth_path)) in enumerate(self.pairs):
            rgb = cv2.imread(os.path.join(self.directory, rgb_path), cv2.IMREAD_COLOR)
            if rgb is None:
                raise IOError(f"cannot decode {rgb_path}")
            raw = cv2.imread(os.path.join(self.directory, depth_path),
                             cv2.IMREAD_UNCHANGED)
            if raw is None:
                raise IOError(f"cannot decode {depth_path}")
            depth = raw.astype(np.float64) / TUM_DEPTH_SCALE
            yield Frame(index=k, timestamp=ts, rgb=rgb[..., ::-1], depth=depth)


def read_tum_rgbd(directory, max_dt=ASSOCIATION_MAX_DT) -> TumSequence:
    return TumSequence(directory, max_dt)


def export_tum_sequence(directory, frames, gt_timestamps=None, gt_poses=None):
    """Write frames (and optionally ground truth) in the TUM layout."""
    directory = str(directory)
    os.makedirs(os.path.join(directory, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(directory, "depth"), exist_ok=True)
    rgb_lines, depth_lines = [], []
    for fr in frames:
        name = f"{fr.timestamp:.6f}.png"
        cv2.imwrite(os.path.join(directory, "rgb", name), fr.rgb[..., ::-1])
        raw = np.clip(np.round(fr.depth * TUM_DEPTH_SCALE), 0, 65535).astype(np.uint16)
        cv2.imwrite(os.path.join(directory, "depth", name), raw)
        rgb_lines.append(f"{fr.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{fr.timestamp:.6f} depth/{name}")
    with open(os.path.join(directory, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    with open(os.path.join(directory, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    if gt_poses is not None:
        record = TrajectoryRecord.from_poses(gt_timestamps, gt_poses)
        write_trajectory(record, os.path.join(directory, "groundtruth.txt"))
