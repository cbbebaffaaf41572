"""Per-frame instance detection providers: ground-truth synthetic masks
with configurable corruption, and precomputed mask files."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .association import Detection
from .io_formats import read_u16_raster, write_u16_raster
from .synthworld import SceneSpec, render_synth

DETECTION_CADENCE = 30


class MaskSource:
    """Detections arrive only on frames at the configured cadence; other
    frames yield None."""

    cadence = DETECTION_CADENCE

    def detections_for(self, frame_index: int):
        raise NotImplementedError


class EmptyMaskSource(MaskSource):
    """Disables detections entirely: the coarse-TSDF odometry baseline."""

    def detections_for(self, frame_index: int):
        return None


@dataclass
class MaskCorruption:
    """Controlled degradation of ground-truth masks."""

    boundary_jitter_px: int = 0     # random erosion/dilation radius
    dropout: float = 0.0            # probability a true instance is missed
    false_positive_rate: float = 0.0  # expected spurious blobs per frame
    class_softening: float = 0.1    # mass moved off the true label
    score_floor: float = 0.8


class GroundTruthMaskSource(MaskSource):
    """Emits per-primitive masks rendered from the ground-truth scene and
    trajectory, with optional corruption. Deterministic for a fixed seed."""

    def __init__(self, scene: SceneSpec, gt_poses, K, cadence=DETECTION_CADENCE,
                 corruption: MaskCorruption | None = None, seed: int = 0):
        self.scene = scene
        self.gt_poses = gt_poses
        self.K = K
        self.cadence = cadence
        self.corruption = corruption or MaskCorruption()
        self.seed = seed
        self.n_labels = len(scene.label_set)

    def detections_for(self, frame_index: int):
        if frame_index % self.cadence != 0:
            return None
        rng = np.random.default_rng([self.seed, frame_index])
        _, _, index = render_synth(self.scene, self.gt_poses[frame_index], self.K)
        c = self.corruption
        out = []
        for prim in self.scene.primitives:
            if not prim.detectable:
                continue
            mask = index == prim.id
            if not mask.any():
                continue
            if rng.random() < c.dropout:
                continue
            if c.boundary_jitter_px > 0:
                radius = int(rng.integers(-c.boundary_jitter_px, c.boundary_jitter_px + 1))
                if radius > 0:
                    mask = ndimage.binary_dilation(mask, iterations=radius)
                elif radius < 0:
                    mask = ndimage.binary_erosion(mask, iterations=-radius)
                if not mask.any():
                    continue
            dist = np.full(self.n_labels, c.class_softening / max(self.n_labels - 1, 1))
            dist[prim.label] = 1.0 - c.class_softening
            score = float(rng.uniform(c.score_floor, 1.0))
            out.append(Detection(mask=mask, class_dist=dist, score=score))
        n_fp = rng.poisson(c.false_positive_rate) if c.false_positive_rate > 0 else 0
        h, w = index.shape
        for _ in range(n_fp):
            mask = np.zeros((h, w), dtype=bool)
            cy, cx = rng.integers(h // 4, 3 * h // 4), rng.integers(w // 4, 3 * w // 4)
            ry, rx = rng.integers(6, max(h // 6, 7), 2)
            yy, xx = np.ogrid[:h, :w]
            mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = True
            dist = np.full(self.n_labels, 1.0 / self.n_labels)
            out.append(Detection(mask=mask, class_dist=dist,
                                 score=float(rng.uniform(0.5, 0.9))))
        return out


class FileMaskSource(MaskSource):
    """Reads per-frame 16-bit instance-index rasters (id 0 = background)
    plus a text sidecar of per-instance class distributions and scores.

    Layout: <dir>/NNNNNN.u16 and <dir>/NNNNNN.txt, sidecar lines
    "id score p1 p2 ... pL". A missing frame file means no detections."""

    def __init__(self, directory, cadence=DETECTION_CADENCE):
        self.directory = str(directory)
        self.cadence = cadence

    def detections_for(self, frame_index: int):
        if frame_index % self.cadence != 0:
            return None
        raster_path = os.path.join(self.directory, f"{frame_index:06d}.u16")
        sidecar_path = os.path.join(self.directory, f"{frame_index:06d}.txt")
        if not os.path.exists(raster_path):
            return None
        index = read_u16_raster(raster_path)
        table = {}
        if not os.path.exists(sidecar_path):
            raise ValueError(f"{sidecar_path}: missing sidecar for raster")
        with open(sidecar_path) as f:
            for line in f:
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                iid = int(parts[0])
                score = float(parts[1])
                dist = np.asarray([float(x) for x in parts[2:]])
                if abs(dist.sum() - 1.0) > 1e-6:
                    raise ValueError(
                        f"{sidecar_path}: distribution for id {iid} sums to {dist.sum()}")
                table[iid] = (score, dist)
        out = []
        for iid in sorted(np.unique(index)):
            if iid == 0:
                continue
            if int(iid) not in table:
                raise ValueError(f"{sidecar_path}: no entry for instance id {iid}")
            score, dist = table[int(iid)]
            out.append(Detection(mask=index == iid, class_dist=dist, score=score))
        return out


def write_mask_files(directory, frame_index, detections_or_index, class_table=None):
    """Write one frame's masks in the FileMaskSource format. Accepts either
    an instance-index raster plus {id: (score, dist)} or a Detection list."""
    os.makedirs(directory, exist_ok=True)
    raster_path = os.path.join(directory, f"{frame_index:06d}.u16")
    sidecar_path = os.path.join(directory, f"{frame_index:06d}.txt")
    if class_table is None:
        dets = detections_or_index
        if not dets:
            return
        index = np.zeros(dets[0].mask.shape, dtype=np.uint16)
        class_table = {}
        for i, det in enumerate(dets, start=1):
            index[det.mask] = i
            class_table[i] = (det.score, det.class_dist)
    else:
        index = detections_or_index
    write_u16_raster(raster_path, index)
    with open(sidecar_path, "w") as f:
        f.write("# id score class_distribution\n")
        for iid in sorted(class_table):
            score, dist = class_table[iid]
            f.write(f"{iid} {float(score)!r} " + " ".join(repr(float(p)) for p in dist) + "\n")
