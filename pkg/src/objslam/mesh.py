"""Triangle-mesh extraction from object volumes and ASCII export."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from .tsdf import FOREGROUND_THRESHOLD, ObjectVolume, _trilinear


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.int64))

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def extract_mesh(vol: ObjectVolume, fg_threshold: float = FOREGROUND_THRESHOLD) -> Mesh:
    """Marching-cubes surface at signed distance zero, restricted to the
    observed region and to faces whose interpolated foreground probability
    exceeds the threshold. Vertices are in the world frame; an empty mesh
    is a valid result."""
    grid = vol.grid
    observed = grid.weight > 0
    if not observed.any():
        raise ValueError("volume has no observed voxels")
    try:
        verts, faces, _, _ = measure.marching_cubes(
            grid.sdf.astype(np.float64), level=0.0, mask=observed)
    except (ValueError, RuntimeError):
        return Mesh()
    if len(faces) == 0:
        return Mesh()

    # every vertex sits on a voxel edge; require both endpoint voxels observed
    lo = np.floor(verts).astype(int)
    hi = np.ceil(verts).astype(int)
    vertex_ok = (observed[lo[:, 0], lo[:, 1], lo[:, 2]]
                 & observed[hi[:, 0], hi[:, 1], hi[:, 2]])
    prob = grid.fg.astype(np.float64) / (grid.fg.astype(np.float64) + grid.bg.astype(np.float64))
    centroids = verts[faces].mean(axis=1)
    keep = vertex_ok[faces].all(axis=1) & (_trilinear(prob, centroids) > fg_threshold)
    faces = faces[keep]
    if len(faces) == 0:
        return Mesh()

    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts_obj = (verts[used] + 0.5) * vol.voxel_size - 0.5 * vol.size
    return Mesh(vertices=vol.pose.apply(verts_obj), faces=remap[faces])


def save_mesh(mesh: Mesh, path):
    """ASCII polygon file: header line "MESH <n_vertices> <n_faces>",
    one "v x y z" line per vertex, one "f i j k" line per triangle
    (0-based indices)."""
    with open(path, "w") as f:
        f.write(f"MESH {len(mesh.vertices)} {len(mesh.faces)}\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.faces:
            f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def load_mesh(path) -> Mesh:
    with open(path) as f:
        header = f.readline().split()
        nv, nf = int(header[1]), int(header[2])
        verts = np.array([[float(x) for x in f.readline().split()[1:4]] for _ in range(nv)])
        faces = np.array([[int(x) for x in f.readline().split()[1:4]] for _ in range(nf)],
                         dtype=np.int64)
    return Mesh(verts.reshape(nv, 3) if nv else np.empty((0, 3)),
                faces.reshape(nf, 3) if nf else np.empty((0, 3), dtype=np.int64))
