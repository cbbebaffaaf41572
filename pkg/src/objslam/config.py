"""Pipeline configuration: every tunable constant, with defaults for
640x480 input, plus a documented key-value file form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class PipelineConfig:
    # reproducibility
    seed: int = 0

    # object volume initialisation
    percentile_low: float = 10.0        # lower per-axis cloud percentile
    percentile_high: float = 90.0       # upper per-axis cloud percentile
    padding_factor: float = 1.5         # volume edge = padding * percentile span
    init_resolution: int = 64           # fresh volume voxels per axis
    max_resolution: int = 128           # growth cap before reinitialising
    max_object_size: float = 3.0        # metres, volume edge cap
    max_init_distance: float = 5.0      # metres, reject farther centres
    max_box_iou: float = 0.5            # reject overlapping volume boxes
    mask_erosion_px: int = 2            # square erosion radius before backprojection

    # depth integration
    truncation_voxels: float = 4.0      # truncation band in voxels
    integration_min_valid_fraction: float = 0.5
    integration_max_rmse: float = 0.03  # metres

    # per-voxel foreground and instance existence
    foreground_threshold: float = 0.5
    existence_delete_below: float = 0.1
    existence_min_pixels: int = 2500    # visibility floor for existence events

    # detection filtering
    max_detections: int = 100
    border_margin_px: int = 20
    min_class_prob: float = 0.5
    min_mask_area_px: int = 2500

    # data association
    min_overlap: float = 0.2            # intersection over detection area

    # coarse background volume
    bg_resolution: int = 256
    bg_voxel_size: float = 0.02         # metres
    bg_forward_offset: float = 2.56     # metres along the optical axis
    bg_reset_distance: float = 1.28     # metres

    # ICP tracking
    pyramid_levels: int = 3
    gn_iterations: int = 5
    max_correspondence_dist: float = 0.1   # metres
    normal_dot_min: float = 0.8
    lost_rmse: float = 0.05                # metres
    lost_instance_coverage: float = 0.1
    lost_min_valid_fraction: float = 0.5

    # raycasting
    ray_min: float = 0.1                # metres
    ray_max: float = 8.0                # metres
    sdf_refine_threshold: float = 0.8
    bg_behind_slack: float = 0.05       # metres

    # relocalisation
    snapshot_min_angle_deg: float = 15.0
    class_gate_dot: float = 0.6
    object_min_inliers: int = 5
    object_inlier_dist: float = 0.02    # metres
    joint_min_inliers: int = 50
    joint_inlier_dist: float = 0.05     # metres
    ransac_iterations: int = 200
    feature_kind: str = "harris"        # harris | oracle
    harris_threshold: float = 10.0

    # pipeline control
    detection_cadence: int = 30         # frames between detection events
    consecutive_lost_limit: int = 90
    odometry_sigma_t: float = 0.0       # metres/frame of simulated drift
    odometry_sigma_r: float = 0.0       # radians/frame of simulated drift
    semantics_mode: str = "average"     # average | multiplicative

    def scaled_for_image(self, width: int, height: int) -> "PipelineConfig":
        """Rescale the pixel-count thresholds, which default to 640x480
        input, for a different frame size."""
        area_scale = (width / 640.0) * (height / 480.0)
        linear = width / 640.0
        return dataclasses.replace(
            self,
            existence_min_pixels=max(1, int(round(self.existence_min_pixels * area_scale))),
            min_mask_area_px=max(1, int(round(self.min_mask_area_px * area_scale))),
            border_margin_px=max(1, int(round(self.border_margin_px * linear))),
        )


_FIELDS = {f.name: f for f in dataclasses.fields(PipelineConfig)}


def save_config(config: PipelineConfig, path):
    """Write "key = value" lines; values round-trip losslessly."""
    with open(path, "w") as f:
        f.write("# pipeline configuration\n")
        for name in _FIELDS:
            value = getattr(config, name)
            f.write(f"{name} = {value!r}\n")


def load_config(path) -> PipelineConfig:
    values = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in _FIELDS:
                raise ValueError(f"unknown config key: {key}")
            ftype = _FIELDS[key].type
            if ftype in ("int", int):
                values[key] = int(raw)
            elif ftype in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip("'\"")
    return PipelineConfig(**values)
