"""The per-frame loop tying everything together: preprocess, layered
raycast, ICP tracking, lost/reset handling with relocalisation and graph
optimisation, background and object integration, and detection fusion."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import background as bg
from . import tsdf
from .association import associate, filter_detections
from .config import PipelineConfig
from .geometry import Intrinsics, Pose, se3_exp
from .io_formats import TrajectoryRecord
from .posegraph import (CAMERA, OBJECT, PoseGraph, make_virtual_measurement,
                        optimize, recentre_object)
from .raycast import raycast_layered, render_instance_masks
from .reloc import (FeatureSet, HarrisBinaryFeatures, SnapshotStore,
                    maybe_add_snapshot, relocalize)
from .tracking import icp_track, preprocess_frame, tracking_lost
from .tsdf import (fuse_foreground, fuse_semantics, init_object, integrate_depth,
                   mask_cloud_world, resize_object, update_existence)


@dataclass
class RunResult:
    trajectory: TrajectoryRecord
    volumes: dict
    graph: PoseGraph
    stats: list
    status: str = "ok"
    snapshots: SnapshotStore | None = None


@dataclass
class _TrajectoryEntry:
    timestamp: float
    anchor: tuple | None
    relative: Pose


class Pipeline:
    """Mutable run state; `run` below is the public entry point."""

    def __init__(self, config: PipelineConfig, K: Intrinsics, features=None):
        self.config = config
        self.K = K
        self.features = features or HarrisBinaryFeatures(
            threshold=config.harris_threshold)
        self.pose = Pose.identity()
        self.volumes: dict[int, tsdf.ObjectVolume] = {}
        self.graph = PoseGraph()
        self.snapshots = SnapshotStore()
        self.coarse = None
        self.next_object_id = 1
        self.prev_camera_key = None
        self.entries: list[_TrajectoryEntry] = []
        self.stats: list[dict] = []
        self.consecutive_lost = 0
        self.rng_odometry = np.random.default_rng([config.seed, 1])
        self.rng_reloc = np.random.default_rng([config.seed, 2])

    # -- helpers ------------------------------------------------------------

    def _record_pose(self, timestamp: float):
        if self.prev_camera_key is None:
            self.entries.append(_TrajectoryEntry(timestamp, None, self.pose))
        else:
            anchor_state = self.graph.nodes[self.prev_camera_key].state
            self.entries.append(_TrajectoryEntry(
                timestamp, self.prev_camera_key,
                anchor_state.inverse() @ self.pose))

    def trajectory(self) -> TrajectoryRecord:
        stamps, poses = [], []
        for entry in self.entries:
            stamps.append(entry.timestamp)
            if entry.anchor is None:
                poses.append(entry.relative)
            else:
                poses.append(self.graph.nodes[entry.anchor].state @ entry.relative)
        return TrajectoryRecord.from_poses(stamps, poses)

    def _add_camera_node(self, frame_index: int, result=None):
        """Camera node for this frame plus virtual-measurement edges from
        the frame's partitioned ICP systems."""
        key = (CAMERA, frame_index)
        if key in self.graph.nodes:
            return key
        self.graph.add_camera_node(frame_index, self.pose)
        if result is not None:
            cfg = self.config
            sys0 = result.per_target.get(0)
            if sys0 is not None and self.prev_camera_key is not None:
                made = make_virtual_measurement(
                    sys0.jtj, sys0.jtr, self.pose,
                    self.graph.nodes[self.prev_camera_key].state, sys0.count)
                if made is not None:
                    self.graph.add_edge(self.prev_camera_key, key, *made)
            for oid, sys in sorted(result.per_target.items()):
                if oid <= 0 or oid not in self.volumes:
                    continue
                okey = (OBJECT, oid)
                if okey not in self.graph.nodes:
                    continue
                made = make_virtual_measurement(
                    sys.jtj, sys.jtr, self.pose,
                    self.graph.nodes[okey].state, sys.count)
                if made is not None:
                    self.graph.add_edge(okey, key, *made)
        self.prev_camera_key = key
        return key

    def _apply_optimized(self):
        for oid, vol in self.volumes.items():
            okey = (OBJECT, oid)
            if okey in self.graph.nodes:
                vol.pose = self.graph.nodes[okey].state
        if self.prev_camera_key is not None:
            self.pose = self.graph.nodes[self.prev_camera_key].state

    def _volume_table(self):
        return {oid: (vol.pose, vol.class_distribution)
                for oid, vol in self.volumes.items()}

    def _detect_features(self, frame) -> FeatureSet:
        return self.features.detect(frame.rgb, frame.depth, self.K, frame.index)

    def _attempt_reloc(self, frame, detection_dist=None):
        cfg = self.config
        feats = self._detect_features(frame)
        return relocalize(
            self.snapshots, feats, self._volume_table(), self.features,
            rng=self.rng_reloc, detection_dist=detection_dist,
            class_gate=cfg.class_gate_dot,
            object_min_inliers=cfg.object_min_inliers,
            object_inlier_dist=cfg.object_inlier_dist,
            joint_min_inliers=cfg.joint_min_inliers,
            joint_inlier_dist=cfg.joint_inlier_dist,
            iterations=cfg.ransac_iterations), feats

    def _track(self, pyramid, init_pose, stat=None):
        cfg = self.config
        t0 = time.perf_counter()
        maps = raycast_layered(
            list(self.volumes.values()), self.coarse, init_pose, self.K,
            ray_min=cfg.ray_min, ray_max=cfg.ray_max,
            refine_threshold=cfg.sdf_refine_threshold,
            behind_slack=cfg.bg_behind_slack,
            fg_threshold=cfg.foreground_threshold)
        t1 = time.perf_counter()
        result = icp_track(
            maps, pyramid, init_pose,
            iterations=cfg.gn_iterations,
            max_dist=cfg.max_correspondence_dist,
            normal_dot_min=cfg.normal_dot_min)
        if stat is not None:
            stat["ms_raycast"] = stat.get("ms_raycast", 0.0) + 1000 * (t1 - t0)
            stat["ms_icp"] = stat.get("ms_icp", 0.0) + 1000 * (time.perf_counter() - t1)
        return maps, result

    def _integrate_objects(self, frame, result, stat):
        cfg = self.config
        integrated = skipped = 0
        for oid in sorted(self.volumes):
            vol = self.volumes[oid]
            sys = result.per_target.get(oid) if result else None
            if sys is None or sys.rendered == 0:
                continue
            ok = integrate_depth(
                vol, frame.depth, self.pose, self.K,
                valid_fraction=sys.valid_fraction, rmse=sys.rmse,
                min_valid_fraction=cfg.integration_min_valid_fraction,
                max_rmse=cfg.integration_max_rmse)
            integrated += int(ok)
            skipped += int(not ok)
        stat["objects_integrated"] = integrated
        stat["objects_gate_skipped"] = skipped

    def _process_detections(self, frame, dets, result, stat):
        cfg = self.config
        for det in dets:
            det.validate(frame.depth.shape)
        filtered = filter_detections(
            dets, max_detections=cfg.max_detections,
            border_px=cfg.border_margin_px,
            min_class_prob=cfg.min_class_prob,
            min_area=cfg.min_mask_area_px)

        maps = raycast_layered(
            list(self.volumes.values()), self.coarse, self.pose, self.K,
            ray_min=cfg.ray_min, ray_max=cfg.ray_max,
            refine_threshold=cfg.sdf_refine_threshold,
            behind_slack=cfg.bg_behind_slack,
            fg_threshold=cfg.foreground_threshold)
        rendered = render_instance_masks(maps)
        assoc = associate(filtered, rendered, min_overlap=cfg.min_overlap)
        stat["detections"] = len(dets)
        stat["detections_kept"] = len(filtered)
        stat["matched"] = len(assoc.matched)

        frame_features = None
        if self.volumes or assoc.unmatched:
            frame_features = self._detect_features(frame)

        # matched detections: resize, fuse foreground/semantics, snapshot
        for oid in sorted(assoc.matched):
            det = assoc.matched[oid]
            vol = self.volumes[oid]
            new_cloud = mask_cloud_world(det.mask, frame.depth, self.pose,
                                         self.K, cfg.mask_erosion_px)
            recon_mask = tsdf.erode_mask(maps.index == oid, cfg.mask_erosion_px)
            recon_cloud = maps.vertices[recon_mask & maps.valid]
            vol, change, reinit = resize_object(vol, new_cloud, recon_cloud)
            self.volumes[oid] = vol
            if not np.allclose(change.matrix(), np.eye(4)):
                recentre_object(self.graph, oid, change)
                self.snapshots.apply_frame_change(oid, change)
            if reinit:
                integrate_depth(vol, frame.depth, self.pose, self.K)
            fuse_foreground(vol, det.mask, frame.depth, self.pose, self.K)
            fuse_semantics(vol, det.class_dist, mode=cfg.semantics_mode)
            if frame_features is not None:
                on_mask = self._features_on_mask(frame_features, det.mask)
                maybe_add_snapshot(self.snapshots, oid, self.pose, vol.pose,
                                   on_mask, det.class_dist,
                                   min_angle_deg=cfg.snapshot_min_angle_deg)

        # existence bookkeeping for every volume visible in this render
        deleted = []
        for oid in sorted(self.volumes):
            visible = maps.pixel_counts.get(oid, 0)
            keep = update_existence(
                self.volumes[oid], visible, associated=oid in assoc.matched,
                min_pixels=cfg.existence_min_pixels,
                delete_below=cfg.existence_delete_below)
            if not keep:
                deleted.append(oid)
        for oid in deleted:
            del self.volumes[oid]
            if (OBJECT, oid) in self.graph.nodes:
                self.graph.remove_object(oid)
            self.snapshots.drop_object(oid)
        stat["objects_deleted"] = len(deleted)

        # unmatched detections seed new volumes
        created = 0
        for det in assoc.unmatched:
            vol, reason = init_object(
                det.mask, frame.depth, self.pose, self.K,
                list(self.volumes.values()),
                volume_id=self.next_object_id,
                label_count=len(det.class_dist),
                max_init_distance=cfg.max_init_distance,
                max_box_iou=cfg.max_box_iou,
                erosion=cfg.mask_erosion_px)
            if vol is None:
                stat.setdefault("init_rejections", []).append(reason)
                continue
            oid = self.next_object_id
            self.next_object_id += 1
            self.volumes[oid] = vol
            self.graph.add_object_node(oid, vol.pose)
            # first observation: fuse the creating frame outright
            integrate_depth(vol, frame.depth, self.pose, self.K)
            fuse_foreground(vol, det.mask, frame.depth, self.pose, self.K)
            fuse_semantics(vol, det.class_dist, mode=cfg.semantics_mode)
            if frame_features is not None:
                on_mask = self._features_on_mask(frame_features, det.mask)
                maybe_add_snapshot(self.snapshots, oid, self.pose, vol.pose,
                                   on_mask, det.class_dist,
                                   min_angle_deg=cfg.snapshot_min_angle_deg)
            created += 1
        stat["objects_created"] = created

    @staticmethod
    def _features_on_mask(feats: FeatureSet, mask) -> FeatureSet:
        if len(feats) == 0:
            return feats
        u = np.clip(np.rint(feats.pixels[:, 0]).astype(int), 0, mask.shape[1] - 1)
        v = np.clip(np.rint(feats.pixels[:, 1]).astype(int), 0, mask.shape[0] - 1)
        keep = mask[v, u]
        return FeatureSet(feats.pixels[keep], feats.points[keep],
                          feats.descriptors[keep])

    # -- per-frame step -------------------------------------------------------

    def step(self, frame, masks_source):
        cfg = self.config
        stat = {"frame": frame.index, "timestamp": frame.timestamp}
        t_start = time.perf_counter()

        t0 = time.perf_counter()
        pyramid = preprocess_frame(frame.depth, self.K, cfg.pyramid_levels)
        stat["ms_preprocess"] = 1000 * (time.perf_counter() - t0)

        result = None
        lost_now = False
        if self.coarse is None:
            # very first frame: nothing to track against yet
            self.coarse = bg.init_background(
                self.pose, cfg.bg_resolution, cfg.bg_voxel_size,
                cfg.bg_forward_offset)
        else:
            t0 = time.perf_counter()
            maps, result = self._track(pyramid, self.pose, stat)
            stat["ms_track"] = 1000 * (time.perf_counter() - t0)
            self.pose = result.pose
            if cfg.odometry_sigma_t > 0 or cfg.odometry_sigma_r > 0:
                noise = np.concatenate([
                    self.rng_odometry.normal(0.0, 1.0, 3) * cfg.odometry_sigma_t,
                    self.rng_odometry.normal(0.0, 1.0, 3) * cfg.odometry_sigma_r])
                self.pose = self.pose @ se3_exp(noise)
            stat["icp_rmse"] = result.icp_rmse
            stat["valid_fraction"] = result.valid_fraction
            lost_now = tracking_lost(
                result, lost_rmse=cfg.lost_rmse,
                coverage_threshold=cfg.lost_instance_coverage,
                min_valid_fraction=cfg.lost_min_valid_fraction)
            stat["lost"] = lost_now

        dets = masks_source.detections_for(frame.index)
        detection_dist = None
        if dets:
            detection_dist = np.mean([d.class_dist for d in dets], axis=0)

        if lost_now:
            reloc, _ = self._attempt_reloc(frame, detection_dist)
            stat["reloc"] = reloc.reason if not reloc.success else "ok"
            if reloc.success:
                self.pose = reloc.pose
                _, result = self._track(pyramid, self.pose)
                self.pose = result.pose
                self._add_camera_node(frame.index, result)
                optimize(self.graph)
                self._apply_optimized()
                self.coarse = bg.init_background(
                    self.pose, cfg.bg_resolution, cfg.bg_voxel_size,
                    cfg.bg_forward_offset)
                stat["reset"] = True
                self.consecutive_lost = 0
            else:
                self.consecutive_lost += 1
                self._record_pose(frame.timestamp)
                stat["ms_total"] = 1000 * (time.perf_counter() - t_start)
                stat.update(self._memory_stat())
                self.stats.append(stat)
                return self.consecutive_lost <= cfg.consecutive_lost_limit
        elif bg.needs_reset(self.coarse, self.pose, cfg.bg_reset_distance,
                            cfg.bg_forward_offset):
            # a coarse reset re-anchors against the object map before the
            # throw-away volume is rebuilt
            reloc, _ = self._attempt_reloc(frame, detection_dist)
            stat["reloc"] = reloc.reason if not reloc.success else "ok"
            if reloc.success:
                self.pose = reloc.pose
                _, result = self._track(pyramid, self.pose)
                self.pose = result.pose
            self._add_camera_node(frame.index, result)
            optimize(self.graph)
            self._apply_optimized()
            self.coarse = bg.init_background(
                self.pose, cfg.bg_resolution, cfg.bg_voxel_size,
                cfg.bg_forward_offset)
            stat["reset"] = True
            self.consecutive_lost = 0
        else:
            self.consecutive_lost = 0

        t0 = time.perf_counter()
        bg.integrate_background(self.coarse, frame.depth, self.pose, self.K)
        stat["ms_integrate_bg"] = 1000 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        self._integrate_objects(frame, result, stat)
        stat["ms_integrate_objects"] = 1000 * (time.perf_counter() - t0)

        if dets is not None:
            t0 = time.perf_counter()
            self._process_detections(frame, dets, result, stat)
            self._add_camera_node(frame.index, result)
            stat["ms_detections"] = 1000 * (time.perf_counter() - t0)

        self._record_pose(frame.timestamp)
        stat.update(self._memory_stat())
        stat["ms_total"] = 1000 * (time.perf_counter() - t_start)
        self.stats.append(stat)
        return True

    def _memory_stat(self):
        per_object = {oid: vol.grid.nbytes for oid, vol in self.volumes.items()}
        return {
            "n_objects": len(self.volumes),
            "object_bytes": per_object,
            "total_object_bytes": int(sum(per_object.values())),
            "bg_bytes": self.coarse.grid.nbytes if self.coarse else 0,
        }


def run(config: PipelineConfig, source, masks_source, features=None) -> RunResult:
    """Process every frame of the source. Returns the trajectory (with
    pose-graph corrections propagated through per-frame anchors), the
    surviving object volumes, the pose graph, and per-frame stats."""
    pipe = Pipeline(config, source.intrinsics, features)
    pipe.graph.add_camera_node(0, pipe.pose)   # fixed gauge at the origin
    pipe.prev_camera_key = (CAMERA, 0)
    status = "ok"
    for frame in source.frames():
        if not pipe.step(frame, masks_source):
            status = "partial"
            break
    return RunResult(
        trajectory=pipe.trajectory(),
        volumes=pipe.volumes,
        graph=pipe.graph,
        stats=pipe.stats,
        status=status,
        snapshots=pipe.snapshots,
    )
