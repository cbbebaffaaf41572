import numpy as np
import pytest

from objslam.geometry import Intrinsics
from objslam.segmentation import (EmptyMaskSource, FileMaskSource,
                                  GroundTruthMaskSource, MaskCorruption,
                                  write_mask_files)
from objslam.synthworld import loop_sequence, render_synth

K = Intrinsics(fx=100.0, fy=100.0, cx=39.5, cy=29.5, width=80, height=60)


def world(n_frames=120):
    scene, traj = loop_sequence("loop-tiny", seed=2)
    _, poses = traj.frame_poses(n_frames)
    return scene, poses


def test_cadence():
    scene, poses = world()
    src = GroundTruthMaskSource(scene, poses, K, cadence=30)
    assert src.detections_for(1) is None
    assert src.detections_for(29) is None
    assert src.detections_for(0) is not None
    assert src.detections_for(30) is not None


def test_uncorrupted_masks_equal_index_map():
    scene, poses = world()
    src = GroundTruthMaskSource(scene, poses, K,
                                corruption=MaskCorruption(class_softening=0.0))
    dets = src.detections_for(0)
    _, _, index = render_synth(scene, poses[0], K)
    assert len(dets) == len([i for i in np.unique(index)
                             if i > 0 and scene.by_id(int(i)).detectable])
    union = np.zeros_like(index, dtype=bool)
    for det in dets:
        ids = np.unique(index[det.mask])
        assert len(ids) == 1  # each mask covers exactly one primitive
        assert det.mask.sum() == (index == ids[0]).sum()
        union |= det.mask
        assert det.class_dist.max() == 1.0


def test_detection_invariants_hold():
    scene, poses = world()
    src = GroundTruthMaskSource(scene, poses, K,
                                corruption=MaskCorruption(boundary_jitter_px=2,
                                                          dropout=0.2,
                                                          false_positive_rate=0.5),
                                seed=4)
    for k in (0, 30, 60):
        for det in src.detections_for(k):
            det.validate((K.height, K.width))


def test_full_dropout_removes_everything():
    scene, poses = world()
    src = GroundTruthMaskSource(scene, poses, K,
                                corruption=MaskCorruption(dropout=1.0))
    assert src.detections_for(0) == []


def test_dropout_statistics():
    scene, poses = world(n_frames=3000)
    src = GroundTruthMaskSource(scene, poses, K, cadence=30,
                                corruption=MaskCorruption(dropout=0.3), seed=1)
    full = GroundTruthMaskSource(scene, poses, K, cadence=30, seed=1)
    total = kept = 0
    for k in range(0, 3000, 30):
        total += len(full.detections_for(k))
        kept += len(src.detections_for(k))
    dropped = total - kept
    expect = 0.3 * total
    sigma = np.sqrt(total * 0.3 * 0.7)
    assert abs(dropped - expect) < 4 * sigma


def test_deterministic_for_fixed_seed():
    scene, poses = world()
    a = GroundTruthMaskSource(scene, poses, K,
                              corruption=MaskCorruption(dropout=0.4,
                                                        boundary_jitter_px=1),
                              seed=9)
    b = GroundTruthMaskSource(scene, poses, K,
                              corruption=MaskCorruption(dropout=0.4,
                                                        boundary_jitter_px=1),
                              seed=9)
    for k in (0, 30, 60, 90):
        da, db = a.detections_for(k), b.detections_for(k)
        assert len(da) == len(db)
        for x, y in zip(da, db):
            assert np.array_equal(x.mask, y.mask)
            assert np.array_equal(x.class_dist, y.class_dist)
            assert x.score == y.score


def test_empty_source():
    src = EmptyMaskSource()
    for k in range(0, 120, 15):
        assert src.detections_for(k) is None


def test_file_source_empty_directory(tmp_path):
    src = FileMaskSource(tmp_path)
    for k in range(0, 90, 30):
        assert src.detections_for(k) is None


def test_file_source_round_trip(tmp_path):
    index = np.zeros((60, 80), dtype=np.uint16)
    index[10:30, 10:30] = 1
    index[35:55, 40:70] = 2
    table = {1: (0.9, np.array([0.8, 0.2])), 2: (0.7, np.array([0.3, 0.7]))}
    write_mask_files(tmp_path, 30, index, table)
    src = FileMaskSource(tmp_path)
    assert src.detections_for(60) is None
    dets = src.detections_for(30)
    assert len(dets) == 2
    assert not np.any(dets[0].mask & dets[1].mask)
    assert dets[0].mask.sum() == 400
    assert np.allclose(dets[0].class_dist, [0.8, 0.2])
    assert dets[1].score == 0.7


def test_file_source_bad_sidecar(tmp_path):
    index = np.zeros((20, 20), dtype=np.uint16)
    index[5:10, 5:10] = 1
    write_mask_files(tmp_path, 0, index, {1: (0.9, np.array([0.5, 0.4]))})
    src = FileMaskSource(tmp_path)
    with pytest.raises(ValueError, match="sums to"):
        src.detections_for(0)


def test_file_source_missing_id(tmp_path):
    index = np.zeros((20, 20), dtype=np.uint16)
    index[5:10, 5:10] = 3
    write_mask_files(tmp_path, 0, index, {1: (0.9, np.array([1.0]))})
    src = FileMaskSource(tmp_path)
    with pytest.raises(ValueError, match="id 3"):
        src.detections_for(0)
