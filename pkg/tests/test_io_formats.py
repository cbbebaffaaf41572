import numpy as np
import pytest

from objslam.geometry import Pose, se3_exp
from objslam.io_formats import (Frame, TrajectoryRecord, ate_details, ate_rmse,
                                export_tum_sequence, read_tum_rgbd,
                                read_trajectory, read_u16_raster,
                                write_trajectory, write_u16_raster)


def random_record(n=100, seed=0, start=0.0):
    rng = np.random.default_rng(seed)
    poses = [se3_exp(rng.uniform(-1, 1, 6)) for _ in range(n)]
    ts = start + np.arange(n) / 30.0
    return TrajectoryRecord.from_poses(ts, poses)


def test_trajectory_write_format(tmp_path):
    rec = TrajectoryRecord.from_poses([1.5], [Pose.identity()])
    path = tmp_path / "traj.txt"
    write_trajectory(rec, path)
    assert path.read_text() == "1.500000 0.000000 0.000000 0.000000 0.000000 0.000000 0.000000 1.000000\n"


def test_trajectory_round_trip(tmp_path):
    rec = random_record(50)
    path = tmp_path / "traj.txt"
    write_trajectory(rec, path)
    back = read_trajectory(path)
    assert np.abs(back.timestamps - rec.timestamps).max() < 1e-6
    assert np.abs(back.translations - rec.translations).max() < 1e-6
    # quaternions match up to precision and sign
    dots = np.abs(np.sum(back.quaternions * rec.quaternions, axis=1))
    assert np.abs(dots - 1).max() < 1e-6


def test_empty_record_round_trip(tmp_path):
    path = tmp_path / "empty.txt"
    write_trajectory(TrajectoryRecord(), path)
    assert path.read_text() == ""
    assert len(read_trajectory(path)) == 0


def test_record_validation():
    with pytest.raises(ValueError):
        TrajectoryRecord(np.array([1.0, 0.5]), np.zeros((2, 3)),
                         np.tile([0, 0, 0, 1.0], (2, 1)))
    with pytest.raises(ValueError):
        TrajectoryRecord(np.array([0.0]), np.zeros((1, 3)),
                         np.array([[0, 0, 0, 2.0]]))


def test_ate_zero_for_identical():
    rec = random_record(30)
    assert ate_rmse(rec, rec) < 1e-12


def test_ate_invariant_under_rigid_transform():
    rec = random_record(40, seed=3)
    offset = se3_exp([0.5, -1.0, 2.0, 0.3, 0.2, -0.4])
    moved = TrajectoryRecord.from_poses(
        rec.timestamps, [offset @ rec.pose(i) for i in range(len(rec))])
    assert ate_rmse(moved, rec) < 1e-9
    assert ate_rmse(rec, moved) < 1e-9


def test_ate_single_offset_closed_form():
    n = 100
    ts = np.arange(n) / 30.0
    rng = np.random.default_rng(5)
    base = rng.uniform(-1, 1, (n, 3))
    est = base.copy()
    est[17] += np.array([0.1, 0.0, 0.0])
    quat = np.tile([0, 0, 0, 1.0], (n, 1))
    truth = TrajectoryRecord(ts, base, quat)
    estimate = TrajectoryRecord(ts, est, quat)
    got = ate_rmse(estimate, truth)
    # after alignment a single 0.1 m offset spreads to about 0.1 / sqrt(n)
    assert got == pytest.approx(0.1 / np.sqrt(n), rel=0.05)


def test_ate_needs_three_matches():
    a = random_record(2)
    with pytest.raises(ValueError):
        ate_rmse(a, a)
    # non-overlapping timestamps never match
    b = random_record(30, start=100.0)
    with pytest.raises(ValueError):
        ate_rmse(random_record(30), b)


def test_ate_association_window():
    rec = random_record(30)
    shifted = TrajectoryRecord(rec.timestamps + 0.015, rec.translations,
                               rec.quaternions)
    assert ate_rmse(shifted, rec) < 1e-9  # 15 ms still pairs
    details = ate_details(shifted, rec)
    assert details.pairs == 30
    assert details.rotation_rmse_deg < 1e-6


def test_u16_raster_round_trip(tmp_path):
    img = np.arange(12, dtype=np.uint16).reshape(3, 4) * 1000
    path = tmp_path / "mask.u16"
    write_u16_raster(path, img)
    back = read_u16_raster(path)
    assert np.array_equal(back, img)
    assert path.read_bytes()[:4] == b"U16R"


def test_u16_raster_rejects_garbage(tmp_path):
    path = tmp_path / "bad.u16"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        read_u16_raster(path)
    path.write_bytes(b"U16R" + np.array([4, 4], dtype="<u4").tobytes() + b"\x00" * 3)
    with pytest.raises(ValueError):
        read_u16_raster(path)


def synth_frames(n=4):
    rng = np.random.default_rng(0)
    frames = []
    for k in range(n):
        rgb = rng.integers(0, 255, (30, 40, 3), dtype=np.uint8)
        depth = rng.uniform(0.5, 3.0, (30, 40))
        depth[0, 0] = 0.0
        frames.append(Frame(index=k, timestamp=k / 30.0, rgb=rgb, depth=depth))
    return frames


def test_tum_export_and_read_round_trip(tmp_path):
    frames = synth_frames()
    poses = [Pose(np.eye(3), [k * 0.1, 0, 0]) for k in range(4)]
    export_tum_sequence(tmp_path, frames, [f.timestamp for f in frames], poses)
    seq = read_tum_rgbd(tmp_path)
    assert len(seq) == 4
    assert seq.skipped == 0
    got = list(seq.frames())
    for orig, back in zip(frames, got):
        assert back.rgb.shape == orig.rgb.shape
        assert np.array_equal(back.rgb, orig.rgb)
        # depth quantised to 1/5000 m
        assert np.abs(back.depth - orig.depth).max() < 1.0 / 5000.0 + 1e-9
    gt = read_trajectory(tmp_path / "groundtruth.txt")
    assert len(gt) == 4


def test_tum_depth_scale(tmp_path):
    import cv2
    (tmp_path / "depth").mkdir()
    (tmp_path / "rgb").mkdir()
    cv2.imwrite(str(tmp_path / "depth" / "a.png"),
                np.full((4, 4), 5000, dtype=np.uint16))
    cv2.imwrite(str(tmp_path / "rgb" / "a.png"),
                np.zeros((4, 4, 3), dtype=np.uint8))
    (tmp_path / "rgb.txt").write_text("1.000000 rgb/a.png\n")
    (tmp_path / "depth.txt").write_text("1.015000 depth/a.png\n")
    seq = read_tum_rgbd(tmp_path)
    frames = list(seq.frames())
    assert len(frames) == 1  # 15 ms apart pairs fine
    assert frames[0].depth[0, 0] == pytest.approx(1.0)


def test_tum_unmatched_frames_skipped(tmp_path):
    import cv2
    (tmp_path / "depth").mkdir()
    (tmp_path / "rgb").mkdir()
    cv2.imwrite(str(tmp_path / "rgb" / "a.png"), np.zeros((4, 4, 3), dtype=np.uint8))
    cv2.imwrite(str(tmp_path / "depth" / "a.png"), np.zeros((4, 4), dtype=np.uint16))
    (tmp_path / "rgb.txt").write_text("1.000000 rgb/a.png\n2.000000 rgb/a.png\n")
    (tmp_path / "depth.txt").write_text("1.050000 depth/a.png\n")
    seq = read_tum_rgbd(tmp_path)
    assert len(seq) == 0
    assert seq.skipped == 2
