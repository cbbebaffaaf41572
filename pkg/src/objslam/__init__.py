"""Object-level RGB-D SLAM: per-object TSDF volumes on an SE(3) pose graph."""

__version__ = "0.1.0"
