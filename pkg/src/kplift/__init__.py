"""Keypoint-based monocular 3D detection: geometric lifting, losses and KITTI evaluation."""

__version__ = "0.1.0"
