"""Self-supervised distant LiDAR point-cloud registration on a desk-scale simulator."""

from .geom import Pose, PointCloud, apply_pose, compose, fit_pose_weighted, inverse
from .correspondence import Correspondences

__all__ = ["Pose", "PointCloud", "Correspondences", "apply_pose", "compose", "inverse", "fit_pose_weighted"]
__version__ = "0.1.0"
