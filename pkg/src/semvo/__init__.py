"""Semantic-element visual odometry: benchmark-library matching, anchored bundle adjustment, map evaluation."""

__version__ = "0.1.0"
