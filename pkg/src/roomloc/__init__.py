"""Object-based room-level relocalization from keypoint observations."""

__version__ = "0.1.0"
