"""PiaNet: ground-glass opacity detection in 3D CT volumes."""

__version__ = "0.1.0"
