"""Temporal monocular 3D lane detection with pose-based cost volumes and temporal queries."""

__version__ = "0.1.0"
