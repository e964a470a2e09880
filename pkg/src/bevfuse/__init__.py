"""LiDAR-camera BEV fusion on procedural driving scenes."""

__version__ = "0.1.0"
