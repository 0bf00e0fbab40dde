"""Oriental landscape painting to real-scene photo, depth map, and printable
relief pipeline, with a perception study service."""

__version__ = "0.1.0"
