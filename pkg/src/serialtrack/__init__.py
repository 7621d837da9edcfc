"""Registration-based multi-object tracking across serial tissue sections."""

__version__ = "0.1.0"
