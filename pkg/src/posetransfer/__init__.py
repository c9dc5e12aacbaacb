"""Category-agnostic pose transfer between rigged 3D characters."""

__version__ = "0.1.0"
