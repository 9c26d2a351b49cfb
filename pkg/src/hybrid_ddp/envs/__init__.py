"""Benchmark environments: gear-switching car and planar box pushing."""

from . import box, car

__all__ = ["box", "car"]
