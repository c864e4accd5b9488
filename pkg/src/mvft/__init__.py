"""Multi-view fusion transformer for sensor-based human activity recognition."""

__version__ = "0.1.0"
