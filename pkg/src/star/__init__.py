"""State-aware adapter for frozen time-series reconstruction backbones."""

__version__ = "0.1.0"
