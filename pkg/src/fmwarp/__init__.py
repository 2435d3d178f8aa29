"""Time-warping transfer learning for recurrent fuel-moisture models."""

__version__ = "0.1.0"
