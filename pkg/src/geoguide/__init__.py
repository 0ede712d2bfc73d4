"""Geometry-guided 2D-to-3D feature distillation for open-vocabulary point-cloud segmentation."""

__version__ = "0.1.0"
