"""Sketch-guided editing of dense voxel radiance fields.

The package is organized around a small pipeline:

- :mod:`sketchfield.field`    dense voxel radiance fields + occupancy grids
- :mod:`sketchfield.render`   pinhole cameras and differentiable raymarching
- :mod:`sketchfield.sketch`   2D sketch masks, distance fields, 3D edit regions
- :mod:`sketchfield.guidance` score-distillation gradient providers
- :mod:`sketchfield.editor`   the sketch-constrained optimization loop
- :mod:`sketchfield.metrics`  PSNR / IoS / SSIM evaluation
- :mod:`sketchfield.cli`      command-line front door
- :mod:`sketchfield.studio_api` HTTP service for the interactive studio
"""

from sketchfield.errors import (
    BadMagic,
    BehindCamera,
    ChecksumMismatch,
    ConfigError,
    EmptyIntersection,
    EmptySketchSet,
    HandshakeVersionError,
    NoOverlap,
    NonFiniteGradient,
    NonFiniteLoss,
    ProviderTimeout,
    ShapeMismatch,
    SketchfieldError,
    TruncatedFile,
    VersionMismatch,
)

__all__ = [
    "BadMagic",
    "BehindCamera",
    "ChecksumMismatch",
    "ConfigError",
    "EmptyIntersection",
    "EmptySketchSet",
    "HandshakeVersionError",
    "NoOverlap",
    "NonFiniteGradient",
    "NonFiniteLoss",
    "ProviderTimeout",
    "ShapeMismatch",
    "SketchfieldError",
    "TruncatedFile",
    "VersionMismatch",
]

__version__ = "0.1.0"
