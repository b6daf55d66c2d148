"""Differentiable anisotropic eikonal solver and ECG-driven PMJ calibration."""
from __future__ import annotations

__version__ = "0.1.0"
