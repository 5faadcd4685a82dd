"""Tracking defense against adversarial patches in video segmentation, on a numpy toy stack."""
from __future__ import annotations

__version__ = "0.1.0"
