"""Trajectory forecasting as question answering over text prompts."""
from __future__ import annotations

__version__ = "0.1.0"
