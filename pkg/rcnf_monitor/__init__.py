"""RC-NF: conditional normalizing-flow anomaly monitor for robot manipulation."""
from __future__ import annotations

__version__ = "0.1.0"
