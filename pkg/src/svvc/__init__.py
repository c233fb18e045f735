"""Supervisory Volt/VAR control for unbalanced radial distribution feeders."""

from pathlib import Path

__version__ = "0.1.0"

DATA_DIR = Path(__file__).resolve().parent / "data"


def bundled(name: str) -> Path:
    """Path to a file shipped in the package data directory."""
    return DATA_DIR / name
