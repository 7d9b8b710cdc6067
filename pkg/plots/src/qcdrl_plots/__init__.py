"""Figure rendering for qcdrl experiment artifacts."""

__version__ = "0.1.0"
