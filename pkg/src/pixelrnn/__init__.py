"""In-pixel binary spatio-temporal encoders and their emulation."""

__version__ = "0.1.0"
