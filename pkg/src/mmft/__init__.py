"""Multi-stream transformer question answering with transformer fusion."""

__version__ = "0.1.0"
