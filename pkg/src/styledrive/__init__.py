"""Multi-agent traffic simulation where driving styles come from distorted perception."""

__version__ = "0.1.0"
