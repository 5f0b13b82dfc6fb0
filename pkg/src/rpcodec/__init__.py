"""Rate-perception optimized learned image compression at desk scale."""

__version__ = "0.1.0"
