"""Source-aware influence functions for programmatic weak supervision pipelines."""

__version__ = "0.1.0"
