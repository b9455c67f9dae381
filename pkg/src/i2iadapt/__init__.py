"""Domain adaptation engine built on a minimal reverse-mode autodiff core."""

__version__ = "0.1.0"
