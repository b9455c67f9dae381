"""Figure rendering for adaptation-run artifacts."""

__version__ = "0.1.0"
