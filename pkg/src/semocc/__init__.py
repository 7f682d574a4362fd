"""Single-view density-field reconstruction."""
__version__ = "0.1.0"
