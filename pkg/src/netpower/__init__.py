"""Per-cycle post-layout power prediction from gate-level netlists."""
__version__ = "0.1.0"
