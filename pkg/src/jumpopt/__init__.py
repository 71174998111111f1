"""Task-space trajectory optimisation for agile quadruped manoeuvres."""

__version__ = "0.1.0"
