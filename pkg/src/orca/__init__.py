"""Control stack for a 17-DoF tendon-driven hand."""

__version__ = "0.1.0"
