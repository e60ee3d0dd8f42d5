"""No-reference geometry quality assessment of colourless point clouds."""

__version__ = "0.1.0"
