"""Loop-closure detection for monocular vSLAM with a planar pose-graph back end."""

__version__ = "0.1.0"
