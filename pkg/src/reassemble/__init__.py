"""Fragment reassembly by pose diffusion over selected contour keypoints."""

__version__ = "0.1.0"
